//! Merging metrics files into summary tables and static SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{
    summarize, ConditionSummary, MetricsLine, MetricsRow, RunFailure, Variant, METRIC_NOTE,
};

/// Rows and failures gathered from metrics files. Summary lines in the
/// input are skipped; summaries are recomputed from rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<RunFailure>,
}

impl MetricsTable {
    /// Parses one file, reporting every malformed line as `name:line: …`.
    pub fn parse(&mut self, name: &str, text: &str) -> Result<()> {
        let mut errors = String::new();
        for (n, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<MetricsLine>(raw) {
                Ok(MetricsLine::Row(r)) => match check_row(&r) {
                    Ok(()) => self.rows.push(r),
                    Err(e) => {
                        let _ = writeln!(errors, "{name}:{}: {e}", n + 1);
                    }
                },
                Ok(MetricsLine::Failure(f)) => self.failures.push(f),
                Ok(MetricsLine::Summary(_)) => {}
                Err(e) => {
                    let _ = writeln!(errors, "{name}:{}: {e}", n + 1);
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(errors.trim_end().to_string()))
        }
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Input("need at least one metrics file".into()));
        }
        let mut t = MetricsTable::default();
        for p in paths {
            let p = p.as_ref();
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            t.parse(&p.display().to_string(), &text)?;
        }
        Ok(t)
    }
}

fn check_row(r: &MetricsRow) -> std::result::Result<(), String> {
    if !(0.0..=1.0).contains(&r.accuracy) {
        return Err(format!("accuracy {} outside [0, 1]", r.accuracy));
    }
    if let Some(u) = &r.usage {
        let s: f64 = u.iter().sum();
        if u.iter().any(|&x| x < -1e-9) || (s - 1.0).abs() > 1e-6 {
            return Err("usage is not on the simplex".into());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub note: String,
    pub conditions: Vec<ConditionSummary>,
    pub failures: Vec<RunFailure>,
    pub plots: Vec<String>,
}

/// A named curve of `(x, mean, std)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, f64)>,
}

fn series_by_model(
    conditions: &[ConditionSummary],
    experiment: &str,
    x: impl Fn(&ConditionSummary) -> Option<f64>,
    y: impl Fn(&ConditionSummary) -> Option<(f64, f64)>,
) -> Vec<Series> {
    let mut out: Vec<(Variant, Series)> = Vec::new();
    for c in conditions.iter().filter(|c| c.experiment == experiment) {
        let (Some(x), Some((m, s))) = (x(c), y(c)) else {
            continue;
        };
        let i = match out.iter().position(|(v, _)| *v == c.params.model) {
            Some(i) => i,
            None => {
                out.push((
                    c.params.model,
                    Series {
                        name: c.params.model.to_string(),
                        points: Vec::new(),
                    },
                ));
                out.len() - 1
            }
        };
        out[i].1.points.push((x, m, s));
    }
    let mut series: Vec<Series> = out.into_iter().map(|(_, s)| s).collect();
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

fn accuracy(c: &ConditionSummary) -> Option<(f64, f64)> {
    c.accuracy.map(|s| (s.mean, s.std))
}

/// Builds the summary and the plots the data supports, as `(file, svg)`.
pub fn build_report(table: &MetricsTable) -> (Report, Vec<(String, String)>) {
    let conditions = summarize(&table.rows, &table.failures);
    let mut plots = Vec::new();
    let by_k = conditions
        .iter()
        .filter(|c| c.experiment == "ablate-k")
        .filter_map(|c| match (c.params.model, accuracy(c)) {
            (Variant::Prefmoe { experts }, Some((m, s))) => Some((experts as f64, m, s)),
            _ => None,
        })
        .collect::<Vec<_>>();
    if !by_k.is_empty() {
        let mut points = by_k;
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let series = [Series {
            name: "prefmoe".into(),
            points,
        }];
        plots.push((
            "score_vs_k.svg".to_string(),
            line_plot(
                "Accuracy vs experts",
                "experts K",
                "held-out accuracy",
                &series,
            ),
        ));
    }
    let retention = series_by_model(
        &conditions,
        "ablate-noise",
        |c| Some(c.params.flip_rate),
        |c| c.retention.map(|s| (s.mean, s.std)),
    );
    if !retention.is_empty() {
        plots.push((
            "retention_vs_dp.svg".to_string(),
            line_plot(
                "Retention vs added flips",
                "flip rate",
                "relative retention",
                &retention,
            ),
        ));
    }
    let annotators = series_by_model(
        &conditions,
        "ablate-annotators",
        |c| c.params.annotators.map(|n| n as f64),
        accuracy,
    );
    if !annotators.is_empty() {
        plots.push((
            "score_vs_annotators.svg".to_string(),
            line_plot(
                "Accuracy vs annotators",
                "annotators",
                "held-out accuracy",
                &annotators,
            ),
        ));
    }
    let report = Report {
        note: METRIC_NOTE.to_string(),
        conditions,
        failures: table.failures.clone(),
        plots: plots.iter().map(|(f, _)| f.clone()).collect(),
    };
    (report, plots)
}

/// Writes `summary.json` and every plot under `dir`.
pub fn write_report(table: &MetricsTable, dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (report, plots) = build_report(table);
    let path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    for (name, svg) in plots {
        let path = dir.join(name);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Line plot with ±std error bars.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (480.0, 320.0);
    let (left, right, top, bottom) = (60.0, 110.0, 30.0, 45.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, m, s) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(m - s);
        y1 = y1.max(m + s);
    }
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    y0 -= pad;
    y1 += pad;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let (ax0, ax1, ay0, ay1) = (left, w - right, h - bottom, top);
    let _ = writeln!(
        svg,
        r#"<path d="M{ax0:.2} {ay1:.2} L{ax0:.2} {ay0:.2} L{ax1:.2} {ay0:.2}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.3}</text>"#,
            ax0 - 4.0,
            py(y) + 4.0
        );
    }
    let mut xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#,
            px(x),
            ay0 + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (ax0 + ax1) / 2.0,
        h - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        (ay0 + ay1) / 2.0,
        (ay0 + ay1) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(j, &(x, m, _))| {
                format!(
                    "{}{:.2} {:.2}",
                    if j == 0 { "M" } else { "L" },
                    px(x),
                    py(m)
                )
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<path d="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
            path.join(" ")
        );
        for &(x, m, sd) in &s.points {
            let (cx, lo, hi) = (px(x), py(m - sd), py(m + sd));
            let _ = writeln!(
                svg,
                r#"<path d="M{cx:.2} {lo:.2} L{cx:.2} {hi:.2} M{:.2} {lo:.2} L{:.2} {lo:.2} M{:.2} {hi:.2} L{:.2} {hi:.2}" stroke="{color}"/>"#,
                cx - 3.0,
                cx + 3.0,
                cx - 3.0,
                cx + 3.0
            );
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                py(m)
            );
        }
        let ly = top + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{ly:.2}" fill="{color}">{}</text>"#,
            ax1 + 10.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::Condition;

    fn row(condition_k: usize, seed: u64, acc: f64) -> String {
        let params = Condition {
            model: Variant::Prefmoe {
                experts: condition_k,
            },
            flip_rate: 0.0,
            annotators: None,
        };
        let r = MetricsRow {
            experiment: "ablate-k".into(),
            condition: params.label(),
            params,
            seed: Some(seed),
            accuracy: acc,
            bt_loss: 0.6,
            usage: None,
            max_usage: None,
            retention: None,
            best_epoch: None,
            flip_digest: None,
        };
        serde_json::to_string(&MetricsLine::Row(r)).unwrap()
    }

    #[test]
    fn merges_and_aggregates() {
        let mut t = MetricsTable::default();
        t.parse("a", &format!("{}\n{}\n", row(1, 0, 0.5), row(1, 1, 0.7)))
            .unwrap();
        t.parse("b", &format!("{}\n", row(2, 0, 0.9))).unwrap();
        let (report, plots) = build_report(&t);
        assert_eq!(report.conditions.len(), 2);
        let a = report.conditions[0].accuracy.unwrap();
        assert!((a.mean - 0.6).abs() < 1e-12);
        assert!((a.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(report.conditions[1].accuracy.unwrap().std, 0.0);
        assert_eq!(plots.len(), 1);
        assert!(plots[0].1.starts_with("<svg"));
    }

    #[test]
    fn malformed_rows_name_their_lines() {
        let mut t = MetricsTable::default();
        let text = format!("{}\n{{\"row\": 1}}\n\n{}\n", row(1, 0, 0.5), row(1, 1, 1.5));
        let err = t.parse("m.jsonl", &text).unwrap_err().to_string();
        assert!(
            err.contains("m.jsonl:2:") && err.contains("m.jsonl:4:"),
            "{err}"
        );
    }
}
