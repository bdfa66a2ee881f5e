//! Central finite differences for verifying tape gradients.
//!
//! These routines only ever evaluate the function being checked; they never
//! touch the tape, so they stay independent of the backward pass.

/// Default perturbation for central differences in double precision.
pub const FD_STEP: f64 = 1e-5;

/// Below this magnitude gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients against numeric ones coordinate by coordinate.
pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut rep = GradCheck {
        checked: analytic.len(),
        max_rel_err: 0.0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n, floor);
        if e > rep.max_rel_err || i == 0 {
            rep.max_rel_err = e;
            rep.worst_index = i;
            rep.worst_analytic = a;
            rep.worst_numeric = n;
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_difference(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], FD_STEP);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-6), 0.0);
        assert!((relative_error(1e-9, 2e-9, 1e-6) - 1e-3).abs() < 1e-15);
        assert!((relative_error(1.0, 1.1, 1e-6) - 0.1 / 1.1).abs() < 1e-15);
    }
}
