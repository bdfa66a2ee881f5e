//! Every primitive against central finite differences: 20 random instances each,
//! step 1e-5, relative error at most 1e-4.

use numcore::gradcheck::{central_difference, compare, FD_STEP, REL_FLOOR};
use numcore::{NumError, Rng, Tape, Tensor, Var};

const TRIALS: usize = 20;
const TOL: f64 = 1e-4;

/// Builds `sum(w ⊙ op(inputs))` for random fixed `w` so every output element
/// contributes a distinct weight to the scalar.
fn weighted(tape: &mut Tape, out: Var, rng: &mut Rng) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::randn(shape, 1.0, rng)).unwrap();
    let p = tape.mul(out, w).unwrap();
    tape.sum_all(p).unwrap()
}

fn check<F>(name: &str, shapes: &[Vec<usize>], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    check_with(name, shapes, |s, r| Tensor::randn(s.to_vec(), 1.0, r), op)
}

fn check_with<G, F>(name: &str, shapes: &[Vec<usize>], gen: G, op: F)
where
    G: Fn(&[usize], &mut Rng) -> Tensor,
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumError>,
{
    for trial in 0..TRIALS {
        let mut rng = Rng::new(1000 + trial as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| gen(s, &mut rng)).collect();
        let wseed = rng.next_u64();

        let eval = |vals: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let out = op(&mut tape, &vars).unwrap();
            let loss = weighted(&mut tape, out, &mut Rng::new(wseed));
            let g = tape.backward(loss).unwrap();
            let grads = vars
                .iter()
                .zip(vals)
                .map(|(&v, t)| g.get_or_zeros(v, t.shape()))
                .collect();
            (tape.value(loss).item(), grads)
        };

        let (_, analytic) = eval(&inputs);
        for (which, inp) in inputs.iter().enumerate() {
            let numeric = central_difference(
                |x| {
                    let mut vals = inputs.clone();
                    vals[which] = Tensor::new(inp.shape().to_vec(), x.to_vec()).unwrap();
                    eval(&vals).0
                },
                inp.data(),
                FD_STEP,
            );
            let rep = compare(analytic[which].data(), &numeric, REL_FLOOR);
            assert!(
                rep.passes(TOL),
                "{name} trial {trial} input {which}: max rel err {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                rep.max_rel_err,
                rep.worst_index,
                rep.worst_analytic,
                rep.worst_numeric
            );
        }
    }
}

#[test]
fn matmul() {
    check("matmul", &[vec![4, 5], vec![5, 3]], |t, v| {
        t.matmul(v[0], v[1])
    });
    check("matmul rank3", &[vec![2, 3, 4], vec![4, 2]], |t, v| {
        t.matmul(v[0], v[1])
    });
    check("affine", &[vec![2, 3, 4], vec![4, 2], vec![2]], |t, v| {
        t.affine(v[0], v[1], v[2])
    });
}

#[test]
fn bmm() {
    check("bmm", &[vec![2, 3, 4], vec![2, 4, 5]], |t, v| {
        t.bmm(v[0], v[1], false)
    });
    check("bmm_nt", &[vec![2, 3, 4], vec![2, 5, 4]], |t, v| {
        t.bmm(v[0], v[1], true)
    });
}

#[test]
fn elementwise() {
    check("add", &[vec![2, 3, 4], vec![3, 4]], |t, v| {
        t.add(v[0], v[1])
    });
    check("sub", &[vec![3, 4], vec![4]], |t, v| t.sub(v[0], v[1]));
    check("mul", &[vec![2, 3, 4], vec![4]], |t, v| t.mul(v[0], v[1]));
    check("mul same", &[vec![5]], |t, v| t.mul(v[0], v[0]));
    check("scale", &[vec![3, 4]], |t, v| t.scale(v[0], -2.5));
    check("add_scalar", &[vec![3]], |t, v| t.add_scalar(v[0], 0.7));
    check("tanh", &[vec![2, 6]], |t, v| t.tanh(v[0]));
    check("gelu", &[vec![2, 6]], |t, v| t.gelu(v[0]));
    check("softplus", &[vec![10]], |t, v| t.softplus(v[0]));
}

#[test]
fn relu_away_from_kink() {
    // Keep inputs at least 0.1 from the kink so the finite difference is smooth.
    check_with(
        "relu",
        &[vec![3, 7]],
        |s, r| {
            let t = Tensor::randn(s.to_vec(), 1.0, r);
            t.map(|x| {
                if x.abs() < 0.1 {
                    x + 0.2 * x.signum()
                } else {
                    x
                }
            })
        },
        |t, v| t.relu(v[0]),
    );
}

#[test]
fn softmax() {
    check("softmax", &[vec![2, 3, 5]], |t, v| t.softmax(v[0]));
}

#[test]
fn masked_softmax() {
    let mut mask = Tensor::zeros([4, 4]);
    for i in 0..4 {
        for j in i + 1..4 {
            mask.set(&[i, j], -1e9);
        }
    }
    check("masked softmax", &[vec![2, 4, 4]], move |t, v| {
        let m = t.masked_bias(v[0], &mask)?;
        t.softmax(m)
    });
}

#[test]
fn layer_norm() {
    check("layer_norm", &[vec![8], vec![8], vec![8]], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check(
        "layer_norm rank3",
        &[vec![2, 3, 6], vec![6], vec![6]],
        |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn reductions() {
    check("sum_all", &[vec![3, 4]], |t, v| t.sum_all(v[0]));
    check("mean_all", &[vec![3, 4]], |t, v| t.mean_all(v[0]));
    check("sum_axis0", &[vec![3, 4, 2]], |t, v| t.sum_axis(v[0], 0));
    check("sum_axis1", &[vec![3, 4, 2]], |t, v| t.sum_axis(v[0], 1));
    check("mean_axis2", &[vec![3, 4, 2]], |t, v| t.mean_axis(v[0], 2));
}

#[test]
fn structural() {
    check("concat_last", &[vec![2, 3, 2], vec![2, 3, 4]], |t, v| {
        t.concat_last(&[v[0], v[1]])
    });
    check("slice_last", &[vec![2, 3, 6]], |t, v| {
        t.slice_last(v[0], 2, 3)
    });
    check("narrow0", &[vec![4, 3]], |t, v| t.narrow0(v[0], 1, 2));
    check("concat0", &[vec![2, 3], vec![1, 3]], |t, v| {
        t.concat0(&[v[0], v[1]])
    });
    check("reshape", &[vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
}

#[test]
fn composite_attention_block() {
    // softmax(q kᵀ / sqrt(d) + mask) v, the pattern used by every attention layer.
    let mut mask = Tensor::zeros([3, 3]);
    for i in 0..3 {
        for j in i + 1..3 {
            mask.set(&[i, j], -1e9);
        }
    }
    check(
        "attention",
        &[vec![2, 3, 4], vec![2, 3, 4], vec![2, 3, 4]],
        move |t, v| {
            let s = t.bmm(v[0], v[1], true)?;
            let s = t.scale(s, 0.5)?;
            let s = t.masked_bias(s, &mask)?;
            let p = t.softmax(s)?;
            t.bmm(p, v[2], false)
        },
    );
}
