mod common;

use common::*;
use numcore::gradcheck::{central_difference, compare, FD_STEP};
use numcore::{Rng, Tape};
use prefmoe::datagen::LabeledPair;
use prefmoe::model::{ModelConfig, PrefMoe, RewardModel};
use prefmoe::objective::{total_loss, total_loss_tape};

#[test]
fn every_parameter_matches_finite_differences() {
    let cfg = ModelConfig {
        state_dim: 3,
        action_dim: 2,
        max_len: 8,
        width: 16,
        routing_dim: 8,
        experts: 2,
        heads: 2,
        intra_layers: 1,
        ffn_mult: 2,
        tanh_head: false,
    };
    let mut model = PrefMoe::new(cfg, 11).unwrap();
    let mut rng = Rng::new(12);
    randomize(&mut model, 0.2, &mut rng);
    let pairs = random_pairs(4, 8, 3, 2, &mut rng);
    let batch = LabeledPair::batch(&pairs).unwrap();
    let lambda = 0.5;

    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape, true).unwrap();
    let v = total_loss_tape(&mut tape, &model, &p, &batch, lambda).unwrap();
    let grads = tape.backward(v.total).unwrap();
    let analytic: Vec<f64> = p
        .gradients(&grads, model.params())
        .iter()
        .flat_map(|g| g.data().to_vec())
        .collect();

    let x0 = model.params().flatten();
    let mut probe = model.clone();
    let numeric = central_difference(
        |x| {
            probe.params_mut().assign_flat(x);
            total_loss(&probe, &batch, lambda).unwrap().total
        },
        &x0,
        FD_STEP,
    );
    // Central differences of an O(1) loss carry ~1e-10 rounding noise, so
    // gradients that vanish exactly (key biases under softmax) are compared
    // on an absolute 1e-9 scale.
    let report = compare(&analytic, &numeric, 1e-5);
    let names: Vec<String> = model
        .params()
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.name.clone(), p.value.len()))
        .collect();
    assert!(
        report.passes(1e-4),
        "worst {} at {} ({}): analytic {} numeric {}",
        report.max_rel_err,
        report.worst_index,
        names[report.worst_index],
        report.worst_analytic,
        report.worst_numeric
    );
}
