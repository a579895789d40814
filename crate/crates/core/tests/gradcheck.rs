//! Central finite differences against every backward rule, end to end.
//!
//! A three-cell network exercises the full op set: cell 0 runs every edge op
//! at stride one, cells 1 and 2 run them at stride two with slot adapters,
//! and cell 2 adds a gated inter-cell connection and the stem slot. The loss
//! is the classifier cross entropy, so the check covers the stem, channel
//! norms, pruner gates, pooling tower, and linear head in one graph.

use bonsai_core::{
    stream_seed, GateMode, Hypernetwork, ModelGenotype, NetConfig, Param, ParamBank, ParamId,
    Tape, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GATE_M: f64 = 1e5;
/// Descending probe steps: a hinge crossing inside the difference window
/// shrinks away with the step, a wrong backward rule does not.
const STEPS: [f64; 3] = [1e-4, 1e-5, 3e-6];
const GATE_STEP: f64 = 1e-2 / GATE_M;

fn genotype() -> ModelGenotype {
    NetConfig {
        cell_count: 3,
        nodes_per_cell: 1,
        channels0: 4,
        input_shape: [3, 6, 6],
        class_count: 3,
    }
    .hyper_genotype()
}

fn build() -> (Hypernetwork, ParamBank) {
    let mut bank = ParamBank::new();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(41, 0));
    let net = Hypernetwork::new(
        genotype(),
        GateMode::Trainable {
            m: GATE_M,
            init: 0.1,
        },
        2,
        3,
        &mut bank,
        &mut rng,
    )
    .unwrap();
    (net, bank)
}

fn fixed_batch() -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(41, 1));
    let n = 2 * 3 * 6 * 6;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(bonsai_core::normal(&mut rng));
    }
    (
        Tensor::from_vec(bonsai_core::Shape(vec![2, 3, 6, 6]), data).unwrap(),
        vec![0, 2],
    )
}

fn loss(net: &Hypernetwork, bank: &mut ParamBank, x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::no_grad();
    let out = net.forward(bank, &mut tape, x, true, 0.0, false, None).unwrap();
    let ce = tape.cross_entropy(out.main, labels).unwrap();
    tape.value(ce)[0]
}

fn analytic(net: &Hypernetwork, bank: &mut ParamBank, x: &Tensor, labels: &[usize]) {
    bank.zero_grads();
    let mut tape = Tape::new();
    let out = net.forward(bank, &mut tape, x, true, 0.0, false, None).unwrap();
    let ce = tape.cross_entropy(out.main, labels).unwrap();
    tape.backward(ce).unwrap();
    tape.write_grads(bank);
}

fn checkable(p: &Param) -> bool {
    p.alive && p.learnable
}

/// |a - f| within `rel` of the larger magnitude, with an absolute floor that
/// covers central-difference truncation noise.
fn agree(a: f64, f: f64, rel: f64) -> bool {
    (a - f).abs() <= 1e-6f64.max(rel * a.abs().max(f.abs()))
}

#[test]
fn all_parameters_match_finite_differences() {
    let (net, mut bank) = build();
    let (x, labels) = fixed_batch();
    let gate_ids: Vec<ParamId> = net.gate_weight_ids();
    analytic(&net, &mut bank, &x, &labels);
    let grads: Vec<(ParamId, Vec<f64>)> = bank
        .iter()
        .filter(|(id, p)| checkable(p) && !gate_ids.contains(id))
        .map(|(id, p)| (id, p.grad.clone()))
        .collect();
    let mut checked = 0usize;
    for (id, grad) in grads {
        for e in 0..grad.len() {
            let orig = bank.get(id).data[e];
            let mut last = f64::NAN;
            let ok = STEPS.iter().any(|&h| {
                bank.get_mut(id).data[e] = orig + h;
                let up = loss(&net, &mut bank, &x, &labels);
                bank.get_mut(id).data[e] = orig - h;
                let down = loss(&net, &mut bank, &x, &labels);
                bank.get_mut(id).data[e] = orig;
                last = (up - down) / (2.0 * h);
                agree(grad[e], last, 1e-4)
            });
            assert!(
                ok,
                "{}[{e}]: analytic {} vs fd {last}",
                bank.get(id).label,
                grad[e]
            );
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} parameters checked");
}

#[test]
fn gate_weights_match_finite_differences() {
    let (net, mut bank) = build();
    let (x, labels) = fixed_batch();
    let gate_ids = net.gate_weight_ids();
    assert!(!gate_ids.is_empty());
    // park each gate mid-tooth so the finite-difference window stays clear
    // of the saw discontinuities at multiples of 1/M
    for &gid in &gate_ids {
        bank.get_mut(gid).data[0] += 0.5 / GATE_M;
    }
    analytic(&net, &mut bank, &x, &labels);
    for &gid in &gate_ids {
        let a = bank.get(gid).grad[0];
        let orig = bank.get(gid).data[0];
        bank.get_mut(gid).data[0] = orig + GATE_STEP;
        let up = loss(&net, &mut bank, &x, &labels);
        bank.get_mut(gid).data[0] = orig - GATE_STEP;
        let down = loss(&net, &mut bank, &x, &labels);
        bank.get_mut(gid).data[0] = orig;
        let fd = (up - down) / (2.0 * GATE_STEP);
        assert!(
            (a - fd).abs() <= 1e-8f64.max(1e-6 * a.abs().max(fd.abs())),
            "{}: analytic {a} vs fd {fd}",
            bank.get(gid).label
        );
    }
}

#[test]
fn closed_gate_parameters_still_receive_gradients() {
    // the saw term keeps d(output)/d(weight) = 1 even when the gate shuts
    // the signal off, so a closed gate's weight keeps a live gradient path
    let (net, mut bank) = build();
    let (x, labels) = fixed_batch();
    let gate_ids = net.gate_weight_ids();
    let closed = gate_ids[3];
    bank.get_mut(closed).data[0] = -0.5 / GATE_M;
    analytic(&net, &mut bank, &x, &labels);
    let a = bank.get(closed).grad[0];
    let orig = bank.get(closed).data[0];
    bank.get_mut(closed).data[0] = orig + GATE_STEP;
    let up = loss(&net, &mut bank, &x, &labels);
    bank.get_mut(closed).data[0] = orig - GATE_STEP;
    let down = loss(&net, &mut bank, &x, &labels);
    bank.get_mut(closed).data[0] = orig;
    let fd = (up - down) / (2.0 * GATE_STEP);
    assert!(
        (a - fd).abs() <= 1e-8f64.max(1e-6 * a.abs().max(fd.abs())),
        "closed gate: analytic {a} vs fd {fd}"
    );
}
