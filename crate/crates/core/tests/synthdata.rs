//! Generator self-test: the synthetic texture classes must be separable by
//! a small fixed reference net, or downstream search results would be
//! measuring noise.

use bonsai_core::data::{make_batch, split, synthetic};
use bonsai_core::ops::conv::Conv2dSpec;
use bonsai_core::ops::loss::accuracy;
use bonsai_core::params::he_normal;
use bonsai_core::{sgd_step, ParamBank, ParamId, Shape, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct RefNet {
    conv: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl RefNet {
    fn new(bank: &mut ParamBank, channels: usize, classes: usize, rng: &mut ChaCha8Rng) -> RefNet {
        let hidden = 8;
        let conv_len = hidden * channels * 9;
        RefNet {
            conv: bank.add(
                "ref/conv".into(),
                Shape(vec![hidden, channels, 3, 3]),
                he_normal(rng, conv_len, channels * 9),
                true,
            ),
            fc_w: bank.add(
                "ref/fc_w".into(),
                Shape(vec![classes, hidden]),
                he_normal(rng, classes * hidden, hidden),
                true,
            ),
            fc_b: bank.add(
                "ref/fc_b".into(),
                Shape(vec![classes]),
                vec![0.0; classes],
                false,
            ),
        }
    }

    fn logits(
        &self,
        tape: &mut Tape,
        bank: &ParamBank,
        x: bonsai_core::ValueId,
    ) -> bonsai_core::ValueId {
        let w = tape.lease(bank, self.conv);
        let h = tape
            .conv2d(x, w, Conv2dSpec::plain(2, 1), "ref/conv")
            .unwrap();
        let h = tape.relu(h);
        let pooled = tape.global_avg_pool(h, "ref/gap").unwrap();
        let fw = tape.lease(bank, self.fc_w);
        let fb = tape.lease(bank, self.fc_b);
        tape.linear(pooled, fw, fb, "ref/fc").unwrap()
    }
}

#[test]
fn reference_net_separates_the_synthetic_classes() {
    let classes = 3;
    let mut data_rng = ChaCha8Rng::seed_from_u64(11);
    let ds = synthetic(classes, 80, 3, 12, 12, &mut data_rng);
    let mut split_rng = ChaCha8Rng::seed_from_u64(12);
    let (train, val) = split(&ds, 0.25, &mut split_rng);

    let mut bank = ParamBank::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(13);
    let net = RefNet::new(&mut bank, 3, classes, &mut init_rng);
    let mut order_rng = ChaCha8Rng::seed_from_u64(14);

    let batch = 30;
    for _ in 0..40 {
        let mut idxs: Vec<usize> = (0..train.len()).collect();
        bonsai_core::data::shuffle(&mut idxs, &mut order_rng);
        for chunk in idxs.chunks_exact(batch) {
            let (x, labels) = make_batch(&train, chunk, None).unwrap();
            let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            let mut tape = Tape::new();
            let xin = tape.input(&x);
            let logits = net.logits(&mut tape, &bank, xin);
            let loss = tape.cross_entropy(logits, &labels).unwrap();
            tape.backward(loss).unwrap();
            tape.write_grads(&mut bank);
            sgd_step(&mut bank, 0.05, 0.9, 1e-4).unwrap();
        }
    }

    let idxs: Vec<usize> = (0..val.len()).collect();
    let (x, labels) = make_batch(&val, &idxs, None).unwrap();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let mut tape = Tape::no_grad();
    let xin = tape.input(&x);
    let logits = net.logits(&mut tape, &bank, xin);
    let acc = accuracy(tape.value(logits), val.len(), classes, &labels);
    assert!(acc >= 0.9, "reference net reached only {acc:.3} val accuracy");
}
