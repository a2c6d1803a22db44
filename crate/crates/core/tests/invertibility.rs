mod common;

use qpan_core::train::{adam_step, AdamState};
use qpan_core::transforms::{pan_inverse_backward, pan_inverse_residual, PanTransform, PanWeights};
use qpan_core::synth::piecewise_smooth;
use qpan_core::Tensor;

fn banks(p: &PanTransform) -> [&Tensor; 4] {
    let w = p.weights();
    [w.a, w.b, w.bt, w.at]
}

fn inverse_loss(p: &PanTransform, xs: &[Tensor]) -> f64 {
    let n: usize = xs.iter().map(|x| x.len()).sum();
    xs.iter().map(|x| pan_inverse_residual(p.weights(), x).unwrap().0.norm_sq()).sum::<f64>() / n as f64
}

#[test]
fn fitting_the_inverse_term_generalizes_to_new_probes() {
    let mut rng = common::rng(21);
    let mut t = PanTransform::random(4, &mut rng);
    let probes: Vec<Tensor> = (0..64).map(|_| piecewise_smooth(8, 8, &mut rng)).collect();
    let held_out: Vec<Tensor> = (0..16).map(|_| piecewise_smooth(8, 8, &mut rng)).collect();
    let n: usize = probes.iter().map(|x| x.len()).sum();
    let count: usize = banks(&t).iter().map(|b| b.len()).sum();
    let mut state = AdamState::new(count);
    let mut loss = inverse_loss(&t, &probes);
    let start = loss;
    let mut step = 0;
    while loss >= 1e-6 && step < 20_000 {
        let mut grad = vec![0.0; count];
        for x in &probes {
            let (r, tape) = pan_inverse_residual(t.weights(), x).unwrap();
            let g = r.map(|v| 2.0 * v / n as f64);
            let parts = pan_inverse_backward(t.weights(), &tape, &g).unwrap();
            let mut at = 0;
            for p in parts {
                for (acc, v) in grad[at..at + p.len()].iter_mut().zip(p.data()) {
                    *acc += v;
                }
                at += p.len();
            }
        }
        let mut flat: Vec<f64> = banks(&t).iter().flat_map(|b| b.data().to_vec()).collect();
        adam_step(&mut state, &mut flat, &grad, 5e-3, 0.9, 0.999, 1e-8).unwrap();
        let mut at = 0;
        for bank in [
            &mut t.analysis.a,
            &mut t.analysis.b,
            &mut t.synthesis.bt,
            &mut t.synthesis.at,
        ] {
            let w = bank.weights_mut().data_mut();
            let len = w.len();
            w.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
        loss = inverse_loss(&t, &probes);
        step += 1;
    }
    eprintln!("inverse loss {start:.3e} -> {loss:.3e} in {step} steps");
    assert!(loss < 1e-6, "probe loss stuck at {loss}");
    for x in &held_out {
        let (r, _) = pan_inverse_residual(PanWeights::from_slice(&banks(&t)), x).unwrap();
        let rel = r.norm() / x.norm();
        assert!(rel < 1e-2, "held-out relative error {rel}");
    }
}
