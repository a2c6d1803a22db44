mod common;

use common::{check_gradients, identity_op, patches, rng, toy_model};
use qpan_core::network::{LayerParams, NetworkModel, QuantBank, Variant};
use qpan_core::penalties::{MixtureWeights, PenaltyKind, PenaltySpec, PARAM_MARGIN};
use qpan_core::quantize::{fit_and_quantize, refresh_quantized_views};
use qpan_core::sensing::make_sensing;
use qpan_core::solver::{run_paisa, run_paisa_plus, SolverConfig};
use qpan_core::tensor::{conv2d, relu};
use qpan_core::train::measure_all;
use qpan_core::transforms::{PanTransform, PlusTransform};
use qpan_core::{BankRole, Error, FilterBank, Tensor};

fn specs3() -> Vec<PenaltySpec> {
    vec![
        PenaltySpec::l1(0.05).unwrap(),
        PenaltySpec::mcp(0.08, 2.5).unwrap(),
        PenaltySpec::scad(0.06, 3.2).unwrap(),
    ]
}

#[test]
fn pan_with_shared_parameters_reproduces_paisa() {
    let op = make_sensing(64, 0.25, 1).unwrap();
    for seed in 0..4 {
        let cfg = SolverConfig {
            iterations: 4,
            rho: 0.9,
            penalties: specs3(),
            alphas: MixtureWeights::uniform(3),
            transform: PanTransform::random(4, &mut rng(seed)),
            patch: (8, 8),
        };
        let x = &patches(1, 8, seed)[0];
        let y = op.measure(x).unwrap();
        let solved = run_paisa(&cfg, &op, &y).unwrap();
        for n_l in [1, 4] {
            let model = NetworkModel::unfold_paisa(&cfg, n_l).unwrap();
            let out = model.reconstruct(&op, std::slice::from_ref(&y)).unwrap();
            if n_l == 4 {
                assert_eq!(out[0], solved.x);
            } else {
                let one = run_paisa(&SolverConfig { iterations: 1, ..cfg.clone() }, &op, &y).unwrap();
                assert_eq!(out[0], one.x);
            }
        }
    }
}

#[test]
fn pan_plus_with_shared_parameters_reproduces_paisa_plus() {
    let op = make_sensing(49, 0.3, 2).unwrap();
    let cfg = SolverConfig {
        iterations: 3,
        rho: 0.7,
        penalties: specs3()[..2].to_vec(),
        alphas: MixtureWeights::uniform(2),
        transform: PlusTransform::random(3, &mut rng(9)),
        patch: (7, 7),
    };
    let x = &patches(1, 7, 4)[0];
    let y = op.measure(x).unwrap();
    let solved = run_paisa_plus(&cfg, &op, &y).unwrap();
    let model = NetworkModel::unfold_paisa_plus(&cfg, 3).unwrap();
    assert_eq!(model.reconstruct(&op, &[y]).unwrap()[0], solved.x);
}

/// Single-penalty path written out with primitives only.
fn soft_threshold_network(model: &NetworkModel, phi: &Tensor, y: &[f64]) -> Vec<f64> {
    let (m, n) = (phi.shape()[0], phi.shape()[1]);
    let a = phi.data();
    let mut x: Vec<f64> = (0..n).map(|j| (0..m).map(|i| a[i * n + j] * y[i]).sum()).collect();
    for layer in model.layers() {
        let resid: Vec<f64> = (0..m).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>() - y[i]).collect();
        let r: Vec<f64> = (0..n)
            .map(|j| x[j] - layer.rho * (0..m).map(|i| a[i * n + j] * resid[i]).sum::<f64>())
            .collect();
        let (ph, pw) = model.patch();
        let r = Tensor::new(vec![1, ph, pw], r).unwrap();
        let w: Vec<&Tensor> = layer.banks.iter().map(|b| b.shadow()).collect();
        let coeffs = conv2d(&relu(&conv2d(&r, w[0]).unwrap()), w[1]).unwrap();
        let lam = layer.lambdas[0];
        let shrunk = coeffs.map(|v| v.signum() * (v.abs() - lam).max(0.0));
        x = conv2d(&relu(&conv2d(&shrunk, w[2]).unwrap()), w[3]).unwrap().into_data();
    }
    x
}

#[test]
fn l1_only_network_is_a_soft_threshold_network() {
    let op = make_sensing(36, 0.5, 3).unwrap();
    let model = toy_model(Variant::Pan, 1, 3, 4, 6, 5);
    assert_eq!(model.kinds(), &[PenaltyKind::L1]);
    let x = &patches(1, 6, 8)[0];
    let y = op.measure(x).unwrap();
    let got = model.reconstruct(&op, std::slice::from_ref(&y)).unwrap();
    let want = soft_threshold_network(&model, op.matrix(), y.data());
    for (g, w) in got[0].data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{g} vs {w}");
    }
}

#[test]
fn batch_forward_equals_independent_forwards() {
    let op = make_sensing(64, 0.25, 4).unwrap();
    for variant in [Variant::Pan, Variant::PanPlus] {
        let model = toy_model(variant, 3, 2, 4, 8, 6);
        let xs = patches(6, 8, 7);
        let ys = measure_all(&op, &xs).unwrap();
        let batch = model.reconstruct(&op, &ys).unwrap();
        for (y, b) in ys.iter().zip(&batch) {
            assert_eq!(&model.reconstruct(&op, std::slice::from_ref(y)).unwrap()[0], b);
        }
        assert_eq!(model.forward(&op, &ys).unwrap().outputs, batch);
    }
}

fn center_tap(n_out: usize, n_in: usize, role: BankRole, v: f64) -> QuantBank {
    let mut bank = FilterBank::zeros(n_out, n_in, role);
    bank.weights_mut().data_mut()[4] = v;
    QuantBank::new(bank)
}

#[test]
fn two_patch_loss_matches_hand_computation() {
    // One channel, one layer, Phi = I, every bank a scaled centre tap, so the
    // layer acts pixelwise: x_out = at * relu(bt * soft(b * relu(a * r))).
    let (a, b, bt, at, lam) = (1.5, 0.8, 1.1, 0.7, 0.3);
    let layer = LayerParams {
        rho: 0.6,
        lambdas: vec![lam],
        gamma_mcp: 2.0,
        a_scad: 3.7,
        banks: vec![
            center_tap(1, 1, BankRole::A, a),
            center_tap(1, 1, BankRole::B, b),
            center_tap(1, 1, BankRole::Bt, bt),
            center_tap(1, 1, BankRole::At, at),
        ],
    };
    let model = NetworkModel::from_parts(
        Variant::Pan,
        vec![PenaltyKind::L1],
        MixtureWeights::uniform(1),
        (1, 2),
        None,
        vec![layer],
    )
    .unwrap();
    let op = identity_op(2);
    let xs = vec![
        Tensor::new(vec![1, 1, 2], vec![0.2, 0.9]).unwrap(),
        Tensor::new(vec![1, 1, 2], vec![0.5, 0.0]).unwrap(),
    ];
    let ys = measure_all(&op, &xs).unwrap();
    // x0 = y = x, so r = x. Per pixel:
    // u = b*a*x; soft = max(u - lam, 0); out = at*bt*soft; inverse = at*bt*b*a*x - x.
    let pixels = [0.2, 0.9, 0.5, 0.0];
    let mut mse = 0.0;
    let mut inv = 0.0;
    for &p in &pixels {
        let u: f64 = b * a * p;
        let out = at * bt * (u - lam).max(0.0);
        mse += (out - p) * (out - p);
        inv += (at * bt * u - p) * (at * bt * u - p);
    }
    let n_total = 4.0;
    let gamma = 0.01;
    let got = model.evaluate_loss(&op, &ys, &xs, gamma).unwrap();
    assert!((got.mse - mse / n_total).abs() < 1e-12);
    assert!((got.inverse - inv / n_total).abs() < 1e-12);
    assert!((got.total - (mse + gamma * inv) / n_total).abs() < 1e-12);
    let pure = model.evaluate_loss(&op, &ys, &xs, 0.0).unwrap();
    assert_eq!(pure.total, pure.mse);
    assert!((pure.total - mse / n_total).abs() < 1e-12);
}

fn zero_loss_plus_model(n_f: usize, patch: usize) -> NetworkModel {
    let t = PlusTransform::identity(n_f);
    let mut g = t.g.clone();
    g.weights_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let banks = [&t.d, &t.h1, &t.h2, &t.ht1, &t.ht2, &g];
    let layer = LayerParams {
        rho: 1.0,
        lambdas: vec![0.1; 3],
        gamma_mcp: 2.0,
        a_scad: 3.7,
        banks: banks.iter().map(|&b| QuantBank::new(b.clone())).collect(),
    };
    NetworkModel::from_parts(
        Variant::PanPlus,
        PenaltyKind::for_count(3).unwrap(),
        MixtureWeights::uniform(3),
        (patch, patch),
        None,
        vec![layer.clone(), layer],
    )
    .unwrap()
}

#[test]
fn zero_loss_configuration_has_zero_gradient() {
    let op = identity_op(36);
    let model = zero_loss_plus_model(3, 6);
    let xs = patches(3, 6, 1);
    let ys = measure_all(&op, &xs).unwrap();
    let (loss, grads) = model.loss_and_grad(&op, &ys, &xs, 0.01).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(grads.flat.iter().all(|&g| g == 0.0));
}

#[test]
fn gradients_match_finite_differences_on_small_models() {
    let op = make_sensing(36, 0.25, 11).unwrap();
    let xs = patches(2, 6, 12);
    let ys = measure_all(&op, &xs).unwrap();
    for (variant, regs) in [(Variant::Pan, 3), (Variant::Pan, 2), (Variant::PanPlus, 1), (Variant::PanPlus, 2)] {
        let model = toy_model(variant, regs, 2, 3, 6, 13);
        for c in check_gradients(&model, &op, &ys, &xs, 0.01, 14) {
            let inactive = (regs < 2 && c.name.ends_with("gamma_mcp")) || (regs < 3 && c.name.ends_with("a_scad"));
            if inactive {
                assert_eq!(c.analytic, 0.0, "{}", c.name);
                assert!(c.numeric.abs() < 1e-9, "{} {}", c.name, c.numeric);
            } else {
                assert!(c.passes(1e-5), "{variant} {regs}R {}: {} vs {}", c.name, c.analytic, c.numeric);
            }
        }
    }
}

#[test]
fn fused_and_staged_paths_agree_bitwise() {
    let op = make_sensing(64, 0.25, 21).unwrap();
    let model = toy_model(Variant::PanPlus, 3, 2, 4, 8, 22);
    let xs = patches(9, 8, 23);
    let ys = measure_all(&op, &xs).unwrap();
    let (loss, grads) = model.loss_and_grad(&op, &ys, &xs, 0.01).unwrap();
    let pass = model.forward(&op, &ys).unwrap();
    let eval = model.loss(&pass, &xs, 0.01).unwrap();
    assert_eq!(eval.breakdown, loss);
    assert_eq!(model.backward(&op, &pass, &eval).unwrap(), grads);
}

#[test]
fn straight_through_gradient_is_the_gradient_at_the_quantized_weights() {
    let op = make_sensing(64, 0.25, 31).unwrap();
    let xs = patches(3, 8, 32);
    let ys = measure_all(&op, &xs).unwrap();
    let mut qat = toy_model(Variant::PanPlus, 3, 2, 4, 8, 33);
    qat.set_bits(Some(2)).unwrap();
    refresh_quantized_views(&mut qat).unwrap();
    let (q_loss, q_grads) = qat.loss_and_grad(&op, &ys, &xs, 0.01).unwrap();

    // Full-precision twin whose weights are the quantized views.
    let mut twin = qat.clone();
    twin.set_bits(None).unwrap();
    for k in 0..twin.layers().len() {
        let views: Vec<Tensor> = qat.layers()[k].banks.iter().map(|b| b.effective().clone()).collect();
        let layer = twin.layer_mut(k);
        for (bank, v) in layer.banks.iter_mut().zip(views) {
            *bank = QuantBank::new(FilterBank::new(v, bank.role()).unwrap());
        }
    }
    let (t_loss, t_grads) = twin.loss_and_grad(&op, &ys, &xs, 0.01).unwrap();
    assert_eq!(q_loss, t_loss);
    assert_eq!(q_grads, t_grads);
    // And the views really are quantized.
    for layer in qat.layers() {
        for bank in &layer.banks {
            let view = bank.view().unwrap();
            assert_ne!(bank.effective(), bank.shadow());
            for (&c, &w) in view.codes.iter().zip(view.weights.data()) {
                assert!((-1..=1).contains(&c));
                assert_eq!(w, view.scale * c as f64);
            }
        }
    }
}

#[test]
fn stale_tapes_and_views_are_rejected() {
    let op = make_sensing(36, 0.25, 41).unwrap();
    let xs = patches(2, 6, 42);
    let ys = measure_all(&op, &xs).unwrap();
    let mut model = toy_model(Variant::Pan, 2, 2, 3, 6, 43);
    let pass = model.forward(&op, &ys).unwrap();
    let eval = model.loss(&pass, &xs, 0.01).unwrap();
    model.layer_mut(0).rho = 0.5;
    assert!(matches!(model.loss(&pass, &xs, 0.01), Err(Error::StaleTape { .. })));
    assert!(matches!(model.backward(&op, &pass, &eval), Err(Error::StaleTape { .. })));

    model.set_bits(Some(3)).unwrap();
    assert!(matches!(model.forward(&op, &ys), Err(Error::StaleQuantizedView)));
    refresh_quantized_views(&mut model).unwrap();
    model.forward(&op, &ys).unwrap();
    let mut p = model.flat_params();
    p[0] += 0.1;
    model.set_flat_params(&p).unwrap();
    assert!(matches!(model.forward(&op, &ys), Err(Error::StaleQuantizedView)));
}

#[test]
fn refresh_is_idempotent_and_conserves_shadows() {
    let mut model = toy_model(Variant::PanPlus, 3, 2, 4, 8, 51);
    let shadows = model.flat_params();
    refresh_quantized_views(&mut model).unwrap();
    for layer in model.layers() {
        for bank in &layer.banks {
            assert!(bank.view().is_none());
            assert!(std::ptr::eq(bank.effective(), bank.shadow()));
        }
    }
    model.set_bits(Some(3)).unwrap();
    refresh_quantized_views(&mut model).unwrap();
    let first = model.clone();
    refresh_quantized_views(&mut model).unwrap();
    assert_eq!(model.layers(), first.layers());
    assert_eq!(model.flat_params(), shadows);
    for layer in model.layers() {
        for bank in &layer.banks {
            let q = fit_and_quantize(bank.shadow(), 3).unwrap();
            assert_eq!(bank.effective(), &q.weights);
        }
    }
}

#[test]
fn projection_only_moves_violators() {
    let mut model = toy_model(Variant::PanPlus, 3, 2, 3, 6, 61);
    assert!(model.constraints_hold());
    assert_eq!(model.project_constraints(), 0);
    let groups = model.param_groups();
    let mut p = model.flat_params();
    let idx = |name: &str| groups.iter().find(|g| g.name == name).unwrap().range.start;
    p[idx("layer0.rho")] = -1.0;
    p[idx("layer0.lambda_mcp")] = 0.0;
    p[idx("layer1.gamma_mcp")] = 0.5;
    p[idx("layer1.a_scad")] = 2.0;
    p[idx("layer1.lambda_l1")] = 0.37;
    model.set_flat_params(&p).unwrap();
    assert!(!model.constraints_hold());
    assert_eq!(model.project_constraints(), 4);
    assert!(model.constraints_hold());
    let q = model.flat_params();
    assert_eq!(q[idx("layer0.rho")], PARAM_MARGIN);
    assert_eq!(q[idx("layer0.lambda_mcp")], PARAM_MARGIN);
    assert_eq!(q[idx("layer1.gamma_mcp")], 1.0 + PARAM_MARGIN);
    assert_eq!(q[idx("layer1.a_scad")], 2.0 + PARAM_MARGIN);
    for (i, (a, b)) in p.iter().zip(&q).enumerate() {
        if a != b {
            assert!(groups.iter().any(|g| g.range.start == i && g.range.len() == 1));
        }
    }
    assert_eq!(q[idx("layer1.lambda_l1")], 0.37);
}

#[test]
fn invalid_models_are_rejected() {
    let model = toy_model(Variant::Pan, 2, 1, 3, 6, 71);
    let mut layer = model.layers()[0].clone();
    layer.lambdas.push(0.1);
    let kinds = model.kinds().to_vec();
    let build = |layers: Vec<LayerParams>, kinds: Vec<PenaltyKind>| {
        NetworkModel::from_parts(Variant::Pan, kinds, MixtureWeights::uniform(2), (6, 6), None, layers)
    };
    assert!(build(vec![layer], kinds.clone()).is_err());
    assert!(build(vec![], kinds.clone()).is_err());
    assert!(build(model.layers().to_vec(), vec![PenaltyKind::L1, PenaltyKind::L1]).is_err());
    let mut bad = model.layers()[0].clone();
    bad.gamma_mcp = 1.0;
    assert!(build(vec![bad], kinds.clone()).is_err());
    assert!(NetworkModel::from_parts(
        Variant::PanPlus,
        kinds,
        MixtureWeights::uniform(2),
        (6, 6),
        None,
        model.layers().to_vec()
    )
    .is_err());
    let op = make_sensing(49, 0.5, 1).unwrap();
    assert!(model.forward(&op, &[Tensor::zeros(&[25])]).is_err());
}
