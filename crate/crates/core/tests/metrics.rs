mod common;

use common::naive_ssim;
use qpan_core::metrics::{psnr, ssim};
use qpan_core::synth::piecewise_smooth;
use rand::Rng;

#[test]
fn ssim_matches_direct_windowed_formula() {
    let mut rng = common::rng(11);
    let clean = piecewise_smooth(24, 29, &mut rng);
    let mut noisy = clean.clone();
    noisy.data_mut().iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
    let blurred = piecewise_smooth(24, 29, &mut rng).map(|v| 0.6 * v + 0.2);
    let inverted = clean.map(|v| 1.0 - v);
    for probe in [&noisy, &blurred, &inverted] {
        let fast = ssim(probe, &clean).unwrap();
        let slow = naive_ssim(probe.data(), clean.data(), 24, 29);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn psnr_of_uniform_offsets() {
    let mut rng = common::rng(12);
    let x = piecewise_smooth(16, 16, &mut rng).map(|v| 0.8 * v);
    for (d, db) in [(0.1, 20.0), (0.01, 40.0)] {
        assert!((psnr(&x.map(|v| v + d), &x, 1.0).unwrap() - db).abs() < 1e-9);
    }
}
