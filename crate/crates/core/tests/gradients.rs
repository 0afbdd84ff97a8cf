//! Reverse-mode gradients against central finite differences.

use fmwc::backbone::{BackboneConfig, DropoutMasks, MlpBackbone, ParamSet};
use fmwc::evalbench::CheckerboardSpec;
use fmwc::numerics::RngStream;
use fmwc::training::{elbo_loss, Batch, BatchNoise};
use fmwc::vad::VadPosterior;

fn small() -> BackboneConfig {
    BackboneConfig {
        data_dim: 2,
        hidden: 7,
        depth: 3,
        embed_freqs: 3,
    }
}

#[derive(Clone, Copy)]
enum Noise {
    None,
    Weights,
    Dropout,
}

fn noise_for(p: &VadPosterior, kind: Noise, rows: usize) -> BatchNoise {
    let mut rng = RngStream::new(11, "noise");
    match kind {
        Noise::None => BatchNoise::None,
        Noise::Weights => BatchNoise::Weights(p.draw_noise_block(rows, &mut rng)),
        Noise::Dropout => BatchNoise::Dropout(DropoutMasks::draw_block(p.config(), 0.3, rows, &mut rng)),
    }
}

/// Largest relative error over a spread of coordinates of every array.
fn check(mut p: VadPosterior, kind: Noise, beta: f64) -> f64 {
    let rows = 9;
    let batch = Batch::draw(rows, &CheckerboardSpec::default(), &mut RngStream::new(5, "batch")).unwrap();
    let norm = 13.0;
    let (_, grad) = elbo_loss(&p, &batch, beta, noise_for(&p, kind, rows), norm).unwrap();
    let analytic: Vec<Vec<f64>> = grad.slices().iter().map(|s| s.to_vec()).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (a, g) in analytic.iter().enumerate() {
        let step = (g.len() / 5).max(1);
        for i in (0..g.len()).step_by(step) {
            let orig = p.param_slices_mut()[a][i];
            p.param_slices_mut()[a][i] = orig + h;
            let up = elbo_loss(&p, &batch, beta, noise_for(&p, kind, rows), norm)
                .unwrap()
                .0
                .loss;
            p.param_slices_mut()[a][i] = orig - h;
            let dn = elbo_loss(&p, &batch, beta, noise_for(&p, kind, rows), norm)
                .unwrap()
                .0
                .loss;
            p.param_slices_mut()[a][i] = orig;
            let fd = (up - dn) / (2.0 * h);
            // absolute floor for entries where central differences lose digits
            let err = (fd - g[i]).abs() / (1e-4 + fd.abs().max(g[i].abs()));
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn deterministic_backbone_gradient_matches_finite_differences() {
    let net = MlpBackbone::new(small(), &mut RngStream::new(1, "init")).unwrap();
    let p = VadPosterior::deterministic(net, 0.3).unwrap();
    assert!(check(p, Noise::None, 0.0) < 1e-5);
}

#[test]
fn dropout_gradient_matches_finite_differences() {
    let net = MlpBackbone::new(small(), &mut RngStream::new(2, "init")).unwrap();
    let p = VadPosterior::deterministic(net, 0.3).unwrap();
    assert!(check(p, Noise::Dropout, 0.0) < 1e-5);
}

#[test]
fn objective_gradient_with_frozen_noise_matches_finite_differences() {
    let p = VadPosterior::init(small(), 5, (0.3f64 / 0.7).ln(), 0.3, &mut RngStream::new(3, "init")).unwrap();
    assert!(check(p.clone(), Noise::Weights, 0.0) < 1e-5);
    assert!(check(p, Noise::Weights, 0.7) < 1e-5);
}
