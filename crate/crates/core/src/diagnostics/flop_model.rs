//! Closed-form flop counts under the convention in [`crate::numerics::flops`].
//!
//! These are written out from the algorithms, not from the code, and are
//! compared against the instrumented counts in tests.

use crate::backbone::BackboneConfig;
use crate::moments::{closure_cost, Activation, Closure};
use crate::numerics::flops::SILU;

/// Deterministic backbone forward on `rows` states.
pub fn fm_forward(cfg: &BackboneConfig, rows: u64) -> u64 {
    let f = cfg.embed_freqs as u64;
    let mut total = 3 * f * rows;
    for l in 0..cfg.depth {
        let (i, o) = (cfg.layer_in(l) as u64, cfg.layer_out(l) as u64);
        total += 2 * rows * i * o; // product
        total += rows * o; // bias
        if l + 1 < cfg.depth {
            total += SILU * rows * o;
        }
    }
    total
}

/// Inference net on `rows` inputs of width `i`, `o` outputs.
pub fn inference_net(i: u64, width: u64, o: u64, rows: u64) -> u64 {
    2 * rows * i * width + rows * width + SILU * rows * width // hidden
        + 2 * rows * width * o + rows * o // output
        + 3 * rows * o // clamp and exp
}

/// Moment forward with learned scales on `rows` states, assuming every
/// hidden pre-activation variance is positive.
pub fn fmwc_forward(cfg: &BackboneConfig, inference_width: usize, closure: Closure, rows: u64) -> u64 {
    let f = cfg.embed_freqs as u64;
    let w = inference_width as u64;
    let mut total = 3 * f * rows;
    for l in 0..cfg.depth {
        let (i, o) = (cfg.layer_in(l) as u64, cfg.layer_out(l) as u64);
        let feat = cfg.feature_in(l) as u64;
        total += inference_net(i, w, o, rows);
        total += i * o; // squared weights, once per call
        total += 2 * rows * i * o + rows * o; // mean
        total += rows * i + 2 * rows * i * o + 3 * rows * o; // alpha^2 (mu^2 . W^2)
        if l > 0 {
            total += 2 * rows * feat * o + 4 * rows * o; // (1 + alpha^2)(var . W^2)
        }
        if l + 1 < cfg.depth {
            total += closure_cost(closure, Activation::SILU) * rows * o;
        }
    }
    total
}

/// Ratio of the per-state cost of the moment pass to the deterministic pass.
pub fn fmwc_over_fm(cfg: &BackboneConfig, inference_width: usize, closure: Closure, rows: u64) -> f64 {
    fmwc_forward(cfg, inference_width, closure, rows) as f64 / fm_forward(cfg, rows) as f64
}
