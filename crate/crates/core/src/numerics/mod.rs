//! Dense linear algebra, random streams, quadrature and optimization.

pub mod adam;
pub mod flops;
pub mod matrix;
pub mod quadrature;
pub mod rng;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use matrix::{gemm, matmul, MatRef, Matrix};
pub use quadrature::{gh_expectation, GaussHermiteRule};
pub use rng::RngStream;

/// SiLU activation `z * sigmoid(z)`.
#[inline]
pub fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// First derivative of SiLU.
#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s + z * s * (1.0 - s)
}

/// Second derivative of SiLU.
#[inline]
pub fn silu_second(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
}
