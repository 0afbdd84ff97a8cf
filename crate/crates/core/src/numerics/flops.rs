//! Floating-point operation accounting.
//!
//! Every numerical kernel in the crate charges its cost to a thread-local
//! meter. Chunked batch loops hand their workers' counts back to the calling
//! thread, so measuring a call sees every operation it performs.
//!
//! Counting convention (applies to both the instrumented kernels and the
//! closed-form models in [`crate::diagnostics::flop_model`]):
//!
//! - a matrix product `(m x k) * (k x n)` costs `2 m k n`;
//! - every scalar add, multiply, divide, `exp`, `sqrt` or `max` costs 1;
//! - `sin`/`cos` pairs in the time embedding cost 3 per frequency;
//! - copies and concatenations are free.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub fn charge(n: u64) {
    FLOPS.with(|f| f.set(f.get().wrapping_add(n)));
}

pub fn read() -> u64 {
    FLOPS.with(|f| f.get())
}

/// Runs `f` and returns its result with the number of flops it charged on
/// this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = read();
    let out = f();
    (out, read().wrapping_sub(start))
}

/// Cost of the SiLU activation `z / (1 + exp(-z))` per element
/// (negate, exp, add, divide).
pub const SILU: u64 = 4;

/// Cost of SiLU together with its derivative, given a shared sigmoid.
pub const SILU_WITH_GRAD: u64 = 8;
