//! Thread-local multiply-accumulate counter.
//!
//! Every primitive that performs multiply-accumulates reports its count
//! here, so a forward pass can be measured against the closed-form
//! accountant. Conventions: matmul and linear count `m·k·n`, convolutions
//! count every filter tap including zero-padded ones, the window kernels
//! count all `k²` slots including masked ones. Bias adds, normalization and
//! activations are not MACs.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn get() -> u64 {
    MACS.with(|c| c.get())
}

/// Runs `f` and returns its result with the MACs it performed on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = get();
    let r = f();
    (r, get() - before)
}
