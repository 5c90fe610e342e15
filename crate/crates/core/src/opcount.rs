//! Per-thread tally of arithmetic work done by the network primitives: tape
//! operations report their flop cost and native matrix-vector products their
//! multiply-adds.

use std::cell::Cell;

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    OPS.with(|c| c.set(c.get().wrapping_add(n)));
}

/// Operations counted on this thread so far.
pub fn read() -> u64 {
    OPS.with(Cell::get)
}

/// Runs `f` and returns its result with the operations it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let start = read();
    let out = f();
    (out, read().wrapping_sub(start))
}
