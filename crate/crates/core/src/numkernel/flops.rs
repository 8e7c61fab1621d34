//! Per-thread counter of floating-point work done by forward matrix products.
//!
//! Each forward `m×k · k×n` product adds `2·m·n·k` (one multiply-accumulate
//! counts as two operations). Backward products are not counted.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn record(m: usize, k: usize, n: usize) {
    COUNTER.with(|c| c.set(c.get() + 2 * (m as u64) * (k as u64) * (n as u64)));
}

pub fn reset() {
    COUNTER.with(|c| c.set(0));
}

pub fn read() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result with the matmul FLOPs it executed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read() - before)
}
