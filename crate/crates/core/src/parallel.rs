//! Process-wide switch between row-parallel and single-threaded kernels.
//!
//! Every parallel kernel in the crate partitions work by output row and runs
//! the same sequential arithmetic per row, so both modes produce identical
//! bits; deterministic mode only pins execution to the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};

static DETERMINISTIC: AtomicBool = AtomicBool::new(false);

pub fn set_deterministic(on: bool) {
    DETERMINISTIC.store(on, Ordering::Relaxed);
}

pub fn is_deterministic() -> bool {
    DETERMINISTIC.load(Ordering::Relaxed)
}

/// Work (in scalar multiply-adds) below which kernels stay serial.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

pub(crate) fn use_parallel(work: usize) -> bool {
    work >= PAR_THRESHOLD && !is_deterministic()
}
