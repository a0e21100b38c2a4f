//! Process-wide runtime switches.
//!
//! Checked mode validates every op output for NaN/Inf and every domain
//! precondition (e.g. `log` of a non-positive value). Strict mode forbids
//! any kernel-level parallelism so reduction order is fixed.

use std::sync::atomic::{AtomicBool, Ordering};

static CHECKED: AtomicBool = AtomicBool::new(true);
static STRICT: AtomicBool = AtomicBool::new(false);

pub fn set_checked(on: bool) {
    CHECKED.store(on, Ordering::Relaxed);
}

pub fn checked() -> bool {
    CHECKED.load(Ordering::Relaxed)
}

pub fn set_strict(on: bool) {
    STRICT.store(on, Ordering::Relaxed);
}

pub fn strict() -> bool {
    STRICT.load(Ordering::Relaxed)
}

/// Caps the kernel worker pool. Ignored after the pool has been built.
pub fn init_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_ok()
}
