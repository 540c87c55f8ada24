//! Worker-pool configuration.
//!
//! All parallel loops in this crate write disjoint output rows and perform
//! no cross-worker floating-point reductions, so results are identical for
//! any worker count.

use std::sync::OnceLock;

static CONFIGURED: OnceLock<usize> = OnceLock::new();

/// Cap the rayon worker count. First call wins; later calls are ignored
/// (the global pool can only be built once per process).
pub fn configure_threads(n: usize) {
    let n = n.max(1);
    if CONFIGURED.set(n).is_ok() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Apply the `RHT_THREADS` environment variable if set and parseable.
pub fn configure_from_env() {
    if let Ok(v) = std::env::var("RHT_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            configure_threads(n);
        }
    }
}
