//! Process-wide counter of attention-generator and projection-head kernel
//! invocations. The inference path must never touch those kernels; tests
//! reset the counter, run an evaluation, and assert it stayed at zero.

use std::sync::atomic::{AtomicU64, Ordering};

static CLTD_OPS: AtomicU64 = AtomicU64::new(0);

/// Record one training-module kernel invocation.
#[inline]
pub fn record_cltd_op() {
    CLTD_OPS.fetch_add(1, Ordering::Relaxed);
}

pub fn cltd_op_count() -> u64 {
    CLTD_OPS.load(Ordering::Relaxed)
}

pub fn reset_cltd_op_count() {
    CLTD_OPS.store(0, Ordering::Relaxed);
}
