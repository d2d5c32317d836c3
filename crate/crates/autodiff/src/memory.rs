//! Tensor byte counters.
//!
//! Every [`Tensor`](crate::Tensor) buffer registers its size on creation and
//! unregisters on drop. Counters are thread-local, so one run measured on one
//! thread is unaffected by work on other threads.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: usize) {
    let _ = LIVE.try_with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        let _ = PEAK.try_with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn on_free(bytes: usize) {
    let _ = LIVE.try_with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Bytes currently held by tensors created on this thread.
pub fn live_bytes() -> usize {
    LIVE.try_with(Cell::get).unwrap_or(0)
}

/// High-water mark of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.try_with(Cell::get).unwrap_or(0)
}

pub fn reset_peak() {
    let live = live_bytes();
    let _ = PEAK.try_with(|peak| peak.set(live));
}
