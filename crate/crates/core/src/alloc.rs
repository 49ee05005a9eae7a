//! Allocation accounting for optimizer steps.
//!
//! [`CountingAlloc`] wraps the system allocator and keeps per-thread byte
//! counters. Binaries and test targets opt in with
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: zo_forge_core::alloc::CountingAlloc = zo_forge_core::alloc::CountingAlloc;
//! ```
//!
//! When it is not installed, [`observer`] reports inactive and ledgers
//! record no measurement; callers then fall back to structural checks.
//! Counters are thread-local so concurrent test threads do not interfere.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

static INSTALLED: AtomicBool = AtomicBool::new(false);

thread_local! {
    static CURRENT: Cell<isize> = const { Cell::new(0) };
    static PEAK: Cell<isize> = const { Cell::new(0) };
    static PAUSED: Cell<u32> = const { Cell::new(0) };
}

/// System allocator with per-thread live/peak byte counters.
pub struct CountingAlloc;

#[inline]
fn record(delta: isize) {
    INSTALLED.store(true, Ordering::Relaxed);
    let _ = PAUSED.try_with(|paused| {
        if paused.get() > 0 {
            return;
        }
        let _ = CURRENT.try_with(|cur| {
            let now = cur.get() + delta;
            cur.set(now);
            let _ = PEAK.try_with(|peak| {
                if now > peak.get() {
                    peak.set(now);
                }
            });
        });
    });
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc(layout);
        if !ptr.is_null() {
            record(layout.size() as isize);
        }
        ptr
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let ptr = System.alloc_zeroed(layout);
        if !ptr.is_null() {
            record(layout.size() as isize);
        }
        ptr
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        record(-(layout.size() as isize));
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let new = System.realloc(ptr, layout, new_size);
        if !new.is_null() {
            record(new_size as isize - layout.size() as isize);
        }
        new
    }
}

/// Read side of an allocation counter.
pub trait AllocationObserver {
    /// Whether counts reflect real allocations.
    fn is_active(&self) -> bool;
    fn current_bytes(&self) -> isize;
    fn peak_bytes(&self) -> isize;
    /// Lower the peak watermark to the current live count.
    fn reset_peak(&self);
}

/// Observer backed by [`CountingAlloc`]'s thread-local counters.
#[derive(Debug, Clone, Copy, Default)]
pub struct ThreadCounters;

impl AllocationObserver for ThreadCounters {
    fn is_active(&self) -> bool {
        INSTALLED.load(Ordering::Relaxed)
    }

    fn current_bytes(&self) -> isize {
        CURRENT.with(Cell::get)
    }

    fn peak_bytes(&self) -> isize {
        PEAK.with(Cell::get)
    }

    fn reset_peak(&self) {
        let now = CURRENT.with(Cell::get);
        PEAK.with(|p| p.set(now));
    }
}

pub fn observer() -> ThreadCounters {
    ThreadCounters
}

/// Run `f` with this thread's allocations excluded from the counters.
///
/// The optimizer wraps loss evaluations in this: forward-pass scratch memory
/// belongs to the model, not to the optimizer.
pub fn untracked<R>(f: impl FnOnce() -> R) -> R {
    struct Resume;
    impl Drop for Resume {
        fn drop(&mut self) {
            PAUSED.with(|p| p.set(p.get() - 1));
        }
    }
    PAUSED.with(|p| p.set(p.get() + 1));
    let _resume = Resume;
    f()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LedgerState {
    Idle,
    Armed,
    Closed,
}

/// Byte marks bracketing one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationLedger {
    pub bytes_at_step_start: isize,
    pub peak_bytes_during_step: isize,
    state: LedgerState,
    active: bool,
}

impl Default for AllocationLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl AllocationLedger {
    pub fn new() -> Self {
        Self {
            bytes_at_step_start: 0,
            peak_bytes_during_step: 0,
            state: LedgerState::Idle,
            active: false,
        }
    }

    pub fn mark_start(&mut self, obs: &impl AllocationObserver) {
        obs.reset_peak();
        self.bytes_at_step_start = obs.current_bytes();
        self.peak_bytes_during_step = self.bytes_at_step_start;
        self.active = obs.is_active();
        self.state = LedgerState::Armed;
    }

    pub fn mark_end(&mut self, obs: &impl AllocationObserver) -> Result<()> {
        if self.state != LedgerState::Armed {
            return Err(Error::Usage("ledger closed without being armed".into()));
        }
        self.peak_bytes_during_step = obs.peak_bytes().max(self.bytes_at_step_start);
        self.state = LedgerState::Closed;
        Ok(())
    }

    /// Whether an allocation observer was live while the ledger was armed.
    pub fn is_measured(&self) -> bool {
        self.active
    }
}

/// Peak bytes above the step's starting live count.
pub fn step_allocation_delta(ledger: &AllocationLedger) -> Result<usize> {
    match ledger.state {
        LedgerState::Closed => {
            Ok((ledger.peak_bytes_during_step - ledger.bytes_at_step_start).max(0) as usize)
        }
        LedgerState::Idle => Err(Error::Usage("allocation ledger was never armed".into())),
        LedgerState::Armed => Err(Error::Usage("allocation ledger still open".into())),
    }
}
