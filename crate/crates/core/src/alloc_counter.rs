//! Allocation counting for zero-allocation assertions.
//!
//! Install [`CountingAlloc`] as the global allocator in a test or binary, then wrap
//! the code under test in [`count`]:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: stageserve::alloc_counter::CountingAlloc = stageserve::alloc_counter::CountingAlloc;
//!
//! let (_, allocs) = stageserve::alloc_counter::count(|| hot_path());
//! assert_eq!(allocs, 0);
//! ```
//!
//! Counts are per thread, so work on other threads does not leak into a measurement.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

thread_local! {
    static ALLOCS: Cell<u64> = const { Cell::new(0) };
}

static INSTALLED: AtomicBool = AtomicBool::new(false);

pub struct CountingAlloc;

fn bump() {
    // try_with: the slot may already be gone during thread teardown.
    let _ = ALLOCS.try_with(|c| c.set(c.get() + 1));
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if !INSTALLED.load(Ordering::Relaxed) {
            INSTALLED.store(true, Ordering::Relaxed);
        }
        bump();
        unsafe { System.alloc(layout) }
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        bump();
        unsafe { System.alloc_zeroed(layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        bump();
        unsafe { System.realloc(ptr, layout, new_size) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }
}

/// Whether [`CountingAlloc`] has served any allocation, i.e. is the global allocator.
pub fn installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Allocations (including reallocations) made by the current thread so far.
pub fn thread_allocations() -> u64 {
    ALLOCS.with(|c| c.get())
}

/// Runs `f` and returns its result with the number of allocations it made on this thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = thread_allocations();
    let r = f();
    (r, thread_allocations() - before)
}
