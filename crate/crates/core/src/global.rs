//! Process-global installation through Rust's `#[global_allocator]`.
//!
//! ```no_run
//! #[global_allocator]
//! static ALLOC: gwpasan::GuardedGlobalAlloc = gwpasan::GuardedGlobalAlloc::new();
//! ```
//!
//! The pool is created on the first allocation from the `GWPASAN_*`
//! environment variables (see [`config`](crate::config)). Allocations made
//! while it is being created, from any thread, go straight to the system
//! allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::shim::{Guardian, GuardianConfig};

const UNINIT: usize = 0;
const BUSY: usize = 1;
const OFF: usize = 2;

pub struct GuardedGlobalAlloc {
    state: AtomicUsize,
    configure: fn() -> Option<GuardianConfig>,
}

fn env_config() -> Option<GuardianConfig> {
    crate::config::from_env().ok()
}

impl GuardedGlobalAlloc {
    /// Configured from the environment on first use.
    pub const fn new() -> Self {
        Self::with_config(env_config)
    }

    /// Configured by `configure` on first use; `None` disables the tool.
    pub const fn with_config(configure: fn() -> Option<GuardianConfig>) -> Self {
        Self {
            state: AtomicUsize::new(UNINIT),
            configure,
        }
    }

    /// The active guardian, creating it if this is the first call.
    #[inline(always)]
    pub fn guardian(&self) -> Option<&Guardian> {
        match self.state.load(Ordering::Acquire) {
            UNINIT => self.init(),
            BUSY | OFF => None,
            // SAFETY: published once from a leaked box, never freed.
            p => Some(unsafe { &*(p as *const Guardian) }),
        }
    }

    #[cold]
    fn init(&self) -> Option<&Guardian> {
        if self
            .state
            .compare_exchange(UNINIT, BUSY, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return None;
        }
        let guardian = (self.configure)()
            .filter(GuardianConfig::enabled_for_process)
            .and_then(|c| Guardian::new(&c).ok());
        match guardian {
            Some(g) => {
                let p = Box::into_raw(g);
                self.state.store(p as usize, Ordering::Release);
                // SAFETY: just leaked.
                Some(unsafe { &*p })
            }
            None => {
                self.state.store(OFF, Ordering::Release);
                None
            }
        }
    }
}

impl Default for GuardedGlobalAlloc {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for GuardedGlobalAlloc {
    #[inline]
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if let Some(g) = self.guardian() {
            if g.want_to_sample() {
                if let Some(p) = g.alloc_sampled(layout.size(), layout.align()) {
                    return p.as_ptr();
                }
            }
        }
        System.alloc(layout)
    }

    #[inline]
    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        if let Some(g) = self.guardian() {
            if g.want_to_sample() {
                if let Some(p) = g.alloc_sampled(layout.size(), layout.align()) {
                    return p.as_ptr();
                }
            }
        }
        System.alloc_zeroed(layout)
    }

    #[inline]
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        if let Some(g) = self.guardian() {
            if g.owns(ptr as usize) {
                g.free_guarded(ptr as usize);
                return;
            }
        }
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if let Some(g) = self.guardian() {
            if g.owns(ptr as usize) {
                let new_layout = Layout::from_size_align_unchecked(new_size, layout.align());
                let new = self.alloc(new_layout);
                if !new.is_null() {
                    std::ptr::copy_nonoverlapping(ptr, new, layout.size().min(new_size));
                    g.free_guarded(ptr as usize);
                }
                return new;
            }
        }
        System.realloc(ptr, layout, new_size)
    }
}
