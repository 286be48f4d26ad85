//! Stack trace capture.
//!
//! Traces are collected by walking the frame-pointer chain, which needs no
//! heap, no locks and no unwind tables, so the same walker serves the
//! allocation slow path and the fault handler. Every frame record is checked
//! for readability before it is dereferenced: the walker keeps a per-thread
//! high-water mark of stack pages already proven readable and probes new
//! pages through [`platform::is_readable`]. Code built without frame
//! pointers yields short traces, never a crash.

use std::cell::Cell;

use arrayvec::ArrayVec;

use crate::platform;

/// Upper bound on the depth of any recorded trace.
pub const MAX_FRAMES: usize = 64;

/// Return addresses, innermost first.
pub type StackTrace = ArrayVec<usize, MAX_FRAMES>;

const WORD: usize = std::mem::size_of::<usize>();

// Pages past this many above the walker's own stack pointer are not probed.
const MAX_STACK_SPAN: usize = 64 << 20;

thread_local! {
    static VERIFIED_STACK_TOP: Cell<usize> = const { Cell::new(0) };
}

#[inline(always)]
pub(crate) fn frame_pointer() -> usize {
    let fp: usize;
    #[cfg(target_arch = "x86_64")]
    // SAFETY: reads a register.
    unsafe {
        std::arch::asm!("mov {}, rbp", out(reg) fp, options(nomem, nostack, preserves_flags));
    }
    #[cfg(target_arch = "aarch64")]
    // SAFETY: reads a register.
    unsafe {
        std::arch::asm!("mov {}, x29", out(reg) fp, options(nomem, nostack, preserves_flags));
    }
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    {
        fp = 0;
    }
    fp
}

#[inline(always)]
fn stack_pointer() -> usize {
    let sp: usize;
    #[cfg(target_arch = "x86_64")]
    // SAFETY: reads a register.
    unsafe {
        std::arch::asm!("mov {}, rsp", out(reg) sp, options(nomem, nostack, preserves_flags));
    }
    #[cfg(target_arch = "aarch64")]
    // SAFETY: reads a register.
    unsafe {
        std::arch::asm!("mov {}, sp", out(reg) sp, options(nomem, nostack, preserves_flags));
    }
    #[cfg(not(any(target_arch = "x86_64", target_arch = "aarch64")))]
    {
        let marker = 0u8;
        sp = &marker as *const u8 as usize;
    }
    sp
}

/// Captures up to `max_frames` return addresses of the current call stack.
/// The first frame is the caller of `capture_trace`.
#[inline(never)]
pub fn capture_trace(max_frames: usize) -> StackTrace {
    platform::init_probe();
    let mut out = StackTrace::new();
    walk(frame_pointer(), max_frames, &mut out);
    out
}

/// Walks from an explicit frame record: the first frame reported is the
/// return address stored in the record at `fp`.
pub fn capture_from_frame(fp: usize, max_frames: usize) -> StackTrace {
    let mut out = StackTrace::new();
    walk(fp, max_frames, &mut out);
    out
}

/// Trace of an interrupted context: `pc` first, then the callers found
/// through the context's frame pointer. `sp` is the context's stack pointer
/// and bounds the walk from below; 0 means the caller's own stack.
/// Async-signal-safe.
pub fn capture_from_context(pc: usize, fp: usize, sp: usize, max_frames: usize) -> StackTrace {
    let mut out = StackTrace::new();
    if max_frames == 0 {
        return out;
    }
    if pc != 0 {
        out.push(pc);
    }
    walk_above(fp, if sp == 0 { stack_pointer() } else { sp }, max_frames, &mut out);
    out
}

fn walk(fp: usize, max_frames: usize, out: &mut StackTrace) {
    walk_above(fp, stack_pointer(), max_frames, out)
}

fn walk_above(mut fp: usize, low: usize, max_frames: usize, out: &mut StackTrace) {
    let max_frames = max_frames.min(MAX_FRAMES);
    if out.len() >= max_frames {
        return;
    }
    let page = platform::page_size();
    let own_page_end = (low & !(page - 1)) + page;
    let mut top = VERIFIED_STACK_TOP.with(Cell::get);
    if top < own_page_end {
        top = own_page_end;
    }

    while out.len() < max_frames {
        if fp < low || fp % WORD != 0 {
            break;
        }
        let Some(record_end) = fp.checked_add(2 * WORD) else {
            break;
        };
        while record_end > top {
            if top - low > MAX_STACK_SPAN || !platform::is_readable(top) {
                break;
            }
            top += page;
        }
        if record_end > top {
            break;
        }
        // SAFETY: [fp, fp + 2 words) lies in verified-readable stack pages.
        let (next, ret) = unsafe { (*(fp as *const usize), *((fp + WORD) as *const usize)) };
        if ret == 0 {
            break;
        }
        out.push(ret);
        if next <= fp {
            break;
        }
        fp = next;
    }
    VERIFIED_STACK_TOP.with(|c| c.set(top));
}
