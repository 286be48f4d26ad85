//! Thin wrappers over the POSIX virtual-memory and thread primitives the
//! pool and the fault handler rely on.

use std::cell::Cell;
use std::io;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicI32, AtomicUsize, Ordering};
use std::sync::Once;

static PAGE_SIZE: AtomicUsize = AtomicUsize::new(0);

/// The platform page size, queried once.
pub fn page_size() -> usize {
    let cached = PAGE_SIZE.load(Ordering::Relaxed);
    if cached != 0 {
        return cached;
    }
    // SAFETY: sysconf has no preconditions.
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    let size = if size > 0 { size as usize } else { 4096 };
    PAGE_SIZE.store(size, Ordering::Relaxed);
    size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protection {
    None,
    ReadWrite,
}

impl Protection {
    fn bits(self) -> libc::c_int {
        match self {
            Protection::None => libc::PROT_NONE,
            Protection::ReadWrite => libc::PROT_READ | libc::PROT_WRITE,
        }
    }
}

/// Reserves `len` bytes of anonymous, inaccessible address space.
pub fn reserve(len: usize) -> io::Result<NonNull<u8>> {
    // SAFETY: anonymous private mapping with no fixed address.
    let ptr = unsafe {
        libc::mmap(
            std::ptr::null_mut(),
            len,
            libc::PROT_NONE,
            libc::MAP_PRIVATE | libc::MAP_ANON | libc::MAP_NORESERVE,
            -1,
            0,
        )
    };
    if ptr == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(NonNull::new(ptr.cast()).expect("mmap returned null"))
}

/// Releases a reservation made by [`reserve`].
///
/// # Safety
/// `base..base+len` must be a live reservation that nothing references.
pub unsafe fn unreserve(base: NonNull<u8>, len: usize) {
    libc::munmap(base.as_ptr().cast(), len);
}

/// Changes the protection of whole pages. Async-signal-safe.
///
/// # Safety
/// The range must lie inside a reservation owned by the caller.
pub unsafe fn protect(addr: usize, len: usize, prot: Protection) -> io::Result<()> {
    if libc::mprotect(addr as *mut libc::c_void, len, prot.bits()) != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Keeps a range out of core dumps. On Linux this also gives the range a
/// VMA flag its neighbours lack, so later protection changes next to it
/// neither split nor merge mappings, which roughly halves their cost.
///
/// # Safety
/// The range must lie inside a reservation owned by the caller.
pub unsafe fn exclude_from_dumps(addr: usize, len: usize) -> bool {
    #[cfg(target_os = "linux")]
    {
        libc::madvise(addr as *mut libc::c_void, len, libc::MADV_DONTDUMP) == 0
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = (addr, len);
        false
    }
}

/// Drops the physical backing of a range so the next touch observes zeroes.
/// Returns false where the platform gives no zero-fill guarantee.
///
/// # Safety
/// The range must lie inside a reservation owned by the caller.
pub unsafe fn discard(addr: usize, len: usize) -> bool {
    #[cfg(target_os = "linux")]
    {
        libc::madvise(addr as *mut libc::c_void, len, libc::MADV_DONTNEED) == 0
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = (addr, len);
        false
    }
}

thread_local! {
    static THREAD_ID: Cell<u64> = const { Cell::new(0) };
}

static ATFORK: Once = Once::new();

extern "C" fn forget_thread_id() {
    THREAD_ID.set(0);
}

/// Kernel thread id of the caller, cached per thread. Not for signal
/// handlers; see [`thread_id_in_handler`].
pub fn thread_id() -> u64 {
    let cached = THREAD_ID.get();
    if cached != 0 {
        return cached;
    }
    let id = raw_thread_id();
    // The child of a fork starts with the parent's cache; clear it there.
    ATFORK.call_once(|| {
        // SAFETY: registers a plain extern "C" function.
        unsafe { libc::pthread_atfork(None, None, Some(forget_thread_id)) };
    });
    THREAD_ID.set(id);
    id
}

/// Async-signal-safe variant of [`thread_id`]: uses the cache when it is
/// filled and asks the kernel otherwise.
pub fn thread_id_in_handler() -> u64 {
    match THREAD_ID.get() {
        0 => raw_thread_id(),
        id => id,
    }
}

fn raw_thread_id() -> u64 {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: gettid cannot fail.
        unsafe { libc::syscall(libc::SYS_gettid) as u64 }
    }
    #[cfg(not(target_os = "linux"))]
    {
        // SAFETY: pthread_self cannot fail.
        unsafe { libc::pthread_self() as usize as u64 }
    }
}

pub fn process_id() -> u32 {
    std::process::id()
}

static PROBE_PIPE: [AtomicI32; 2] = [AtomicI32::new(-1), AtomicI32::new(-1)];
static PROBE_INIT: Once = Once::new();

/// Opens the descriptor pair used by [`is_readable`]. Must run outside any
/// signal handler before the first probe; later calls are no-ops.
pub fn init_probe() {
    PROBE_INIT.call_once(|| {
        let mut fds = [-1; 2];
        // SAFETY: fds is a valid two-element array.
        if unsafe { libc::pipe(fds.as_mut_ptr()) } != 0 {
            return;
        }
        for fd in fds {
            // SAFETY: fd was just returned by pipe.
            unsafe {
                let flags = libc::fcntl(fd, libc::F_GETFL);
                libc::fcntl(fd, libc::F_SETFL, flags | libc::O_NONBLOCK);
                libc::fcntl(fd, libc::F_SETFD, libc::FD_CLOEXEC);
            }
        }
        PROBE_PIPE[0].store(fds[0], Ordering::Release);
        PROBE_PIPE[1].store(fds[1], Ordering::Release);
    });
}

/// Reports whether the byte at `addr` can be read, without touching it from
/// user space: the kernel copies it into a pipe and fails with `EFAULT` when
/// the page is unmapped or protected. Async-signal-safe.
pub fn is_readable(addr: usize) -> bool {
    let write_fd = PROBE_PIPE[1].load(Ordering::Acquire);
    let read_fd = PROBE_PIPE[0].load(Ordering::Acquire);
    if write_fd < 0 || read_fd < 0 {
        return false;
    }
    // SAFETY: the kernel validates `addr`; nothing is dereferenced here.
    let wrote = unsafe { libc::write(write_fd, addr as *const libc::c_void, 1) };
    if wrote != 1 {
        return false;
    }
    let mut sink = 0u8;
    // SAFETY: reading one byte into a local.
    unsafe { libc::read(read_fd, (&mut sink as *mut u8).cast(), 1) };
    true
}
