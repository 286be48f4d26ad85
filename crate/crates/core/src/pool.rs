//! The guarded pool: one reservation of `2N + 1` pages in which every odd
//! page is an allocation slot and every even page is a permanent guard.
//!
//! ```text
//! | guard 0 | slot 0 | guard 1 | slot 1 | ... | slot N-1 | guard N |
//! ```
//!
//! Slot state lives in atomics so that [`GuardedPool::classify_address`]
//! and [`GuardedPool::slot_record`] can run inside a fault handler without
//! the pool lock; every other mutation happens under that lock.

use std::collections::VecDeque;
use std::fmt;
use std::io;
use std::ptr::NonNull;
use std::sync::atomic::{fence, AtomicBool, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::metadata::MetadataHandle;
use crate::platform::{self, Protection};
use crate::rng::XorShift64Star;

/// Alignment every right-aligned allocation honors by default, matching the
/// usual `malloc` guarantee.
pub const DEFAULT_MIN_ALIGNMENT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentPolicy {
    /// Pick a side uniformly for every allocation.
    Random,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSide {
    /// Allocation starts at the slot start; underflows hit the left guard.
    Left,
    /// Allocation ends as close to the slot end as alignment permits.
    Right,
}

#[derive(Debug, Clone)]
pub struct PoolConfig {
    pub slot_count: usize,
    /// `None` queries the platform.
    pub page_size: Option<usize>,
    pub max_simultaneous_allocations: usize,
    pub quarantine_min_slots: usize,
    pub alignment: AlignmentPolicy,
    pub min_alignment: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            slot_count: 16,
            page_size: None,
            max_simultaneous_allocations: 16,
            quarantine_min_slots: 0,
            alignment: AlignmentPolicy::Random,
            min_alignment: DEFAULT_MIN_ALIGNMENT,
            seed: 0x5eed,
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), PoolError> {
        let page = self.page_size.unwrap_or_else(platform::page_size);
        if self.slot_count == 0 {
            return Err(PoolError::InvalidConfig("slot_count must be positive".into()));
        }
        if self.slot_count > u32::MAX as usize / 2 {
            return Err(PoolError::InvalidConfig("slot_count too large".into()));
        }
        if self.max_simultaneous_allocations == 0
            || self.max_simultaneous_allocations > self.slot_count
        {
            return Err(PoolError::InvalidConfig(format!(
                "max_simultaneous_allocations must be in 1..={}",
                self.slot_count
            )));
        }
        if !page.is_power_of_two() || page % platform::page_size() != 0 {
            return Err(PoolError::InvalidConfig(format!(
                "page size {page} is not a power-of-two multiple of the platform page"
            )));
        }
        if !self.min_alignment.is_power_of_two() || self.min_alignment > page {
            return Err(PoolError::InvalidConfig(format!(
                "min_alignment {} must be a power of two no larger than a page",
                self.min_alignment
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("invalid pool configuration: {0}")]
    InvalidConfig(String),
    #[error("could not reserve the guarded pool: {0}")]
    Unavailable(#[source] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SlotState {
    Free = 0,
    Allocated = 1,
    Quarantined = 2,
}

impl SlotState {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => SlotState::Allocated,
            2 => SlotState::Quarantined,
            _ => SlotState::Free,
        }
    }
}

/// Consistent copy of one slot's state and geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRecord {
    pub state: SlotState,
    pub user_offset: usize,
    pub user_size: usize,
    pub alignment_side: AlignmentSide,
    pub metadata: Option<MetadataHandle>,
}

/// Result of locating an address in the pool's geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddressClass {
    /// Guard page immediately below the slot.
    LeftGuardOf(usize),
    /// Guard page immediately above the slot.
    RightGuardOf(usize),
    QuarantinedSlot(usize),
    AllocatedSlot(usize),
    /// A slot page that has never held an allocation.
    FreeSlot(usize),
    /// Guard page whose neighbors are both free; carries the guard index.
    UnattributedGuard(usize),
    NotOurs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unavailable {
    /// Size zero, larger than a page, or an unsupported alignment.
    Unsupported,
    AtCapacity,
    Exhausted,
    /// Every candidate slot is still inside its quarantine window.
    Quarantined,
    ProtectFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquired {
    Slot { index: usize, address: NonNull<u8> },
    Unavailable(Unavailable),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolStats {
    pub acquisitions: u64,
    pub releases: u64,
    pub unsupported: u64,
    pub at_capacity: u64,
    pub exhausted: u64,
    pub quarantine_deferrals: u64,
    pub protect_failures: u64,
}

#[derive(Default)]
struct Counters {
    unsupported: AtomicU64,
    at_capacity: AtomicU64,
    exhausted: AtomicU64,
    quarantine_deferrals: AtomicU64,
    protect_failures: AtomicU64,
}

const NO_METADATA: u32 = u32::MAX;

struct SlotCell {
    seq: AtomicU64,
    state: AtomicU8,
    side: AtomicU8,
    user_offset: AtomicUsize,
    user_size: AtomicUsize,
    meta_index: AtomicU32,
    meta_seq: AtomicU64,
    /// Set when recovery made the quarantined page writable again.
    dirty: AtomicBool,
}

impl SlotCell {
    fn new() -> Self {
        Self {
            seq: AtomicU64::new(0),
            state: AtomicU8::new(SlotState::Free as u8),
            side: AtomicU8::new(0),
            user_offset: AtomicUsize::new(0),
            user_size: AtomicUsize::new(0),
            meta_index: AtomicU32::new(NO_METADATA),
            meta_seq: AtomicU64::new(0),
            dirty: AtomicBool::new(false),
        }
    }

    fn write(&self, f: impl FnOnce(&Self)) {
        let s = self.seq.load(Ordering::Relaxed);
        self.seq.store(s.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
        f(self);
        self.seq.store(s.wrapping_add(2), Ordering::Release);
    }
}

struct PoolState {
    free: VecDeque<u32>,
    live: usize,
    acquisitions: u64,
    releases: u64,
    /// Acquisition count at the time each slot was last released.
    released_at: Vec<Option<u64>>,
    rng: XorShift64Star,
}

pub struct GuardedPool {
    base: NonNull<u8>,
    region_len: usize,
    page: usize,
    config: PoolConfig,
    slots: Box<[SlotCell]>,
    state: Mutex<PoolState>,
    counters: Counters,
}

// SAFETY: the raw base pointer names a reservation owned by the pool; all
// shared mutable state is atomic or behind the mutex.
unsafe impl Send for GuardedPool {}
unsafe impl Sync for GuardedPool {}

impl fmt::Debug for GuardedPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuardedPool")
            .field("base", &self.base)
            .field("region_len", &self.region_len)
            .field("slots", &self.slots.len())
            .finish()
    }
}

impl GuardedPool {
    /// Reserves the region; every page starts inaccessible and every slot
    /// free, queued in a seeded random order.
    pub fn new(config: PoolConfig) -> Result<Self, PoolError> {
        config.validate()?;
        let page = config.page_size.unwrap_or_else(platform::page_size);
        let n = config.slot_count;
        let region_len = (2 * n + 1)
            .checked_mul(page)
            .ok_or_else(|| PoolError::InvalidConfig("pool size overflows".into()))?;
        let base = platform::reserve(region_len).map_err(PoolError::Unavailable)?;
        for guard in 0..=n {
            // Best effort; only the cost of slot protection changes depends on it.
            // SAFETY: each guard page lies inside the reservation.
            unsafe { platform::exclude_from_dumps(base.as_ptr() as usize + 2 * guard * page, page) };
        }

        let mut rng = XorShift64Star::new(config.seed);
        let mut order: Vec<u32> = (0..n as u32).collect();
        for i in (1..order.len()).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }

        Ok(Self {
            base,
            region_len,
            page,
            slots: (0..n).map(|_| SlotCell::new()).collect(),
            state: Mutex::new(PoolState {
                free: order.into(),
                live: 0,
                acquisitions: 0,
                releases: 0,
                released_at: vec![None; n],
                rng,
            }),
            config,
            counters: Counters::default(),
        })
    }

    pub fn base(&self) -> usize {
        self.base.as_ptr() as usize
    }

    pub fn region_len(&self) -> usize {
        self.region_len
    }

    pub fn page_size(&self) -> usize {
        self.page
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    /// Half-open range test; never dereferences `addr`.
    #[inline(always)]
    pub fn contains(&self, addr: usize) -> bool {
        addr.wrapping_sub(self.base()) < self.region_len
    }

    pub fn slot_start(&self, slot: usize) -> usize {
        self.base() + (2 * slot + 1) * self.page
    }

    pub fn guard_start(&self, guard: usize) -> usize {
        self.base() + 2 * guard * self.page
    }

    /// The slot page containing `addr`, if any.
    pub fn slot_of(&self, addr: usize) -> Option<usize> {
        if !self.contains(addr) {
            return None;
        }
        let page_index = (addr - self.base()) / self.page;
        (page_index % 2 == 1).then_some(page_index / 2)
    }

    pub fn lock(&self) -> PoolGuard<'_> {
        PoolGuard {
            pool: self,
            state: self.state.lock().unwrap_or_else(|e| e.into_inner()),
        }
    }

    /// Locks the pool for one acquisition.
    pub fn slot_acquire(&self, size: usize, alignment: usize) -> Acquired {
        self.lock().acquire(size, alignment)
    }

    /// Locks the pool for one release. `slot` must be allocated.
    pub fn slot_release(&self, slot: usize) {
        self.lock().release(slot)
    }

    pub fn stats(&self) -> PoolStats {
        let state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        PoolStats {
            acquisitions: state.acquisitions,
            releases: state.releases,
            unsupported: self.counters.unsupported.load(Ordering::Relaxed),
            at_capacity: self.counters.at_capacity.load(Ordering::Relaxed),
            exhausted: self.counters.exhausted.load(Ordering::Relaxed),
            quarantine_deferrals: self.counters.quarantine_deferrals.load(Ordering::Relaxed),
            protect_failures: self.counters.protect_failures.load(Ordering::Relaxed),
        }
    }

    pub fn slot_state(&self, slot: usize) -> SlotState {
        SlotState::from_u8(self.slots[slot].state.load(Ordering::Acquire))
    }

    /// Lock-free consistent read of a slot. Async-signal-safe.
    pub fn slot_record(&self, slot: usize) -> Option<SlotRecord> {
        let cell = self.slots.get(slot)?;
        loop {
            let before = cell.seq.load(Ordering::Acquire);
            if before % 2 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let state = SlotState::from_u8(cell.state.load(Ordering::Relaxed));
            let user_offset = cell.user_offset.load(Ordering::Relaxed);
            let user_size = cell.user_size.load(Ordering::Relaxed);
            let side = cell.side.load(Ordering::Relaxed);
            let meta_index = cell.meta_index.load(Ordering::Relaxed);
            let meta_seq = cell.meta_seq.load(Ordering::Relaxed);
            fence(Ordering::Acquire);
            if cell.seq.load(Ordering::Relaxed) != before {
                continue;
            }
            return Some(SlotRecord {
                state,
                user_offset,
                user_size,
                alignment_side: if side == 1 {
                    AlignmentSide::Right
                } else {
                    AlignmentSide::Left
                },
                metadata: (meta_index != NO_METADATA).then_some(MetadataHandle {
                    index: meta_index,
                    alloc_seq: meta_seq,
                }),
            });
        }
    }

    /// Address handed to the user for the current occupant of `slot`.
    pub fn user_address(&self, slot: usize) -> usize {
        self.slot_start(slot) + self.slots[slot].user_offset.load(Ordering::Acquire)
    }

    /// Pure geometric classification against current slot states.
    /// Lock-free and async-signal-safe.
    ///
    /// A guard between two slots is attributed to an allocated neighbor in
    /// preference to a quarantined one; between two allocated neighbors the
    /// overflow reading (right guard of the lower slot) wins.
    pub fn classify_address(&self, addr: usize) -> AddressClass {
        if !self.contains(addr) {
            return AddressClass::NotOurs;
        }
        let page_index = (addr - self.base()) / self.page;
        if page_index % 2 == 1 {
            let slot = page_index / 2;
            return match self.slot_state(slot) {
                SlotState::Allocated => AddressClass::AllocatedSlot(slot),
                SlotState::Quarantined => AddressClass::QuarantinedSlot(slot),
                SlotState::Free => AddressClass::FreeSlot(slot),
            };
        }
        let guard = page_index / 2;
        let below = guard.checked_sub(1).map(|s| (s, self.slot_state(s)));
        let above = (guard < self.slots.len()).then(|| (guard, self.slot_state(guard)));
        let rank = |s: Option<(usize, SlotState)>| match s {
            Some((_, SlotState::Allocated)) => 2,
            Some((_, SlotState::Quarantined)) => 1,
            _ => 0,
        };
        let (rb, ra) = (rank(below), rank(above));
        if rb == 0 && ra == 0 {
            AddressClass::UnattributedGuard(guard)
        } else if rb >= ra {
            AddressClass::RightGuardOf(below.unwrap().0)
        } else {
            AddressClass::LeftGuardOf(above.unwrap().0)
        }
    }

    fn user_offset_for(&self, size: usize, alignment: usize, side: AlignmentSide) -> usize {
        match side {
            AlignmentSide::Left => 0,
            AlignmentSide::Right => {
                let align = alignment.max(self.config.min_alignment);
                (self.page - size) / align * align
            }
        }
    }

    /// Makes the page holding `addr` accessible and zero, for recovery from
    /// a guarded fault. Async-signal-safe.
    pub(crate) fn unprotect_page_zeroed(&self, addr: usize) -> bool {
        if !self.contains(addr) {
            return false;
        }
        let page_addr = addr & !(self.page - 1);
        if let Some(slot) = self.slot_of(page_addr) {
            self.slots[slot].dirty.store(true, Ordering::Release);
        }
        // SAFETY: the page is inside our reservation.
        unsafe {
            let discarded = platform::discard(page_addr, self.page);
            if platform::protect(page_addr, self.page, Protection::ReadWrite).is_err() {
                return false;
            }
            if !discarded {
                std::ptr::write_bytes(page_addr as *mut u8, 0, self.page);
            }
        }
        true
    }
}

impl Drop for GuardedPool {
    fn drop(&mut self) {
        // SAFETY: the reservation is ours and no longer referenced.
        unsafe { platform::unreserve(self.base, self.region_len) };
    }
}

/// Exclusive access to the pool's mutable state.
pub struct PoolGuard<'a> {
    pool: &'a GuardedPool,
    state: MutexGuard<'a, PoolState>,
}

impl PoolGuard<'_> {
    pub fn live_count(&self) -> usize {
        self.state.live
    }

    /// Live allocations as a fraction of the simultaneous-allocation limit.
    pub fn utilization(&self) -> f64 {
        self.state.live as f64 / self.pool.config.max_simultaneous_allocations as f64
    }

    pub fn acquire(&mut self, size: usize, alignment: usize) -> Acquired {
        let pool = self.pool;
        let page = pool.page;
        if size == 0 || size > page || !alignment.is_power_of_two() || alignment > page {
            pool.counters.unsupported.fetch_add(1, Ordering::Relaxed);
            return Acquired::Unavailable(Unavailable::Unsupported);
        }
        if self.state.live >= pool.config.max_simultaneous_allocations {
            pool.counters.at_capacity.fetch_add(1, Ordering::Relaxed);
            return Acquired::Unavailable(Unavailable::AtCapacity);
        }
        let Some(&slot) = self.state.free.front() else {
            pool.counters.exhausted.fetch_add(1, Ordering::Relaxed);
            return Acquired::Unavailable(Unavailable::Exhausted);
        };
        let slot = slot as usize;
        let released_at = self.state.released_at[slot];
        if let Some(at) = released_at {
            let since = self.state.acquisitions - at;
            if since < pool.config.quarantine_min_slots as u64 && self.state.free.len() > 1 {
                pool.counters.quarantine_deferrals.fetch_add(1, Ordering::Relaxed);
                return Acquired::Unavailable(Unavailable::Quarantined);
            }
        }

        let start = pool.slot_start(slot);
        // SAFETY: the slot page is inside our reservation.
        if unsafe { platform::protect(start, page, Protection::ReadWrite) }.is_err() {
            pool.counters.protect_failures.fetch_add(1, Ordering::Relaxed);
            return Acquired::Unavailable(Unavailable::ProtectFailed);
        }
        // Release zeroes the page; only recovery can have dirtied it since.
        if pool.slots[slot].dirty.swap(false, Ordering::AcqRel) {
            // SAFETY: the page was just made writable and is not handed out.
            unsafe { std::ptr::write_bytes(start as *mut u8, 0, page) };
        }
        self.state.free.pop_front();

        let side = match pool.config.alignment {
            AlignmentPolicy::Left => AlignmentSide::Left,
            AlignmentPolicy::Right => AlignmentSide::Right,
            AlignmentPolicy::Random => {
                if self.state.rng.coin() {
                    AlignmentSide::Right
                } else {
                    AlignmentSide::Left
                }
            }
        };
        let offset = pool.user_offset_for(size, alignment, side);
        pool.slots[slot].write(|c| {
            c.user_offset.store(offset, Ordering::Relaxed);
            c.user_size.store(size, Ordering::Relaxed);
            c.side.store(u8::from(side == AlignmentSide::Right), Ordering::Relaxed);
            c.meta_index.store(NO_METADATA, Ordering::Relaxed);
            c.state.store(SlotState::Allocated as u8, Ordering::Relaxed);
        });
        self.state.live += 1;
        self.state.acquisitions += 1;

        let address = NonNull::new((start + offset) as *mut u8).expect("slot address is non-null");
        Acquired::Slot { index: slot, address }
    }

    /// Attaches the metadata generation describing the slot's occupant.
    pub fn set_metadata(&mut self, slot: usize, handle: MetadataHandle) {
        self.pool.slots[slot].write(|c| {
            c.meta_index.store(handle.index, Ordering::Relaxed);
            c.meta_seq.store(handle.alloc_seq, Ordering::Relaxed);
        });
    }

    /// Moves an allocated slot to quarantine: inaccessible, and queued
    /// behind every other free slot.
    pub fn release(&mut self, slot: usize) {
        let pool = self.pool;
        assert_eq!(
            pool.slot_state(slot),
            SlotState::Allocated,
            "releasing a slot that is not allocated"
        );
        // Publish the state first so a fault racing with the protection
        // change is already classified as use-after-free.
        pool.slots[slot].write(|c| {
            c.state.store(SlotState::Quarantined as u8, Ordering::Relaxed);
        });
        // Zeroing while the page is still writable and resident is cheaper
        // than after it is re-enabled, when the first write faults.
        // SAFETY: the slot is allocated, so its page is read-write.
        unsafe { std::ptr::write_bytes(pool.slot_start(slot) as *mut u8, 0, pool.page) };
        // SAFETY: the slot page is inside our reservation.
        if unsafe { platform::protect(pool.slot_start(slot), pool.page, Protection::None) }.is_err()
        {
            pool.counters.protect_failures.fetch_add(1, Ordering::Relaxed);
        }
        let acquisitions = self.state.acquisitions;
        self.state.released_at[slot] = Some(acquisitions);
        self.state.free.push_back(slot as u32);
        self.state.live -= 1;
        self.state.releases += 1;
    }

    pub fn free_list(&self) -> Vec<usize> {
        self.state.free.iter().map(|&s| s as usize).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize, max_live: usize, policy: AlignmentPolicy) -> GuardedPool {
        GuardedPool::new(PoolConfig {
            slot_count: n,
            max_simultaneous_allocations: max_live,
            alignment: policy,
            min_alignment: 1,
            ..PoolConfig::default()
        })
        .unwrap()
    }

    fn granted(a: Acquired) -> (usize, usize) {
        match a {
            Acquired::Slot { index, address } => (index, address.as_ptr() as usize),
            Acquired::Unavailable(why) => panic!("unavailable: {why:?}"),
        }
    }

    #[test]
    fn region_length_follows_layout() {
        let page = platform::page_size();
        let p = pool(16, 16, AlignmentPolicy::Random);
        assert_eq!(p.region_len(), 33 * page);
        let p = pool(1, 1, AlignmentPolicy::Random);
        assert_eq!(p.region_len(), 3 * page);
        assert_eq!(p.classify_address(p.base()), AddressClass::UnattributedGuard(0));
        assert_eq!(p.classify_address(p.base() + page), AddressClass::FreeSlot(0));
        assert_eq!(p.classify_address(p.base() + 2 * page), AddressClass::UnattributedGuard(1));
    }

    #[test]
    fn rejects_invalid_configs() {
        for cfg in [
            PoolConfig { slot_count: 0, ..PoolConfig::default() },
            PoolConfig { slot_count: 4, max_simultaneous_allocations: 5, ..PoolConfig::default() },
            PoolConfig { page_size: Some(3000), ..PoolConfig::default() },
            PoolConfig { min_alignment: 3, ..PoolConfig::default() },
        ] {
            assert!(matches!(GuardedPool::new(cfg), Err(PoolError::InvalidConfig(_))));
        }
    }

    #[test]
    fn right_alignment_offsets() {
        let page = platform::page_size();
        let p = pool(2, 2, AlignmentPolicy::Right);
        let (slot, addr) = granted(p.slot_acquire(41, 1));
        assert_eq!(addr - p.slot_start(slot), page - 41);

        let q = GuardedPool::new(PoolConfig {
            slot_count: 2,
            max_simultaneous_allocations: 2,
            alignment: AlignmentPolicy::Right,
            ..PoolConfig::default()
        })
        .unwrap();
        let (slot, addr) = granted(q.slot_acquire(41, 1));
        assert_eq!(addr - q.slot_start(slot), (page - 41) / 16 * 16);
        let (slot, addr) = granted(q.slot_acquire(41, 64));
        assert_eq!(addr - q.slot_start(slot), (page - 41) / 64 * 64);
        assert_eq!(addr % 64, 0);
    }

    #[test]
    fn left_alignment_underflow_lands_on_guard() {
        let p = pool(4, 4, AlignmentPolicy::Left);
        let (slot, addr) = granted(p.slot_acquire(41, 1));
        assert_eq!(addr, p.slot_start(slot));
        assert_eq!(p.classify_address(addr - 2), AddressClass::LeftGuardOf(slot));
    }

    #[test]
    fn oversize_and_zero_are_unavailable() {
        let page = platform::page_size();
        let p = pool(2, 2, AlignmentPolicy::Random);
        assert_eq!(
            p.slot_acquire(page + 1, 1),
            Acquired::Unavailable(Unavailable::Unsupported)
        );
        assert_eq!(p.slot_acquire(0, 1), Acquired::Unavailable(Unavailable::Unsupported));
        granted(p.slot_acquire(page, 1));
    }

    #[test]
    fn capacity_limits_live_allocations() {
        let p = pool(8, 3, AlignmentPolicy::Random);
        let slots: Vec<_> = (0..3).map(|_| granted(p.slot_acquire(8, 1)).0).collect();
        assert_eq!(p.slot_acquire(8, 1), Acquired::Unavailable(Unavailable::AtCapacity));
        p.slot_release(slots[0]);
        granted(p.slot_acquire(8, 1));
        assert_eq!(p.stats().at_capacity, 1);
    }

    #[test]
    fn single_slot_pool_reuses_its_slot() {
        let p = GuardedPool::new(PoolConfig {
            slot_count: 1,
            max_simultaneous_allocations: 1,
            quarantine_min_slots: 8,
            ..PoolConfig::default()
        })
        .unwrap();
        let (a, _) = granted(p.slot_acquire(8, 1));
        p.slot_release(a);
        let (b, _) = granted(p.slot_acquire(8, 1));
        assert_eq!(a, b);
    }

    #[test]
    fn fifo_quarantine_delays_reuse() {
        let p = GuardedPool::new(PoolConfig {
            slot_count: 16,
            max_simultaneous_allocations: 16,
            quarantine_min_slots: 8,
            ..PoolConfig::default()
        })
        .unwrap();
        let (target, _) = granted(p.slot_acquire(8, 1));
        p.slot_release(target);
        for _ in 0..8 {
            let (s, _) = granted(p.slot_acquire(8, 1));
            assert_ne!(s, target);
            p.slot_release(s);
        }
    }

    #[test]
    fn quarantine_minimum_defers_when_every_candidate_is_fresh() {
        let p = GuardedPool::new(PoolConfig {
            slot_count: 2,
            max_simultaneous_allocations: 2,
            quarantine_min_slots: 4,
            ..PoolConfig::default()
        })
        .unwrap();
        let (a, _) = granted(p.slot_acquire(8, 1));
        let (b, _) = granted(p.slot_acquire(8, 1));
        p.slot_release(a);
        p.slot_release(b);
        assert_eq!(p.slot_acquire(8, 1), Acquired::Unavailable(Unavailable::Quarantined));
        assert_eq!(p.stats().quarantine_deferrals, 1);
    }

    #[test]
    fn reused_slot_is_zeroed() {
        let p = pool(1, 1, AlignmentPolicy::Left);
        let (s, addr) = granted(p.slot_acquire(64, 1));
        unsafe { std::ptr::write_bytes(addr as *mut u8, 0xaa, 64) };
        p.slot_release(s);
        let (_, addr) = granted(p.slot_acquire(64, 1));
        let bytes = unsafe { std::slice::from_raw_parts(addr as *const u8, 64) };
        assert!(bytes.iter().all(|&b| b == 0));
    }

    #[test]
    fn guard_attribution_prefers_allocated_then_overflow() {
        let p = pool(4, 4, AlignmentPolicy::Left);
        let page = p.page_size();
        let mut slots: Vec<usize> = (0..4).map(|_| granted(p.slot_acquire(8, 1)).0).collect();
        slots.sort();
        // All allocated: the guard between 1 and 2 belongs to slot 1's overflow.
        let between = p.guard_start(2) + 5;
        assert_eq!(p.classify_address(between), AddressClass::RightGuardOf(1));
        // Quarantine slot 1: the allocated neighbor above wins.
        p.slot_release(1);
        assert_eq!(p.classify_address(between), AddressClass::LeftGuardOf(2));
        assert_eq!(p.classify_address(p.slot_start(1) + 8), AddressClass::QuarantinedSlot(1));
        // Both neighbors quarantined: the lower slot's overflow wins again.
        p.slot_release(2);
        assert_eq!(p.classify_address(between), AddressClass::RightGuardOf(1));
        // Outermost guards only have one neighbor.
        assert_eq!(p.classify_address(p.base()), AddressClass::LeftGuardOf(0));
        assert_eq!(
            p.classify_address(p.base() + p.region_len() - 1),
            AddressClass::RightGuardOf(3)
        );
        assert_eq!(p.classify_address(p.base() - 1), AddressClass::NotOurs);
        assert_eq!(p.classify_address(p.base() + p.region_len()), AddressClass::NotOurs);
        let _ = page;
    }

    #[test]
    fn exhaustive_layout_matches_brute_force_map() {
        for n in 1..=4 {
            let p = pool(n, n, AlignmentPolicy::Random);
            let page = p.page_size();
            // Brute-force map: walk the pages in order, alternating guard/slot.
            let mut map = Vec::new();
            for k in 0..(2 * n + 1) {
                for _ in 0..page {
                    map.push(if k % 2 == 0 { None } else { Some(k / 2) });
                }
            }
            assert_eq!(map.len(), p.region_len());
            for (off, expect) in map.iter().enumerate() {
                let addr = p.base() + off;
                assert_eq!(p.slot_of(addr), *expect, "offset {off}");
                match (p.classify_address(addr), expect) {
                    (AddressClass::FreeSlot(s), Some(e)) => assert_eq!(s, *e),
                    (AddressClass::UnattributedGuard(_), None) => {}
                    (other, e) => panic!("offset {off}: {other:?} vs {e:?}"),
                }
            }
        }
    }

    #[test]
    fn concurrent_stress_respects_capacity() {
        use std::sync::Arc;
        let p = Arc::new(pool(16, 5, AlignmentPolicy::Random));
        let threads: Vec<_> = (0..4)
            .map(|t| {
                let p = Arc::clone(&p);
                std::thread::spawn(move || {
                    let mut mine = Vec::new();
                    for i in 0..2000 {
                        let mut g = p.lock();
                        assert!(g.live_count() <= 5);
                        if (i + t) % 3 != 0 {
                            if let Acquired::Slot { index, .. } = g.acquire(16, 1) {
                                mine.push(index);
                            }
                        } else if let Some(s) = mine.pop() {
                            g.release(s);
                        }
                        assert!(g.live_count() <= 5);
                    }
                    let mut g = p.lock();
                    for s in mine {
                        g.release(s);
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(p.lock().live_count(), 0);
    }
}
