//! Per-allocation evidence for reports: size, threads, and compressed
//! allocation/deallocation traces, kept in a fixed ring of records.
//!
//! Writers are serialized by the pool lock. Readers (the fault handler) take
//! no lock; each record carries a sequence word that is odd while a write is
//! in progress, and a reader copies the record between two loads of it,
//! discarding the copy when they differ.

use std::sync::atomic::{fence, AtomicBool, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering};

use arrayvec::ArrayVec;

use crate::compress::{self, CompressedTrace, MAX_DELTA_BYTES};
use crate::trace::{StackTrace, MAX_FRAMES};

/// Bytes of a record that do not depend on trace contents.
pub const RECORD_HEADER_BYTES: usize = 48;

const READ_ATTEMPTS: usize = 4;

/// Identifies one record generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetadataHandle {
    pub index: u32,
    pub alloc_seq: u64,
}

/// Decoded contents of a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationMetadata {
    pub slot_index: u32,
    pub user_size: usize,
    pub alloc_seq: u64,
    pub alloc_thread: u64,
    pub alloc_trace: CompressedTrace,
    pub dealloc: Option<(u64, CompressedTrace)>,
}

impl AllocationMetadata {
    pub fn alloc_frames(&self) -> StackTrace {
        compress::decompress_trace(&self.alloc_trace).unwrap_or_default()
    }

    pub fn dealloc_frames(&self) -> Option<StackTrace> {
        self.dealloc
            .as_ref()
            .map(|(_, t)| compress::decompress_trace(t).unwrap_or_default())
    }
}

struct TraceCell {
    frame_count: AtomicU32,
    first_pc: AtomicUsize,
    len: AtomicU32,
    bytes: Box<[AtomicU8]>,
}

impl TraceCell {
    fn new(capacity: usize) -> Self {
        Self {
            frame_count: AtomicU32::new(0),
            first_pc: AtomicUsize::new(0),
            len: AtomicU32::new(0),
            bytes: (0..capacity).map(|_| AtomicU8::new(0)).collect(),
        }
    }

    fn store(&self, trace: &CompressedTrace) {
        let len = trace.deltas.len().min(self.bytes.len());
        for (cell, &b) in self.bytes.iter().zip(&trace.deltas[..len]) {
            cell.store(b, Ordering::Relaxed);
        }
        self.frame_count.store(trace.frame_count, Ordering::Relaxed);
        self.first_pc.store(trace.first_pc, Ordering::Relaxed);
        self.len.store(len as u32, Ordering::Relaxed);
    }

    fn load(&self) -> CompressedTrace {
        let len = (self.len.load(Ordering::Relaxed) as usize).min(self.bytes.len());
        let mut deltas = ArrayVec::new();
        for cell in &self.bytes[..len] {
            deltas.push(cell.load(Ordering::Relaxed));
        }
        CompressedTrace {
            frame_count: self.frame_count.load(Ordering::Relaxed),
            first_pc: self.first_pc.load(Ordering::Relaxed),
            deltas,
        }
    }

    fn stored_len(&self) -> usize {
        let frames = self.frame_count.load(Ordering::Relaxed);
        if frames == 0 {
            return 0;
        }
        self.len.load(Ordering::Relaxed) as usize + std::mem::size_of::<usize>()
    }
}

struct Record {
    seq: AtomicU64,
    slot: AtomicU32,
    user_size: AtomicUsize,
    alloc_seq: AtomicU64,
    alloc_thread: AtomicU64,
    has_dealloc: AtomicBool,
    dealloc_thread: AtomicU64,
    alloc_trace: TraceCell,
    dealloc_trace: TraceCell,
}

impl Record {
    fn new(trace_bytes: usize) -> Self {
        Self {
            seq: AtomicU64::new(0),
            slot: AtomicU32::new(u32::MAX),
            user_size: AtomicUsize::new(0),
            alloc_seq: AtomicU64::new(0),
            alloc_thread: AtomicU64::new(0),
            has_dealloc: AtomicBool::new(false),
            dealloc_thread: AtomicU64::new(0),
            alloc_trace: TraceCell::new(trace_bytes),
            dealloc_trace: TraceCell::new(trace_bytes),
        }
    }

    fn begin_write(&self) {
        let s = self.seq.load(Ordering::Relaxed);
        self.seq.store(s.wrapping_add(1), Ordering::Relaxed);
        fence(Ordering::Release);
    }

    fn end_write(&self) {
        let s = self.seq.load(Ordering::Relaxed);
        self.seq.store(s.wrapping_add(1), Ordering::Release);
    }

    fn held_bytes(&self) -> usize {
        if self.alloc_seq.load(Ordering::Relaxed) == 0 {
            return 0;
        }
        RECORD_HEADER_BYTES + self.alloc_trace.stored_len() + self.dealloc_trace.stored_len()
    }
}

/// Fixed-capacity ring of allocation records; the oldest record is evicted
/// when a new allocation needs space.
pub struct MetadataStore {
    records: Box<[Record]>,
    max_frames: usize,
    next_seq: AtomicU64,
    bytes_held: AtomicUsize,
}

impl MetadataStore {
    pub fn new(capacity: usize, max_frames: usize) -> Self {
        assert!(capacity > 0, "metadata capacity must be positive");
        let max_frames = max_frames.min(MAX_FRAMES);
        let trace_bytes = max_frames.saturating_sub(1) * compress::MAX_VARINT_LEN;
        debug_assert!(trace_bytes <= MAX_DELTA_BYTES);
        Self {
            records: (0..capacity).map(|_| Record::new(trace_bytes)).collect(),
            max_frames,
            next_seq: AtomicU64::new(1),
            bytes_held: AtomicUsize::new(0),
        }
    }

    pub fn capacity(&self) -> usize {
        self.records.len()
    }

    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    /// Bytes currently accounted to live records.
    pub fn bytes_held(&self) -> usize {
        self.bytes_held.load(Ordering::Relaxed)
    }

    /// Worst-case value of [`bytes_held`](Self::bytes_held).
    pub fn byte_budget(&self) -> usize {
        let per_trace = std::mem::size_of::<usize>()
            + self.max_frames.saturating_sub(1) * compress::MAX_VARINT_LEN;
        self.capacity() * (RECORD_HEADER_BYTES + 2 * per_trace)
    }

    /// Memory reserved for the records themselves.
    pub fn footprint_bytes(&self) -> usize {
        let trace_bytes = self.max_frames.saturating_sub(1) * compress::MAX_VARINT_LEN;
        self.capacity()
            * (std::mem::size_of::<Record>() + 2 * trace_bytes * std::mem::size_of::<AtomicU8>())
    }

    /// Records a new allocation, evicting the oldest record if needed.
    /// Callers must hold the pool lock.
    pub fn store_alloc(
        &self,
        slot_index: u32,
        user_size: usize,
        thread: u64,
        trace: &[usize],
    ) -> MetadataHandle {
        let alloc_seq = self.next_seq.fetch_add(1, Ordering::Relaxed);
        let index = ((alloc_seq - 1) % self.capacity() as u64) as u32;
        let record = &self.records[index as usize];
        let compressed = compress::compress_trace(&trace[..trace.len().min(self.max_frames)]);

        let before = record.held_bytes();
        record.begin_write();
        record.slot.store(slot_index, Ordering::Relaxed);
        record.user_size.store(user_size, Ordering::Relaxed);
        record.alloc_seq.store(alloc_seq, Ordering::Relaxed);
        record.alloc_thread.store(thread, Ordering::Relaxed);
        record.has_dealloc.store(false, Ordering::Relaxed);
        record.dealloc_thread.store(0, Ordering::Relaxed);
        record.alloc_trace.store(&compressed);
        record.dealloc_trace.store(&CompressedTrace::default());
        record.end_write();
        self.account(before, record.held_bytes());

        MetadataHandle { index, alloc_seq }
    }

    /// Adds deallocation evidence to a record, unless it has been evicted
    /// since `handle` was issued. Callers must hold the pool lock.
    pub fn store_dealloc(&self, handle: MetadataHandle, thread: u64, trace: &[usize]) {
        let Some(record) = self.records.get(handle.index as usize) else {
            return;
        };
        if record.alloc_seq.load(Ordering::Relaxed) != handle.alloc_seq {
            return;
        }
        let compressed = compress::compress_trace(&trace[..trace.len().min(self.max_frames)]);
        let before = record.held_bytes();
        record.begin_write();
        record.has_dealloc.store(true, Ordering::Relaxed);
        record.dealloc_thread.store(thread, Ordering::Relaxed);
        record.dealloc_trace.store(&compressed);
        record.end_write();
        self.account(before, record.held_bytes());
    }

    fn account(&self, before: usize, after: usize) {
        if after >= before {
            self.bytes_held.fetch_add(after - before, Ordering::Relaxed);
        } else {
            self.bytes_held.fetch_sub(before - after, Ordering::Relaxed);
        }
    }

    /// Lock-free consistent copy of the record generation named by `handle`.
    /// `None` when the record was evicted or kept changing under the reader.
    /// Async-signal-safe.
    pub fn snapshot(&self, handle: MetadataHandle) -> Option<AllocationMetadata> {
        let record = self.records.get(handle.index as usize)?;
        for _ in 0..READ_ATTEMPTS {
            let before = record.seq.load(Ordering::Acquire);
            if before % 2 == 1 {
                std::hint::spin_loop();
                continue;
            }
            let copy = AllocationMetadata {
                slot_index: record.slot.load(Ordering::Relaxed),
                user_size: record.user_size.load(Ordering::Relaxed),
                alloc_seq: record.alloc_seq.load(Ordering::Relaxed),
                alloc_thread: record.alloc_thread.load(Ordering::Relaxed),
                alloc_trace: record.alloc_trace.load(),
                dealloc: record
                    .has_dealloc
                    .load(Ordering::Relaxed)
                    .then(|| {
                        (
                            record.dealloc_thread.load(Ordering::Relaxed),
                            record.dealloc_trace.load(),
                        )
                    }),
            };
            fence(Ordering::Acquire);
            if record.seq.load(Ordering::Relaxed) != before {
                continue;
            }
            return (copy.alloc_seq == handle.alloc_seq).then_some(copy);
        }
        None
    }
}
