//! Delta compression of stack traces.
//!
//! Byte format of a compressed trace: the frame count and the first return
//! address are kept out of line; every following frame is the difference
//! to its predecessor, computed with wrapping arithmetic, zigzag-mapped
//! (`(d << 1) ^ (d >> 63)`) and written as an unsigned base-128 varint:
//! low seven bits first, high bit set on every byte except the last.

use arrayvec::ArrayVec;
use thiserror::Error;

use crate::trace::{StackTrace, MAX_FRAMES};

/// Longest varint encoding of a 64-bit value.
pub const MAX_VARINT_LEN: usize = 10;

/// Capacity needed for the deltas of a maximal trace.
pub const MAX_DELTA_BYTES: usize = (MAX_FRAMES - 1) * MAX_VARINT_LEN;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    #[error("varint truncated at byte {0}")]
    Truncated(usize),
    #[error("varint longer than 64 bits at byte {0}")]
    Overlong(usize),
    #[error("trailing bytes after {0} frames")]
    Trailing(usize),
    #[error("frame count {0} exceeds the {MAX_FRAMES}-frame limit")]
    TooManyFrames(usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompressedTrace {
    pub frame_count: u32,
    pub first_pc: usize,
    pub deltas: ArrayVec<u8, MAX_DELTA_BYTES>,
}

impl CompressedTrace {
    /// Stored size in bytes: count, first address and delta stream.
    pub fn encoded_len(&self) -> usize {
        if self.frame_count == 0 {
            return std::mem::size_of::<u32>();
        }
        std::mem::size_of::<u32>() + std::mem::size_of::<usize>() + self.deltas.len()
    }
}

#[inline]
pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

#[inline]
pub fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

/// Appends the varint encoding of `v`; returns false if `out` is full.
pub fn write_varint<const N: usize>(mut v: u64, out: &mut ArrayVec<u8, N>) -> bool {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        let more = v != 0;
        if out.try_push(byte | if more { 0x80 } else { 0 }).is_err() {
            return false;
        }
        if !more {
            return true;
        }
    }
}

/// Decodes one varint at `*pos`, advancing it.
pub fn read_varint(bytes: &[u8], pos: &mut usize) -> Result<u64, DecodeError> {
    let start = *pos;
    let mut value = 0u64;
    for i in 0..MAX_VARINT_LEN {
        let Some(&byte) = bytes.get(*pos) else {
            return Err(DecodeError::Truncated(start));
        };
        *pos += 1;
        let low = u64::from(byte & 0x7f);
        if i == MAX_VARINT_LEN - 1 && low > 1 {
            return Err(DecodeError::Overlong(start));
        }
        value |= low << (7 * i);
        if byte & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(DecodeError::Overlong(start))
}

pub fn compress_trace(trace: &[usize]) -> CompressedTrace {
    let trace = &trace[..trace.len().min(MAX_FRAMES)];
    let mut out = CompressedTrace {
        frame_count: trace.len() as u32,
        first_pc: trace.first().copied().unwrap_or(0),
        deltas: ArrayVec::new(),
    };
    for pair in trace.windows(2) {
        let delta = pair[1].wrapping_sub(pair[0]) as u64 as i64;
        let fits = write_varint(zigzag(delta), &mut out.deltas);
        debug_assert!(fits, "delta buffer sized for the worst case");
    }
    out
}

pub fn decompress_trace(compressed: &CompressedTrace) -> Result<StackTrace, DecodeError> {
    decode_parts(
        compressed.frame_count as usize,
        compressed.first_pc,
        &compressed.deltas,
    )
}

/// Decodes a trace from its three stored parts.
pub fn decode_parts(
    frame_count: usize,
    first_pc: usize,
    deltas: &[u8],
) -> Result<StackTrace, DecodeError> {
    if frame_count > MAX_FRAMES {
        return Err(DecodeError::TooManyFrames(frame_count));
    }
    let mut out = StackTrace::new();
    if frame_count == 0 {
        return if deltas.is_empty() {
            Ok(out)
        } else {
            Err(DecodeError::Trailing(0))
        };
    }
    out.push(first_pc);
    let mut pos = 0;
    let mut prev = first_pc;
    for _ in 1..frame_count {
        let delta = unzigzag(read_varint(deltas, &mut pos)?);
        prev = prev.wrapping_add(delta as u64 as usize);
        out.push(prev);
    }
    if pos != deltas.len() {
        return Err(DecodeError::Trailing(frame_count));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn positive_delta_is_one_byte() {
        let c = compress_trace(&[0x1000, 0x1010]);
        assert_eq!(c.first_pc, 0x1000);
        assert_eq!(c.deltas.as_slice(), &[0x20]);
    }

    #[test]
    fn negative_delta_is_one_byte() {
        let c = compress_trace(&[0x2000, 0x1ff0]);
        assert_eq!(c.deltas.as_slice(), &[0x1f]);
    }

    #[test]
    fn empty_trace_round_trips() {
        let c = compress_trace(&[]);
        assert_eq!(c.frame_count, 0);
        assert!(decompress_trace(&c).unwrap().is_empty());
    }

    #[test]
    fn zigzag_extremes() {
        for v in [0i64, -1, 1, i64::MIN, i64::MAX] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
        assert_eq!(zigzag(i64::MIN), u64::MAX);
    }

    #[test]
    fn malformed_streams_are_rejected() {
        assert_eq!(decode_parts(2, 0, &[0x80]), Err(DecodeError::Truncated(0)));
        assert_eq!(decode_parts(2, 0, &[0x02, 0x02]), Err(DecodeError::Trailing(2)));
        assert_eq!(
            decode_parts(2, 0, &[0xff; 10]),
            Err(DecodeError::Overlong(0))
        );
        assert_eq!(decode_parts(65, 0, &[]), Err(DecodeError::TooManyFrames(65)));
    }

    proptest! {
        #[test]
        fn varint_round_trip(v in any::<u64>()) {
            let mut buf = ArrayVec::<u8, 10>::new();
            prop_assert!(write_varint(v, &mut buf));
            let mut pos = 0;
            prop_assert_eq!(read_varint(&buf, &mut pos).unwrap(), v);
            prop_assert_eq!(pos, buf.len());
        }
    }
}
