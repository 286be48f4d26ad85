use gwpasan::compress::{compress_trace, decompress_trace, read_varint, unzigzag, write_varint, zigzag};
use gwpasan::rng::XorShift64Star;
use gwpasan::trace::MAX_FRAMES;
use arrayvec::ArrayVec;
use proptest::prelude::*;

/// Independent encoding of a trace: the same layout built with the
/// `leb128` crate and plain i128 arithmetic for the zigzag map.
fn oracle_deltas(trace: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    for w in trace.windows(2) {
        let d = w[1].wrapping_sub(w[0]) as u64 as i64 as i128;
        let z = if d >= 0 { 2 * d } else { -2 * d - 1 } as u64;
        leb128::write::unsigned(&mut out, z).unwrap();
    }
    out
}

/// Clustered return addresses: frames anywhere in one megabyte of text.
fn clustered(rng: &mut XorShift64Star, frames: usize) -> Vec<usize> {
    let text = 0x5555_5555_0000usize;
    (0..frames).map(|_| text + rng.below(1 << 20) as usize).collect()
}

proptest! {
    #[test]
    fn zigzag_matches_oracle(v in any::<i64>()) {
        let d = v as i128;
        let expected = if d >= 0 { 2 * d } else { -2 * d - 1 } as u64;
        prop_assert_eq!(zigzag(v), expected);
        prop_assert_eq!(unzigzag(expected), v);
    }

    #[test]
    fn varint_matches_leb128(v in any::<u64>()) {
        let mut ours = ArrayVec::<u8, 10>::new();
        prop_assert!(write_varint(v, &mut ours));
        let mut theirs = Vec::new();
        leb128::write::unsigned(&mut theirs, v).unwrap();
        prop_assert_eq!(&ours[..], &theirs[..]);
        let mut pos = 0;
        prop_assert_eq!(read_varint(&theirs, &mut pos).unwrap(), v);
        prop_assert_eq!(pos, theirs.len());
    }

    #[test]
    fn trace_encoding_matches_oracle(trace in prop::collection::vec(any::<usize>(), 0..=MAX_FRAMES)) {
        let c = compress_trace(&trace);
        prop_assert_eq!(c.frame_count as usize, trace.len());
        prop_assert_eq!(&c.deltas[..], &oracle_deltas(&trace)[..]);
        prop_assert_eq!(&decompress_trace(&c).unwrap()[..], &trace[..]);
    }
}

#[test]
fn random_traces_round_trip() {
    let mut rng = XorShift64Star::new(0x5eed);
    let mut negative = 0;
    for i in 0..10_000 {
        let len = rng.below(MAX_FRAMES as u64 + 1) as usize;
        let trace: Vec<usize> = if i % 2 == 0 {
            (0..len).map(|_| rng.next_u64() as usize).collect()
        } else {
            clustered(&mut rng, len)
        };
        negative += trace.windows(2).filter(|w| w[1] < w[0]).count();
        let c = compress_trace(&trace);
        assert_eq!(&decompress_trace(&c).unwrap()[..], &trace[..], "trace {i}");
    }
    assert!(negative > 10_000, "too few negative deltas exercised: {negative}");
}

#[test]
fn clustered_traces_shrink_to_a_quarter_to_half() {
    let mut rng = XorShift64Star::new(42);
    let (mut raw, mut packed) = (0usize, 0usize);
    for _ in 0..1000 {
        let trace = clustered(&mut rng, 20);
        raw += trace.len() * std::mem::size_of::<usize>();
        packed += compress_trace(&trace).encoded_len();
    }
    let ratio = packed as f64 / raw as f64;
    assert!((0.25..=0.50).contains(&ratio), "compressed/raw = {ratio:.3}");
}
