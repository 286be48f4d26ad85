//! The tool installed as the process's global allocator.

use std::collections::BTreeMap;

use gwpasan::{CounterSamplerConfig, GuardedGlobalAlloc, GuardianConfig, PoolConfig, ReportSink, ReporterConfig, SamplingPolicy};

fn configure() -> Option<GuardianConfig> {
    Some(GuardianConfig {
        pool: PoolConfig {
            slot_count: 512,
            max_simultaneous_allocations: 512,
            ..PoolConfig::default()
        },
        policy: SamplingPolicy::Counter(CounterSamplerConfig {
            sample_rate: 8,
            rng_seed: Some(3),
        }),
        reporter: ReporterConfig {
            recoverable: true,
            sink: ReportSink::Capture { capacity: 1 << 16 },
            module_offsets: false,
        },
        ..GuardianConfig::default()
    })
}

#[global_allocator]
static ALLOC: GuardedGlobalAlloc = GuardedGlobalAlloc::with_config(configure);

fn collections_work_and_some_blocks_are_guarded() {
    let g = ALLOC.guardian().expect("tool enabled");
    let before = g.stats().guarded;
    let mut map = BTreeMap::new();
    for i in 0..20_000u32 {
        map.insert(i, format!("value {i}").into_bytes());
        if i % 3 == 0 {
            map.remove(&(i / 2));
        }
    }
    let mut v: Vec<Box<[u8]>> = (0..2000).map(|i| vec![i as u8; 1 + i % 300].into_boxed_slice()).collect();
    for (i, b) in v.iter().enumerate() {
        assert!(b.iter().all(|&x| x == i as u8));
    }
    for b in v.iter_mut() {
        let grown: Vec<u8> = b.iter().copied().chain(std::iter::repeat_n(1, 64)).collect();
        *b = grown.into_boxed_slice();
    }
    for (k, val) in &map {
        assert_eq!(val, format!("value {k}").as_bytes());
    }
    let s = g.stats();
    assert!(s.guarded > before, "{s:?}");
    assert_eq!(s.reports, 0, "{}", g.report_text());
}

/// Run after the collections above are dropped, so slots are free again.
fn use_after_free_through_a_box_is_caught() {
    let g = ALLOC.guardian().expect("tool enabled");
    let mut ptr = std::ptr::null_mut::<u8>();
    for _ in 0..10_000 {
        let b = Box::new([7u8; 41]);
        let p = Box::into_raw(b) as *mut u8;
        if g.owns(p as usize) {
            ptr = p;
            break;
        }
        drop(unsafe { Box::from_raw(p as *mut [u8; 41]) });
    }
    assert!(!ptr.is_null());
    drop(unsafe { Box::from_raw(ptr as *mut [u8; 41]) });
    let _ = unsafe { ptr.add(8).read_volatile() };
    let r = g.reports();
    assert_eq!(r.len(), 1, "{}", g.report_text());
    assert_eq!(r[0].kind, gwpasan::ErrorKind::UseAfterFree);
}

// One test so that nothing else allocates concurrently.
#[test]
fn global_allocator() {
    collections_work_and_some_blocks_are_guarded();
    use_after_free_through_a_box_is_caught();
}
