use std::path::Path;
use std::time::Instant;

use memoattn_core::store::{ApmStore, StoreConfig};
use memoattn_core::tensor::ApmRef;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn filled_store(dir: &Path, n: u64, l: usize, seed: u64) -> ApmStore {
    let mut store = ApmStore::create(dir, StoreConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; l * l];
    for id in 0..n {
        for row in data.chunks_mut(l) {
            row.iter_mut().for_each(|v| *v = rng.gen::<f32>() + 1e-3);
            let s: f32 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        store.put(id, &[ApmRef::new(l, &data).unwrap()]).unwrap();
    }
    store.flush().unwrap();
    store
}

fn shard_mappings(dir: &Path) -> usize {
    let maps = std::fs::read_to_string("/proc/self/maps").unwrap_or_default();
    let needle = dir.to_string_lossy().into_owned();
    maps.lines().filter(|l| l.contains(&needle)).count()
}

fn vm_size_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmSize:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

#[test]
fn map_release_cycles_do_not_grow_address_space() {
    let dir = tempfile::tempdir().unwrap();
    let store = filled_store(dir.path(), 64, 64, 1);
    if !store.mapping_available() {
        eprintln!("page remapping unavailable; nothing to check");
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch_bytes = 16 * store.records()[0].padded_bytes(store.page_size());
    let before = vm_size_kb();
    for _ in 0..10_000 {
        let ids: Vec<u64> = (0..16).map(|_| rng.gen_range(0..64)).collect();
        let batch = store.gather_mapped(&ids).unwrap();
        assert!(batch.is_mapped());
        batch.release().unwrap();
    }
    assert_eq!(shard_mappings(dir.path()), 0, "shard pages still mapped after release");
    if let (Some(a), Some(b)) = (before, vm_size_kb()) {
        let grown = b.saturating_sub(a) * 1024;
        assert!(grown <= batch_bytes + (1 << 20), "address space grew by {grown} bytes");
    }
}

#[test]
fn remapping_is_repeatable_and_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let ids = [3u64, 0, 3, 7];
    let first = {
        let store = filled_store(dir.path(), 8, 48, 3);
        let a = store.gather_mapped(&ids).unwrap();
        let bytes: Vec<Vec<f32>> = (0..ids.len()).map(|i| a.payload(i).to_vec()).collect();
        a.release().unwrap();
        let b = store.gather_mapped(&ids).unwrap();
        for (i, want) in bytes.iter().enumerate() {
            assert_eq!(b.payload(i), want.as_slice());
        }
        bytes
    };
    let store = ApmStore::open(dir.path()).unwrap();
    store.verify().unwrap();
    let copy = store.gather_copy(&ids).unwrap();
    let per = 48 * 48;
    for (i, want) in first.iter().enumerate() {
        assert_eq!(&copy.data()[i * per..(i + 1) * per], want.as_slice());
    }
    let empty = store.gather_mapped(&[]).unwrap();
    assert!(empty.is_empty());
    empty.release().unwrap();
}

fn median_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    t.sort_by(f64::total_cmp);
    t[reps / 2]
}

#[test]
fn mapped_gather_cost_tracks_count_not_size() {
    let small_dir = tempfile::tempdir().unwrap();
    let large_dir = tempfile::tempdir().unwrap();
    let small = filled_store(small_dir.path(), 64, 128, 4);
    let large = filled_store(large_dir.path(), 64, 512, 5);
    if !small.mapping_available() {
        eprintln!("page remapping unavailable; nothing to check");
        return;
    }
    let ids: Vec<u64> = (0..64).rev().collect();
    let mapped = |s: &ApmStore| {
        median_ms(31, || s.gather_mapped(&ids).unwrap().release().unwrap())
    };
    let copied = |s: &ApmStore| median_ms(31, || drop(std::hint::black_box(s.gather_copy(&ids).unwrap())));
    // warm the page cache for both stores
    copied(&small);
    copied(&large);
    let (ms, ml) = (mapped(&small), mapped(&large));
    let (cs, cl) = (copied(&small), copied(&large));
    assert!(ml < 2.0 * ms, "mapped gather grew {:.2}x ({ms:.3} -> {ml:.3} ms)", ml / ms);
    assert!(cl >= 3.0 * cs, "copy gather grew only {:.2}x ({cs:.3} -> {cl:.3} ms)", cl / cs);
}
