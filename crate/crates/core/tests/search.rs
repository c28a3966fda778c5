mod common;

use common::tiny_supernet_config;
use hsinas::autodiff::ParamStore;
use hsinas::data::{gen_synthetic, split_labels, HsiCube, LabelMap, SplitSpec, SyntheticSpec};
use hsinas::pipeline::normalize_with;
use hsinas::search::{run_search, SamplePool, SearchConfig, Searcher};
use hsinas::search_space::SearchSpace;
use hsinas::supernet::{ArchValues, Supernet, SupernetConfig};
use hsinas::Error;

struct Scene {
    cube: HsiCube,
    train: LabelMap,
    val: LabelMap,
}

fn scene(classes: usize, seed: u64) -> Scene {
    let spec = SyntheticSpec { height: 24, width: 24, bands: 9, classes, noise_sigma: 0.1, seed };
    let (mut cube, labels) = gen_synthetic(spec).unwrap();
    let (train, val, _) = split_labels(&labels, SplitSpec { train_per_class: 15, val_per_class: 10, seed }).unwrap();
    normalize_with(&mut cube, &train).unwrap();
    Scene { cube, train, val }
}

fn net_config(classes: usize) -> SupernetConfig {
    SupernetConfig {
        num_classes: classes,
        ..tiny_supernet_config(SearchSpace::AsymD)
    }
}

fn small_search(epochs: usize, warmup: usize) -> SearchConfig {
    SearchConfig {
        epochs,
        warmup_epochs: warmup,
        batch_size: 4,
        pool_size: 8,
        patch_size: 12,
        seed: 5,
        ..SearchConfig::default()
    }
}

fn setup(s: &Scene, config: &SearchConfig) -> (Supernet, ParamStore, SamplePool) {
    let mut rng = common::rng(config.seed);
    let mut store = ParamStore::new();
    let net = Supernet::new(&mut store, net_config(s.train.num_classes()), &mut rng).unwrap();
    let pool = SamplePool::generate(&s.cube, &s.train, &s.val, config.pool_size, config.patch_size, &mut rng).unwrap();
    (net, store, pool)
}

fn bits(a: &ArchValues) -> Vec<u64> {
    let mut out: Vec<u64> = a.alpha.iter().flatten().map(|v| v.to_bits()).collect();
    for b in a.beta.iter().flatten().flatten() {
        out.extend(b.logits.iter().map(|v| v.to_bits()));
    }
    out
}

fn network_bits(store: &ParamStore) -> Vec<u64> {
    store
        .params()
        .iter()
        .filter(|p| !p.role.is_arch())
        .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn pool_splits_in_half() {
    let s = scene(3, 0);
    let (_, _, pool) = setup(&s, &SearchConfig { pool_size: 9, ..small_search(2, 1) });
    assert_eq!((pool.train_theta.len(), pool.train_arch.len()), (5, 4));
    assert!(pool.train_theta.iter().chain(&pool.train_arch).all(|x| x.labeled_count() > 0 && x.height == 12));
    assert_eq!(pool.val.len(), 4);
    assert!(pool.val.iter().all(|x| x.labeled_count() > 0));
}

#[test]
fn warmup_freezes_architecture() {
    let s = scene(3, 1);
    let config = small_search(4, 3);
    let (net, mut store, pool) = setup(&s, &config);
    let initial = bits(&net.arch_values(&store));
    let mut per_epoch = Vec::new();
    let out = run_search(&net, &mut store, &pool, &config, |r, st| per_epoch.push((r.clone(), bits(&net.arch_values(st))))).unwrap();
    for (r, a) in &per_epoch[..3] {
        assert_eq!(a, &initial, "epoch {}", r.epoch);
        assert!(r.arch_loss.is_none());
    }
    assert_ne!(per_epoch[3].1, initial);
    assert!(per_epoch[3].0.arch_loss.is_some());
    assert_eq!(out.history.len(), 4);
}

#[test]
fn each_step_touches_only_its_group() {
    let s = scene(3, 2);
    let config = small_search(2, 0);
    let (net, mut store, pool) = setup(&s, &config);
    let mut searcher = Searcher::new(&net, &config);
    let batch: Vec<_> = pool.train_theta.iter().take(2).collect();
    for _ in 0..3 {
        let (arch, theta) = (bits(&net.arch_values(&store)), network_bits(&store));
        searcher.theta_step(&mut store, &batch, 0.05).unwrap();
        assert_eq!(bits(&net.arch_values(&store)), arch);
        assert_ne!(network_bits(&store), theta);
        let (arch, theta) = (bits(&net.arch_values(&store)), network_bits(&store));
        searcher.arch_step(&mut store, &batch).unwrap();
        assert_ne!(bits(&net.arch_values(&store)), arch);
        assert_eq!(network_bits(&store), theta);
    }
}

#[test]
fn search_is_deterministic() {
    let s = scene(3, 3);
    let config = small_search(3, 1);
    let run = || {
        let (net, mut store, pool) = setup(&s, &config);
        let out = run_search(&net, &mut store, &pool, &config, |_, _| {}).unwrap();
        (bits(&out.arch), out.history, network_bits(&store))
    };
    assert_eq!(run(), run());
}

#[test]
fn best_epoch_is_restored() {
    let s = scene(3, 4);
    let config = small_search(6, 2);
    let (net, mut store, pool) = setup(&s, &config);
    let mut snapshots = Vec::new();
    let out = run_search(&net, &mut store, &pool, &config, |_, st| snapshots.push((bits(&net.arch_values(st)), network_bits(st)))).unwrap();
    let max = out.history.iter().map(|r| r.val_oa).fold(0.0, f64::max);
    assert_eq!(out.best.oa, max);
    let first = out.history.iter().position(|r| r.val_oa == max).unwrap();
    assert_eq!(out.best_epoch, first + 1);
    assert_eq!(snapshots[first], (bits(&out.arch), network_bits(&store)));
    assert_eq!(bits(&net.arch_values(&store)), bits(&out.arch));
    for (i, r) in out.history.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!((r.lr - config.lr(i)).abs() < 1e-15);
    }
}

#[test]
fn toy_scene_is_separable_during_search() {
    let s = scene(2, 6);
    let config = SearchConfig {
        pool_size: 16,
        ..small_search(30, 10)
    };
    let (net, mut store, pool) = setup(&s, &config);
    let out = run_search(&net, &mut store, &pool, &config, |_, _| {}).unwrap();
    assert!(out.best.oa >= 0.9, "best val OA {}", out.best.oa);
}

#[test]
fn unusable_configs_are_rejected() {
    let s = scene(3, 7);
    let config = small_search(2, 1);
    let (net, mut store, pool) = setup(&s, &config);
    for bad in [
        SearchConfig { warmup_epochs: 2, ..config.clone() },
        SearchConfig { pool_size: 1, ..config.clone() },
        SearchConfig { batch_size: 0, ..config.clone() },
        SearchConfig { lr_min: 0.5, ..config.clone() },
    ] {
        assert!(matches!(run_search(&net, &mut store, &pool, &bad, |_, _| {}), Err(Error::Config(_))));
    }
    let empty = SamplePool { train_arch: Vec::new(), ..pool.clone() };
    assert!(matches!(run_search(&net, &mut store, &empty, &config, |_, _| {}), Err(Error::Config(_))));
    let no_val = SamplePool { val: Vec::new(), ..pool };
    assert!(matches!(run_search(&net, &mut store, &no_val, &config, |_, _| {}), Err(Error::Config(_))));
    assert!(matches!(
        SamplePool::generate(&s.cube, &LabelMap::empty(24, 24), &s.val, 4, 8, &mut common::rng(0)),
        Err(Error::EmptySupervision)
    ));
}
