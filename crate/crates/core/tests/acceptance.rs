//! One PASS/FAIL line per acceptance criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use hsinas::autodiff::{Graph, Mode, ParamStore};
use hsinas::compact::{CompactConfig, CompactNetwork};
use hsinas::data::{gen_synthetic, split_labels, HsiCube, LabelMap, SplitSpec, SyntheticSpec};
use hsinas::genotype::{viterbi_widths, Genotype};
use hsinas::inference::{gather_tiles, infer, plan_tiles, predict, run_plan, InferenceConfig, Model, Strategy};
use hsinas::metrics::{evaluate, ConfusionMatrix, Scores};
use hsinas::nn::{HeadConfig, StemConfig};
use hsinas::optim::{cosine_lr, poly_lr};
use hsinas::pipeline::{normalize_with, search_stage, train_stage};
use hsinas::search::{run_search, SamplePool, SearchConfig};
use hsinas::search_space::{build_op, count_params, SearchSpace};
use hsinas::supernet::{ArchValues, Sharing, Supernet, SupernetConfig};
use hsinas::train::FinalTrainConfig;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const GRAD_OP_TOL: f64 = 1e-4;
const GRAD_NET_TOL: f64 = 1e-3;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const VITERBI_CASES: usize = 1000;
const DERIVATION_CASES: usize = 100;
const TILING_CASES: usize = 50;
const STITCH_TOL: f64 = 1e-12;
const METRIC_TOL: f64 = 1e-12;
const SCHEDULE_TOL: f64 = 1e-9;
const WARMUP_EPOCHS: usize = 20;
const E2E_MIN_OA: f64 = 0.95;
const E2E_MSOV_SLACK: f64 = 0.005;
const E2E_BUDGET: Duration = Duration::from_secs(15 * 60);
const E2E_MAX_ITERS: usize = 2000;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let reports = gradient_suite(101, GRAD_INSTANCES);
    let mut worst = 0.0f64;
    for r in &reports {
        check(r.instances >= GRAD_INSTANCES, format!("{} ran {} instances", r.op, r.instances))?;
        check(r.max_rel < GRAD_OP_TOL, format!("{} rel err {:.2e}", r.op, r.max_rel))?;
        worst = worst.max(r.max_rel);
    }
    let spots = supernet_spot_check(7);
    check(spots.len() == 5, "expected five supernet spot checks")?;
    let mut worst_net = 0.0f64;
    for (name, e) in &spots {
        check(*e < GRAD_NET_TOL, format!("supernet {name} rel err {e:.2e}"))?;
        worst_net = worst_net.max(*e);
    }
    let elapsed = start.elapsed();
    check(elapsed < GRAD_BUDGET, format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} ops x {GRAD_INSTANCES}, worst {worst:.1e}; supernet worst {worst_net:.1e}; {:.1}s",
        reports.len(),
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let single = |space: SearchSpace, op: &str| count_params(space.op(op).unwrap(), 1, 1);
    let figures = [
        (single(SearchSpace::SymUd, "con_3"), 27),
        (single(SearchSpace::AsymUd, "udcon_3-5"), 45),
        (single(SearchSpace::AsymD, "con_3-5"), 14),
    ];
    for (got, want) in figures {
        check(got == want, format!("count {got}, expected {want}"))?;
    }
    let mut rng = rng(2);
    let mut checked = 0;
    for space in SearchSpace::ALL {
        for kind in space.ops() {
            for cin in [1, 4, 8, 16] {
                for cout in [1, 4, 8, 16] {
                    if kind.name == "skip_connection" && cin != cout {
                        continue;
                    }
                    let mut store = ParamStore::new();
                    build_op(&mut store, "op", kind, cin, cout, 0.2, &mut rng).map_err(|e| e.to_string())?;
                    let walked: usize = store.params().iter().filter(|p| p.role == hsinas::autodiff::Role::Weight).map(|p| p.value.len()).sum();
                    let want = count_params(kind, cin, cout);
                    check(walked == want, format!("{space} {} {cin}->{cout}: {walked} vs {want}", kind.name))?;
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("27/45/14 exact; {checked} allocations match"))
}

fn one_hot_beta(net: &Supernet, store: &mut ParamStore, pick: usize) {
    let mut arch = net.arch_values(store);
    for b in arch.beta.iter_mut().flatten().flatten() {
        let hot = pick.min(b.logits.len() - 1);
        for (k, v) in b.logits.iter_mut().enumerate() {
            *v = if k == hot { 0.0 } else { -1000.0 };
        }
    }
    net.set_arch_values(store, &arch).unwrap();
}

fn criterion_3() -> Outcome {
    let config = SupernetConfig { layers: 3, ..tiny_supernet_config(SearchSpace::AsymD) };
    let mut rng = rng(3);
    let mut store = ParamStore::new();
    let net = Supernet::new(&mut store, config, &mut rng).unwrap();
    let x = randn(&[1, 1, 9, 5, 5], &mut rng);
    for sharing in [Sharing::Shared, Sharing::Unshared] {
        net.reset_calls();
        let mut g = Graph::new(&mut store, Mode::Eval);
        let xv = g.constant(x.clone());
        net.forward_with(&mut g, xv, sharing).map_err(|e| e.to_string())?;
        for l in 1..3 {
            for w in 0..3 {
                let calls = net.cell(l, w).unwrap().calls();
                let sources = net.arch.beta[l][w].as_ref().unwrap().sources.len();
                let want = if sharing == Sharing::Shared { 1 } else { sources };
                check(calls == want, format!("{sharing:?} layer {l} width {w}: {calls} calls"))?;
            }
        }
        let middle = net.cell(2, 1).unwrap().calls();
        check(middle == if sharing == Sharing::Shared { 1 } else { 3 }, format!("{sharing:?} middle cell {middle} calls"))?;
    }
    for pick in 0..3 {
        for mode in [Mode::Train, Mode::Eval] {
            let mut s = store.clone();
            one_hot_beta(&net, &mut s, pick);
            let mut outs = Vec::new();
            for sharing in [Sharing::Shared, Sharing::Unshared] {
                let mut t = s.clone();
                let mut g = Graph::new(&mut t, mode);
                let xv = g.constant(x.clone());
                let (y, _) = net.forward_with(&mut g, xv, sharing).unwrap();
                outs.push(g.value(y).clone());
            }
            check(outs[0] == outs[1], format!("one-hot {pick} {mode:?} outputs differ"))?;
        }
    }
    Ok("shared 1 call per cell vs up to 3 unshared; one-hot outputs bit-identical".into())
}

fn criterion_4() -> Outcome {
    let mut rng = rng(4);
    let mut mismatches = 0;
    for case in 0..VITERBI_CASES {
        let t = random_trellis(1 + case % 6, &mut rng);
        let path = viterbi_widths(&t);
        if path != brute_force_path(&t) {
            mismatches += 1;
        }
        check(path.windows(2).all(|w| w[0].abs_diff(w[1]) <= 1), format!("case {case} jumps: {path:?}"))?;
    }
    check(mismatches == 0, format!("{mismatches} mismatches"))?;
    Ok(format!("{VITERBI_CASES} trellises, 0 mismatches"))
}

fn randomized(arch: &ArchValues, rng: &mut impl Rng) -> ArchValues {
    let mut a = arch.clone();
    for v in a.alpha.iter_mut().flatten() {
        *v = Distribution::<f64>::sample(&StandardNormal, rng);
    }
    for b in a.beta.iter_mut().flatten().flatten() {
        b.logits.iter_mut().for_each(|v| *v = Distribution::<f64>::sample(&StandardNormal, rng));
    }
    a
}

fn criterion_5() -> Outcome {
    let mut rng = rng(5);
    let config = SupernetConfig { nodes: 3, bands: 16, ..tiny_supernet_config(SearchSpace::AsymD) };
    let mut store = ParamStore::new();
    let net = Supernet::new(&mut store, config.clone(), &mut rng).unwrap();
    let base = net.arch_values(&store);
    let x = randn(&[1, 1, 16, 16, 16], &mut rng);
    for case in 0..DERIVATION_CASES {
        let arch = randomized(&base, &mut rng);
        let genotype = Genotype::derive(&arch, &config, 4);
        genotype.validate().map_err(|e| format!("case {case}: {e}"))?;
        for layer in &genotype.layers {
            check(layer.nodes.len() == 3, format!("case {case}: node count"))?;
            for [a, b] in &layer.nodes {
                check(a.source != b.source, format!("case {case}: repeated source"))?;
                check(a.op != "discarding" && b.op != "discarding", format!("case {case}: discard retained"))?;
            }
        }
        let mut s = ParamStore::new();
        let compact = CompactNetwork::new(&mut s, genotype, small_compact_config(3, 16), &mut rng).map_err(|e| e.to_string())?;
        let mut g = Graph::new(&mut s, Mode::Eval);
        let xv = g.constant(x.clone());
        let y = compact.forward(&mut g, xv).map_err(|e| format!("case {case}: {e}"))?;
        check(g.shape(y) == [1, 3, 16, 16], format!("case {case}: shape {:?}", g.shape(y)))?;
    }
    Ok(format!("{DERIVATION_CASES} genotypes valid and runnable on 16x16x16"))
}

fn random_cube(h: usize, w: usize, b: usize, rng: &mut impl Rng) -> HsiCube {
    HsiCube::new(h, w, b, (0..h * w * b).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn criterion_6() -> Outcome {
    let mut rng = rng(6);
    let mut non_divisible = 0;
    for case in 0..TILING_CASES {
        let scene = (rng.random_range(1..70), rng.random_range(1..70));
        let window = rng.random_range(1..40);
        let stride = rng.random_range(1..=window);
        non_divisible += (scene.0 % stride != 0 || scene.1 % stride != 0) as usize;
        let plan = plan_tiles(scene, window, stride).unwrap();
        let cov = plan.coverage(scene);
        check(cov == brute_coverage(&plan.anchors, plan.window, scene), format!("case {case}: coverage differs"))?;
        check(cov.iter().all(|&c| c >= 1), format!("case {case}: uncovered pixel"))?;
    }
    check(non_divisible > 0, "no non-divisible cases drawn")?;

    let (net, mut store) = small_compact(3, 9, 6);
    let cube = random_cube(32, 48, 9, &mut rng);
    let plain = infer(&net, &mut store, &cube, Strategy::Plain, &InferenceConfig { window: 16, ..InferenceConfig::default() }).unwrap();
    let plane = 32 * 48;
    for r0 in (0..32).step_by(16) {
        for c0 in (0..48).step_by(16) {
            let tile = predict(&net, &mut store, gather_tiles(&cube, &[(r0, c0)], (16, 16))).unwrap();
            for k in 0..3 {
                for y in 0..16 {
                    for x in 0..16 {
                        let a = plain.probabilities[k * plane + (r0 + y) * 48 + c0 + x];
                        check(a == tile.data()[(k * 16 + y) * 16 + x], format!("partition broken at tile ({r0}, {c0})"))?;
                    }
                }
            }
        }
    }

    let cube = random_cube(40, 52, 9, &mut rng);
    let config = InferenceConfig::default();
    let msov = infer(&net, &mut store, &cube, Strategy::MsOv, &config).unwrap();
    let mut mean = vec![0.0; 3 * 40 * 52];
    for &s in &config.scales {
        let plan = plan_tiles((40, 52), s, s / 2).unwrap();
        let (map, _) = run_plan(&net, &mut store, &cube, &plan, 1).unwrap();
        for (m, v) in mean.iter_mut().zip(map.averaged().unwrap()) {
            *m += v / config.scales.len() as f64;
        }
    }
    let diff = msov.probabilities.iter().zip(&mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    check(diff < STITCH_TOL, format!("MS+OV differs from per-scale mean by {diff:.2e}"))?;
    Ok(format!("{TILING_CASES} coverage triples ({non_divisible} non-divisible); partition exact; MS+OV diff {diff:.1e}"))
}

fn criterion_7() -> Outcome {
    let cases: Vec<(Vec<Vec<u64>>, (f64, f64, f64))> = vec![
        (vec![vec![3, 0], vec![0, 3]], (1.0, 1.0, 1.0)),
        (vec![vec![2, 1], vec![1, 2]], (2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0)),
        (vec![vec![5, 0], vec![5, 0]], (0.5, 0.5, 0.0)),
        (vec![vec![0, 4], vec![4, 0]], (0.0, 0.0, -1.0)),
        (vec![vec![4, 1], vec![1, 4]], (0.8, 0.8, 0.6)),
        (vec![vec![8, 2], vec![1, 1]], (0.75, 0.65, 0.25)),
        (vec![vec![2, 1, 0], vec![0, 2, 1], vec![1, 0, 2]], (2.0 / 3.0, 2.0 / 3.0, 0.5)),
        (vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]], (1.0, 1.0, 1.0)),
        // pe = (4 * 3 + 2 * 2) / 36, so kappa = (30 - 16) / (36 - 16)
        (vec![vec![3, 1, 0], vec![0, 0, 0], vec![0, 0, 2]], (5.0 / 6.0, 0.875, 0.7)),
        (vec![vec![3, 3], vec![1, 1]], (0.5, 0.5, 0.0)),
        (vec![vec![7]], (1.0, 1.0, 1.0)),
        (vec![vec![6, 0, 0], vec![0, 0, 0], vec![0, 0, 0]], (1.0, 1.0, 1.0)),
    ];
    for (rows, (oa, aa, k)) in &cases {
        let s = ConfusionMatrix::from_rows(rows).unwrap().summary().map_err(|e| e.to_string())?;
        let ok = (s.oa - oa).abs() < METRIC_TOL && (s.aa - aa).abs() < METRIC_TOL && (s.kappa - k).abs() < METRIC_TOL;
        check(ok, format!("{rows:?}: got {s:?}, expected ({oa}, {aa}, {k})"))?;
    }
    let mut rng = rng(7);
    let mut maps = 0;
    while maps < 50 {
        let k = rng.random_range(1..6u16);
        let reference = LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(0..=k)).collect()).unwrap();
        let predicted = LabelMap::new(16, 16, (0..256).map(|_| rng.random_range(1..=k)).collect()).unwrap();
        if reference.labeled_count() == 0 {
            continue;
        }
        let Scores { oa, aa, kappa } = evaluate(&reference, &predicted, k as usize).unwrap();
        let (bo, ba, bk) = brute_scores(&reference, &predicted, k as usize);
        check((oa - bo).abs() < METRIC_TOL && (aa - ba).abs() < METRIC_TOL && (kappa - bk).abs() < METRIC_TOL, "random map disagrees with brute force")?;
        maps += 1;
    }
    Ok(format!("{} constructed matrices; {maps} random maps match brute force", cases.len()))
}

fn tiny_scene(seed: u64) -> (HsiCube, LabelMap, LabelMap, LabelMap) {
    let spec = SyntheticSpec { height: 24, width: 24, bands: 9, classes: 3, noise_sigma: 0.1, seed };
    let (mut cube, labels) = gen_synthetic(spec).unwrap();
    let (train, val, test) = split_labels(&labels, SplitSpec { train_per_class: 15, val_per_class: 10, seed }).unwrap();
    normalize_with(&mut cube, &train).unwrap();
    (cube, train, val, test)
}

fn arch_bits(a: &ArchValues) -> Vec<u64> {
    let mut out: Vec<u64> = a.alpha.iter().flatten().map(|v| v.to_bits()).collect();
    for b in a.beta.iter().flatten().flatten() {
        out.extend(b.logits.iter().map(|v| v.to_bits()));
    }
    out
}

fn criterion_9() -> Outcome {
    let ends = [
        (cosine_lr(0.0, 0.025, 0.001, 100.0), 0.025),
        (cosine_lr(100.0, 0.025, 0.001, 100.0), 0.001),
        (poly_lr(0.0, 0.1, 5000.0, 0.9), 0.1),
        (poly_lr(5000.0, 0.1, 5000.0, 0.9), 0.0),
    ];
    for (got, want) in ends {
        check((got - want).abs() < SCHEDULE_TOL, format!("schedule endpoint {got} vs {want}"))?;
    }
    let (cube, train, val, _) = tiny_scene(9);
    let config = SearchConfig {
        epochs: WARMUP_EPOCHS + 1,
        warmup_epochs: WARMUP_EPOCHS,
        pool_size: 4,
        patch_size: 8,
        seed: 9,
        ..SearchConfig::default()
    };
    let mut rng = rng(9);
    let mut store = ParamStore::new();
    let net = Supernet::new(&mut store, tiny_supernet_config(SearchSpace::AsymD), &mut rng).unwrap();
    let pool = SamplePool::generate(&cube, &train, &val, config.pool_size, config.patch_size, &mut rng).unwrap();
    let initial = arch_bits(&net.arch_values(&store));
    let mut frozen = 0;
    let mut moved = false;
    run_search(&net, &mut store, &pool, &config, |r, s| {
        let same = arch_bits(&net.arch_values(s)) == initial;
        if r.epoch <= WARMUP_EPOCHS && same {
            frozen += 1;
        }
        if r.epoch > WARMUP_EPOCHS {
            moved = !same;
        }
    })
    .map_err(|e| e.to_string())?;
    check(frozen == WARMUP_EPOCHS, format!("architecture changed during warm-up ({frozen} frozen epochs)"))?;
    check(moved, "architecture never moved after warm-up")?;
    Ok(format!("cosine and poly endpoints exact; alpha and beta frozen for {WARMUP_EPOCHS} epochs"))
}

struct PipelineResult {
    genotype: String,
    plain: Scores,
    msov: Scores,
    elapsed: Duration,
    iterations: usize,
}

struct PipelineSetup {
    scene: SyntheticSpec,
    split: SplitSpec,
    supernet: SupernetConfig,
    search: SearchConfig,
    final_width: usize,
    compact: CompactConfig,
    train: FinalTrainConfig,
}

fn run_pipeline(p: &PipelineSetup, strategies: bool) -> Result<PipelineResult, String> {
    let start = Instant::now();
    let (mut cube, labels) = gen_synthetic(p.scene).map_err(|e| e.to_string())?;
    let (train, val, test) = split_labels(&labels, p.split).map_err(|e| e.to_string())?;
    normalize_with(&mut cube, &train).map_err(|e| e.to_string())?;
    let searched = search_stage(&cube, &train, &val, p.supernet.clone(), &p.search, p.final_width, |_, _| {}).map_err(|e| e.to_string())?;
    let genotype = searched.genotype.to_text();
    let mut trained = train_stage(&cube, &train, &val, searched.genotype, p.compact.clone(), &p.train, |_| {}).map_err(|e| e.to_string())?;
    let iterations = trained.outcome.history.last().map_or(0, |r| r.iteration);
    let classes = p.scene.classes;
    let mut score = |s: Strategy| -> Result<Scores, String> {
        let r = infer(&trained.network, &mut trained.store, &cube, s, &InferenceConfig::default()).map_err(|e| e.to_string())?;
        evaluate(&test, &r.class_map, classes).map_err(|e| e.to_string())
    };
    let plain = score(Strategy::Plain)?;
    let msov = if strategies { score(Strategy::MsOv)? } else { plain };
    Ok(PipelineResult {
        genotype,
        plain,
        msov,
        elapsed: start.elapsed(),
        iterations,
    })
}

fn desk_setup() -> PipelineSetup {
    let stem = StemConfig { channels: 8, ..StemConfig::default() };
    let head = HeadConfig { compress_channels: 16, hidden_channels: 16 };
    PipelineSetup {
        scene: SyntheticSpec { height: 64, width: 64, bands: 16, classes: 4, noise_sigma: 0.1, seed: 7 },
        split: SplitSpec { train_per_class: 20, val_per_class: 10, seed: 7 },
        supernet: SupernetConfig {
            layers: 2,
            nodes: 3,
            base_width: 4,
            stem,
            head,
            ..SupernetConfig::new(4, 16)
        },
        search: SearchConfig {
            epochs: 30,
            warmup_epochs: 10,
            pool_size: 16,
            patch_size: 16,
            seed: 7,
            ..SearchConfig::default()
        },
        final_width: 8,
        compact: CompactConfig { stem, head, ..CompactConfig::new(4, 16) },
        train: FinalTrainConfig {
            batch_size: 4,
            patch_size: 16,
            max_iters: 600,
            eval_every: 50,
            patience: 6,
            seed: 7,
            ..FinalTrainConfig::default()
        },
    }
}

fn criterion_8() -> Outcome {
    let setup = desk_setup();
    check(setup.train.max_iters <= E2E_MAX_ITERS, "final training exceeds the iteration cap")?;
    let r = run_pipeline(&setup, true)?;
    check(r.plain.oa >= E2E_MIN_OA, format!("plain test OA {:.4}", r.plain.oa))?;
    check(r.msov.oa >= r.plain.oa - E2E_MSOV_SLACK, format!("MS+OV OA {:.4} vs plain {:.4}", r.msov.oa, r.plain.oa))?;
    check(r.elapsed < E2E_BUDGET, format!("took {:?}", r.elapsed))?;
    Ok(format!(
        "plain {}; MS+OV {}; {} iters; {:.0}s",
        r.plain,
        r.msov,
        r.iterations,
        r.elapsed.as_secs_f64()
    ))
}

fn tiny_setup() -> PipelineSetup {
    PipelineSetup {
        scene: SyntheticSpec { height: 24, width: 24, bands: 9, classes: 3, noise_sigma: 0.1, seed: 10 },
        split: SplitSpec { train_per_class: 15, val_per_class: 10, seed: 10 },
        supernet: tiny_supernet_config(SearchSpace::AsymD),
        search: SearchConfig {
            epochs: 4,
            warmup_epochs: 1,
            pool_size: 8,
            patch_size: 12,
            seed: 10,
            ..SearchConfig::default()
        },
        final_width: 4,
        compact: small_compact_config(3, 9),
        train: FinalTrainConfig {
            batch_size: 4,
            patch_size: 12,
            max_iters: 40,
            eval_every: 10,
            patience: 2,
            seed: 10,
            ..FinalTrainConfig::default()
        },
    }
}

fn criterion_10() -> Outcome {
    let setup = tiny_setup();
    let a = run_pipeline(&setup, true)?;
    let b = run_pipeline(&setup, true)?;
    check(a.genotype == b.genotype, "genotype text differs between runs")?;
    check(a.plain == b.plain && a.msov == b.msov, format!("metrics differ: {} vs {}", a.plain, b.plain))?;
    Ok(format!("identical genotype and metrics ({})", a.plain))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", criterion_1),
        ("parameter arithmetic", criterion_2),
        ("cell sharing", criterion_3),
        ("Viterbi oracle", criterion_4),
        ("derivation validity", criterion_5),
        ("tiling and stitching", criterion_6),
        ("metrics oracle", criterion_7),
        ("end-to-end desk run", criterion_8),
        ("schedules and warm-up", criterion_9),
        ("determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
            Err(why) => {
                println!("criterion {n:>2} FAIL {name}: {why}");
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
