//! Independent oracles shared by the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

use hsinas::autodiff::{ConvSpec, Graph, Mode, ParamStore, Var};
use hsinas::data::LabelMap;
use hsinas::compact::{CompactConfig, CompactNetwork};
use hsinas::genotype::{Edge, Genotype, LayerGenotype, WidthTrellis};
use hsinas::nn::{HeadConfig, StemConfig};
use hsinas::search_space::SearchSpace;
use hsinas::supernet::{Supernet, SupernetConfig};
use hsinas::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

/// Normal values pushed at least `gap` away from zero.
pub fn randn_off_zero(shape: &[usize], gap: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        if v >= 0.0 {
            v + gap
        } else {
            v - gap
        }
    })
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

type Op = dyn Fn(&mut Graph<'_>, &[Var]) -> Var;

/// Scalar probe `sum(out * probe)` of `f` on leaf inputs.
fn probe_loss(store: &mut ParamStore, mode: Mode, inputs: &[Tensor], probe: &Tensor, f: &Op) -> f64 {
    let mut g = Graph::new(store, mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Relative error between backpropagated and central-difference gradients of
/// `f` with respect to every input, as one stacked vector.
pub fn check_op(inputs: &[Tensor], mode: Mode, f: &Op, rng: &mut impl Rng) -> f64 {
    let mut store = ParamStore::new();
    check_op_in(&mut store, inputs, mode, f, rng)
}

pub fn check_op_in(store: &mut ParamStore, inputs: &[Tensor], mode: Mode, f: &Op, rng: &mut impl Rng) -> f64 {
    let (analytic, probe) = {
        let mut g = Graph::new(store, mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let probe = randn(g.shape(out), rng);
        let p = g.constant(probe.clone());
        let prod = g.mul(out, p).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for (v, t) in vars.iter().zip(inputs) {
            match grads.wrt(*v) {
                Some(gr) => analytic.extend_from_slice(gr.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        (analytic, probe)
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let up = probe_loss(store, mode, &work, &probe, f);
            work[i].data_mut()[j] = orig - FD_STEP;
            let down = probe_loss(store, mode, &work, &probe, f);
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

pub struct GradReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel: f64,
}

fn conv_case(rng: &mut ChaCha8Rng, two_d: bool) -> (Vec<Tensor>, ConvSpec) {
    loop {
        let batch = rng.random_range(1..=2);
        let groups = rng.random_range(1..=2);
        let cin = groups * rng.random_range(1..=2);
        let cout = groups * rng.random_range(1..=2);
        let dims = [rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(2..=5)];
        let kernel = [rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let stride = [rng.random_range(1..=2), rng.random_range(1..=2), rng.random_range(1..=2)];
        let padding = [rng.random_range(0..=1), rng.random_range(0..=1), rng.random_range(0..=1)];
        let axes = if two_d { 1..3 } else { 0..3 };
        if axes.clone().any(|a| dims[a] + 2 * padding[a] < kernel[a]) {
            continue;
        }
        let spec = ConvSpec::new(stride, padding).with_groups(groups);
        let (x, w) = if two_d {
            (vec![batch, cin, dims[1], dims[2]], vec![cout, cin / groups, kernel[1], kernel[2]])
        } else {
            (
                vec![batch, cin, dims[0], dims[1], dims[2]],
                vec![cout, cin / groups, kernel[0], kernel[1], kernel[2]],
            )
        };
        return (vec![randn(&x, rng), randn(&w, rng)], spec);
    }
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    ]
}

/// Finite-difference checks of every differentiable operation, `instances`
/// random cases each.
pub fn gradient_suite(seed: u64, instances: usize) -> Vec<GradReport> {
    let mut rng = rng(seed);
    let mut reports = Vec::new();
    let mut run = |op: &'static str, rng: &mut ChaCha8Rng, case: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let max_rel = (0..instances).map(|_| case(rng)).fold(0.0, f64::max);
        reports.push(GradReport { op, instances, max_rel });
    };

    run("conv3d", &mut rng, &mut |rng| {
        let (inputs, spec) = conv_case(rng, false);
        check_op(&inputs, Mode::Train, &move |g, v| g.conv3d(v[0], v[1], spec).unwrap(), rng)
    });
    run("conv2d", &mut rng, &mut |rng| {
        let (inputs, spec) = conv_case(rng, true);
        check_op(&inputs, Mode::Train, &move |g, v| g.conv2d(v[0], v[1], spec).unwrap(), rng)
    });
    run("separable_conv3d", &mut rng, &mut |rng| {
        let c = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let k = [rng.random_range(1..=2) * 2 - 1, rng.random_range(1..=2) * 2 - 1, rng.random_range(1..=2) * 2 - 1];
        let x = randn(&[rng.random_range(1..=2), c, 3, 4, 3], rng);
        let dw = randn(&[c, 1, k[0], k[1], k[2]], rng);
        let pw = randn(&[cout, c, 1, 1, 1], rng);
        let spec = ConvSpec::same(k);
        check_op(&[x, dw, pw], Mode::Train, &move |g, v| g.separable_conv3d(v[0], v[1], v[2], spec).unwrap(), rng)
    });
    for (name, mode) in [("batch_norm/train", Mode::Train), ("batch_norm/eval", Mode::Eval)] {
        run(name, &mut rng, &mut |rng| {
            let mut shape = small_shape(rng);
            shape[0] = 2;
            let c = shape[1];
            let mut store = ParamStore::new();
            let mean = store.add_buffer("m", randn(&[c], rng));
            let var_init = Tensor::from_fn(vec![c], |_| rng.random_range(0.5..2.0));
            let var = store.add_buffer("v", var_init);
            let inputs = [randn(&shape, rng), randn(&[c], rng), randn(&[c], rng)];
            check_op_in(
                &mut store,
                &inputs,
                mode,
                &move |g, v| g.batch_norm(v[0], v[1], v[2], mean, var).unwrap(),
                rng,
            )
        });
    }
    run("leaky_relu", &mut rng, &mut |rng| {
        let x = randn_off_zero(&small_shape(rng), 1e-2, rng);
        let slope = rng.random_range(0.05..0.5);
        check_op(&[x], Mode::Train, &move |g, v| g.leaky_relu(v[0], slope).unwrap(), rng)
    });
    run("spectral_avg", &mut rng, &mut |rng| {
        let x = randn(&small_shape(rng), rng);
        check_op(&[x], Mode::Train, &|g, v| g.spectral_avg(v[0]).unwrap(), rng)
    });
    run("softmax", &mut rng, &mut |rng| {
        let shape = small_shape(rng);
        let axis = rng.random_range(0..shape.len());
        let x = randn(&shape, rng);
        check_op(&[x], Mode::Train, &move |g, v| g.softmax(v[0], axis).unwrap(), rng)
    });
    run("masked_cross_entropy", &mut rng, &mut |rng| {
        let (b, k, h, w) = (rng.random_range(1..=2), rng.random_range(2..=4), rng.random_range(1..=3), rng.random_range(1..=3));
        let mut labels: Vec<u16> = (0..b * h * w).map(|_| rng.random_range(0..=k as u16)).collect();
        labels[0] = 1;
        let x = randn(&[b, k, h, w], rng);
        check_op(&[x], Mode::Train, &move |g, v| g.masked_cross_entropy(v[0], &labels).unwrap(), rng)
    });
    run("weighted_sum", &mut rng, &mut |rng| {
        let shape = small_shape(rng);
        let n = rng.random_range(1..=4);
        let wlen = rng.random_range(1..=6);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..wlen)).collect();
        let mut inputs: Vec<Tensor> = (0..n).map(|_| randn(&shape, rng)).collect();
        inputs.push(randn(&[wlen], rng));
        check_op(
            &inputs,
            Mode::Train,
            &move |g, v| g.weighted_sum(&v[..n], v[n], &indices).unwrap(),
            rng,
        )
    });
    run("add", &mut rng, &mut |rng| {
        let shape = small_shape(rng);
        let inputs = [randn(&shape, rng), randn(&shape, rng)];
        check_op(&inputs, Mode::Train, &|g, v| g.add(v[0], v[1]).unwrap(), rng)
    });
    run("mul", &mut rng, &mut |rng| {
        let shape = small_shape(rng);
        let inputs = [randn(&shape, rng), randn(&shape, rng)];
        check_op(&inputs, Mode::Train, &|g, v| g.mul(v[0], v[1]).unwrap(), rng)
    });
    run("sum", &mut rng, &mut |rng| {
        let x = randn(&small_shape(rng), rng);
        check_op(&[x], Mode::Train, &|g, v| g.sum(v[0]), rng)
    });
    run("concat_channels", &mut rng, &mut |rng| {
        let mut shape = small_shape(rng);
        let n = rng.random_range(2..=3);
        let inputs: Vec<Tensor> = (0..n)
            .map(|_| {
                shape[1] = rng.random_range(1..=3);
                randn(&shape, rng)
            })
            .collect();
        check_op(&inputs, Mode::Train, &|g, v| g.concat_channels(v).unwrap(), rng)
    });
    run("add_channel_bias", &mut rng, &mut |rng| {
        let (b, c, h, w) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
        let inputs = [randn(&[b, c, h, w], rng), randn(&[c], rng)];
        check_op(&inputs, Mode::Train, &|g, v| g.add_channel_bias(v[0], v[1]).unwrap(), rng)
    });
    reports
}

/// A supernet small enough for finite differences over whole parameters.
pub fn tiny_supernet_config(space: SearchSpace) -> SupernetConfig {
    SupernetConfig {
        layers: 2,
        nodes: 2,
        base_width: 2,
        space,
        stem: StemConfig {
            channels: 3,
            ..StemConfig::default()
        },
        head: HeadConfig {
            compress_channels: 3,
            hidden_channels: 3,
        },
        ..SupernetConfig::new(3, 9)
    }
}

fn supernet_loss(net: &Supernet, store: &mut ParamStore, x: &Tensor, labels: &[u16]) -> f64 {
    let mut g = Graph::new(store, Mode::Train);
    let xv = g.constant(x.clone());
    let logits = net.forward(&mut g, xv).unwrap();
    let loss = g.masked_cross_entropy(logits, labels).unwrap();
    g.value(loss).data()[0]
}

/// Relative gradient error of the full supernet loss at one random entry of
/// each of five parameters: an operation logit row, a width logit vector, a
/// stem kernel, a cell kernel and the classifier bias.
pub fn supernet_spot_check(seed: u64) -> Vec<(String, f64)> {
    let mut rng = rng(seed);
    let mut store = ParamStore::new();
    let net = Supernet::new(&mut store, tiny_supernet_config(SearchSpace::AsymD), &mut rng).unwrap();
    // Larger architecture logits than the default init make the mixing visible.
    for p in store.params_mut() {
        if p.role.is_arch() {
            for v in p.value.data_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
    }
    let x = randn(&[2, 1, 9, 5, 5], &mut rng);
    let labels: Vec<u16> = (0..2 * 25).map(|i| (i % 4) as u16).collect();
    let find = |pred: &dyn Fn(&str) -> bool| {
        store
            .params()
            .iter()
            .position(|p| pred(&p.name))
            .expect("parameter present")
    };
    let targets = [
        find(&|n| n == "arch.alpha.layer0"),
        find(&|n| n.starts_with("arch.beta.layer1")),
        find(&|n| n == "stem.conv1.weight"),
        find(&|n| n.starts_with("layer1") && n.contains("con_3-3") && n.ends_with("weight")),
        find(&|n| n == "head.conv2.bias"),
    ];
    store.zero_grad();
    {
        let mut g = Graph::new(&mut store, Mode::Train);
        let xv = g.constant(x.clone());
        let logits = net.forward(&mut g, xv).unwrap();
        let loss = g.masked_cross_entropy(logits, &labels).unwrap();
        g.backward(loss).unwrap();
    }
    let mut out = Vec::new();
    for &t in &targets {
        let j = rng.random_range(0..store.params()[t].value.len());
        let analytic = store.params()[t].grad.data()[j];
        let orig = store.params()[t].value.data()[j];
        store.params_mut()[t].value.data_mut()[j] = orig + FD_STEP;
        let up = supernet_loss(&net, &mut store, &x, &labels);
        store.params_mut()[t].value.data_mut()[j] = orig - FD_STEP;
        let down = supernet_loss(&net, &mut store, &x, &labels);
        store.params_mut()[t].value.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        out.push((format!("{}[{j}]", store.params()[t].name), rel_error(&[analytic], &[numeric])));
    }
    out
}

/// Random width trellis with `layers` layers over three states, the first
/// restricted to two.
pub fn random_trellis(layers: usize, rng: &mut impl Rng) -> WidthTrellis {
    let states = 3;
    let mut initial = vec![0.0; states];
    let a: f64 = rng.random_range(0.0..1.0);
    initial[0] = a;
    initial[1] = 1.0 - a;
    let mut transitions = Vec::new();
    for _ in 1..layers {
        let mut t = vec![vec![None; states]; states];
        for (target, _) in (0..states).enumerate() {
            let sources: Vec<usize> = (0..states).filter(|&s| s.abs_diff(target) <= 1).collect();
            let raw: Vec<f64> = sources.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let z: f64 = raw.iter().sum();
            for (s, r) in sources.iter().zip(raw) {
                t[*s][target] = Some(r / z);
            }
        }
        transitions.push(t);
    }
    WidthTrellis {
        states,
        initial,
        transitions,
    }
}

/// Best path over all legal width sequences, by sum of floored
/// log-probabilities. Paths are enumerated in lexicographic order, and a later
/// path replaces the incumbent only when strictly better, or when equal and
/// smaller in reverse-lexicographic order (final width first).
pub fn brute_force_path(t: &WidthTrellis) -> Vec<usize> {
    let layers = t.transitions.len() + 1;
    let score = |p: &[usize]| -> Option<f64> {
        let ln = |v: f64| v.max(1e-12).ln();
        if t.initial[p[0]] <= 0.0 {
            return None;
        }
        let mut s = ln(t.initial[p[0]]);
        for l in 1..p.len() {
            s += ln(t.transitions[l - 1][p[l - 1]][p[l]]?);
        }
        Some(s)
    };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut path = vec![0usize; layers];
    loop {
        if let Some(s) = score(&path) {
            let better = match &best {
                None => true,
                Some((bs, bp)) => {
                    s > *bs || (s == *bs && path.iter().rev().lt(bp.iter().rev()))
                }
            };
            if better {
                best = Some((s, path.clone()));
            }
        }
        let mut i = layers;
        loop {
            if i == 0 {
                return best.expect("some legal path").1;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < t.states {
                break;
            }
            path[i] = 0;
        }
    }
}

/// Per-pixel window counts by testing each pixel against every window.
pub fn brute_coverage(anchors: &[(usize, usize)], window: (usize, usize), scene: (usize, usize)) -> Vec<u32> {
    let mut out = Vec::with_capacity(scene.0 * scene.1);
    for y in 0..scene.0 {
        for x in 0..scene.1 {
            let n = anchors
                .iter()
                .filter(|&&(r, c)| y >= r && y < r + window.0 && x >= c && x < c + window.1)
                .count();
            out.push(n as u32);
        }
    }
    out
}

/// OA, AA and kappa by direct pixel counting.
pub fn brute_scores(reference: &LabelMap, predicted: &LabelMap, classes: usize) -> (f64, f64, f64) {
    let pairs: Vec<(u16, u16)> = reference
        .labels
        .iter()
        .zip(&predicted.labels)
        .filter(|(r, _)| **r != 0)
        .map(|(r, p)| (*r, *p))
        .collect();
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(r, p)| r == p).count() as f64;
    let oa = correct / n;
    let mut recalls = Vec::new();
    let mut pe = 0.0;
    for c in 1..=classes as u16 {
        let in_class = pairs.iter().filter(|(r, _)| *r == c).count() as f64;
        let predicted_c = pairs.iter().filter(|(_, p)| *p == c).count() as f64;
        if in_class > 0.0 {
            recalls.push(pairs.iter().filter(|(r, p)| *r == c && *p == c).count() as f64 / in_class);
        }
        pe += in_class * predicted_c / (n * n);
    }
    let aa = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let kappa = if pe >= 1.0 {
        if oa >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    (oa, aa, kappa)
}

/// A genotype whose every node uses `op` on sources 0 and 1.
pub fn uniform_genotype(space: SearchSpace, op: &str, widths: &[usize], nodes: usize, base_width: usize) -> Genotype {
    let edge = |source| Edge {
        source,
        op: op.to_string(),
    };
    Genotype {
        space,
        nodes,
        base_width,
        width_factors: vec![1.0, 1.5, 2.0],
        layers: widths
            .iter()
            .map(|&width| LayerGenotype {
                width,
                nodes: (0..nodes).map(|_| [edge(0), edge(1)]).collect(),
            })
            .collect(),
    }
}

pub fn small_compact_config(classes: usize, bands: usize) -> CompactConfig {
    CompactConfig {
        stem: StemConfig {
            channels: 4,
            ..StemConfig::default()
        },
        head: HeadConfig {
            compress_channels: 4,
            hidden_channels: 4,
        },
        ..CompactConfig::new(classes, bands)
    }
}

/// A randomly initialized two-layer compact network with convolutional ops.
pub fn small_compact(classes: usize, bands: usize, seed: u64) -> (CompactNetwork, ParamStore) {
    let genotype = uniform_genotype(SearchSpace::AsymD, "con_3-3", &[0, 1], 2, 4);
    let mut store = ParamStore::new();
    let net = CompactNetwork::new(&mut store, genotype, small_compact_config(classes, bands), &mut rng(seed)).unwrap();
    (net, store)
}
