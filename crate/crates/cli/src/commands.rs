use std::fs;
use std::path::{Path, PathBuf};

use hsinas::checkpoint::{partial_path, write_atomic, Checkpoint, HistoryLog};
use hsinas::compact::CompactConfig;
use hsinas::data::{gen_synthetic, split_labels, HsiCube, LabelMap, SplitSpec, SyntheticSpec};
use hsinas::genotype::Genotype;
use hsinas::inference::{infer as run_inference, InferenceConfig, Strategy};
use hsinas::metrics::evaluate;
use hsinas::nn::{HeadConfig, StemConfig};
use hsinas::optim::{AdamConfig, SgdConfig};
use hsinas::pipeline::{normalize_with, search_stage, train_stage};
use hsinas::search::SearchConfig;
use hsinas::search_space::SearchSpace;
use hsinas::supernet::SupernetConfig;
use hsinas::train::FinalTrainConfig;

use crate::config::Settings;
use crate::{CliError, EvalArgs, GenArgs, InferArgs, SearchArgs, SplitArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn existing_file(path: PathBuf, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn output_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::Config(format!("cannot create `{}`: {e}", path.display())))
}

fn label_dir(dir: PathBuf) -> Result<(PathBuf, PathBuf)> {
    let train = existing_file(dir.join("train.lbl"), "training map")?;
    let val = existing_file(dir.join("val.lbl"), "validation map")?;
    Ok((train, val))
}

fn parse_size(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Config(format!("size `{s}` is not HxWxB")))?;
    match parts[..] {
        [h, w, b] => Ok((h, w, b)),
        _ => Err(CliError::Config(format!("size `{s}` is not HxWxB"))),
    }
}

pub fn gen(a: GenArgs) -> Result<()> {
    let s = Settings::load("gen", a.config.as_deref())?;
    let out: PathBuf = s.require("out", a.out)?;
    let (height, width, bands) = parse_size(&s.or("size", a.size, "64x64x16".to_string())?)?;
    let spec = SyntheticSpec {
        height,
        width,
        bands,
        classes: s.or("classes", a.classes, 4)?,
        noise_sigma: s.or("noise", a.noise, 0.1)?,
        seed: s.or("seed", a.seed, 0)?,
    };
    output_dir(&out)?;
    let (cube, labels) = gen_synthetic(spec)?;
    cube.save(&out.join("cube.hsi"))?;
    labels.save(&out.join("labels.lbl"))?;
    println!(
        "wrote {height}x{width}x{bands} cube with {} classes to {}",
        spec.classes,
        out.display()
    );
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let s = Settings::load("split", a.config.as_deref())?;
    let labels = existing_file(s.require("labels", a.labels)?, "label map")?;
    let out = match s.get("out", a.out)? {
        Some(o) => o,
        None => labels.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let spec = SplitSpec {
        train_per_class: s.or("train_per_class", a.train_per_class, 20)?,
        val_per_class: s.or("val_per_class", a.val_per_class, 10)?,
        seed: s.or("seed", a.seed, 0)?,
    };
    output_dir(&out)?;
    let map = LabelMap::load(&labels)?;
    let (train, val, test) = split_labels(&map, spec)?;
    for (name, m) in [("train", &train), ("val", &val), ("test", &test)] {
        m.save(&out.join(format!("{name}.lbl")))?;
    }
    println!(
        "train {} / val {} / test {} labeled pixels in {}",
        train.labeled_count(),
        val.labeled_count(),
        test.labeled_count(),
        out.display()
    );
    Ok(())
}

/// Load the cube and both maps, and standardize with training statistics.
fn load_scene(cube: &Path, train: &Path, val: &Path) -> Result<(HsiCube, LabelMap, LabelMap)> {
    let mut cube = HsiCube::load(cube)?;
    let train = LabelMap::load(train)?;
    let val = LabelMap::load(val)?;
    cube.check_map(&train)?;
    cube.check_map(&val)?;
    normalize_with(&mut cube, &train)?;
    Ok((cube, train, val))
}

/// Stream records into `<path>.partial`, renamed into place by `finish`.
struct History {
    log: HistoryLog,
    path: PathBuf,
}

impl History {
    fn create(path: PathBuf) -> Result<Self> {
        Ok(Self {
            log: HistoryLog::create(&partial_path(&path))?,
            path,
        })
    }

    fn finish(self) -> Result<()> {
        drop(self.log);
        let tmp = partial_path(&self.path);
        fs::rename(&tmp, &self.path).map_err(|e| CliError::Config(format!("cannot rename `{}`: {e}", tmp.display())))
    }
}

fn seed_required(s: &Settings, flag: Option<u64>) -> Result<u64> {
    s.get("seed", flag)?
        .ok_or_else(|| CliError::Config("a seed is required: pass `--seed` or set it in the config file".into()))
}

pub fn search(a: SearchArgs) -> Result<()> {
    let s = Settings::load("search", a.config.as_deref())?;
    let seed = seed_required(&s, a.seed)?;
    let cube_path = existing_file(s.require("cube", a.cube)?, "cube")?;
    let (train_path, val_path) = label_dir(s.require("labels", a.labels)?)?;
    let out: PathBuf = s.require("out", a.out)?;
    let defaults = SearchConfig::default();
    let config = SearchConfig {
        epochs: s.or("epochs", a.epochs, defaults.epochs)?,
        warmup_epochs: s.or("warmup_epochs", a.warmup_epochs, defaults.warmup_epochs)?,
        batch_size: s.or("batch_size", a.batch_size, defaults.batch_size)?,
        pool_size: s.or("pool_size", a.pool_size, defaults.pool_size)?,
        patch_size: s.or("patch_size", a.patch_size, defaults.patch_size)?,
        lr_max: s.or("lr_max", a.lr_max, defaults.lr_max)?,
        lr_min: s.or("lr_min", a.lr_min, defaults.lr_min)?,
        theta: SgdConfig {
            momentum: s.or("momentum", a.momentum, defaults.theta.momentum)?,
            weight_decay: s.or("weight_decay", a.weight_decay, defaults.theta.weight_decay)?,
        },
        arch: AdamConfig {
            lr: s.or("arch_lr", a.arch_lr, defaults.arch.lr)?,
            weight_decay: s.or("arch_weight_decay", a.arch_weight_decay, defaults.arch.weight_decay)?,
            ..defaults.arch
        },
        seed,
    };
    config.validate()?;
    let space = s.or("space", a.space, SearchSpace::AsymD)?;
    let final_width = s.or("final_width", a.final_width, 16)?;
    if final_width == 0 {
        return Err(CliError::Config("final_width must be positive".into()));
    }
    let stem_channels = s.get("stem_channels", a.stem_channels)?;
    let head_channels = s.get("head_channels", a.head_channels)?;
    let layers = s.get("layers", a.layers)?;
    let nodes = s.get("nodes", a.nodes)?;
    let base_width = s.get("base_width", a.base_width)?;
    output_dir(&out)?;

    let (cube, train, val) = load_scene(&cube_path, &train_path, &val_path)?;
    let classes = train.num_classes().max(val.num_classes());
    let mut net = SupernetConfig::new(classes, cube.bands);
    net.space = space;
    net.layers = layers.unwrap_or(net.layers);
    net.nodes = nodes.unwrap_or(net.nodes);
    net.base_width = base_width.unwrap_or(net.base_width);
    apply_widths(&mut net.stem, &mut net.head, stem_channels, head_channels);
    net.validate()?;

    let mut history = History::create(out.join("search_history.jsonl"))?;
    let mut log_err = None;
    let run = search_stage(&cube, &train, &val, net, &config, final_width, |r, _| {
        println!(
            "epoch {:>3} loss {:.4} val OA {:.2} lr {:.5}",
            r.epoch,
            r.train_loss,
            100.0 * r.val_oa,
            r.lr
        );
        if let Err(e) = history.log.append(r) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    history.finish()?;
    write_atomic(&out.join("genotype.txt"), run.genotype.to_text().as_bytes())?;
    run.checkpoint.save(&out.join("supernet.json"))?;
    println!("best epoch {} {}", run.outcome.best_epoch, run.outcome.best);
    print!("{}", run.genotype.to_text());
    Ok(())
}

fn apply_widths(stem: &mut StemConfig, head: &mut HeadConfig, stem_channels: Option<usize>, head_channels: Option<usize>) {
    if let Some(c) = stem_channels {
        stem.channels = c;
    }
    if let Some(c) = head_channels {
        head.compress_channels = c;
        head.hidden_channels = c;
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let s = Settings::load("train", a.config.as_deref())?;
    let seed = seed_required(&s, a.seed)?;
    let genotype_path = existing_file(s.require("genotype", a.genotype)?, "genotype")?;
    let cube_path = existing_file(s.require("cube", a.cube)?, "cube")?;
    let (train_path, val_path) = label_dir(s.require("labels", a.labels)?)?;
    let out: PathBuf = s.require("out", a.out)?;
    let defaults = FinalTrainConfig::default();
    let config = FinalTrainConfig {
        batch_size: s.or("batch_size", a.batch_size, defaults.batch_size)?,
        lr_init: s.or("lr_init", a.lr_init, defaults.lr_init)?,
        poly_power: s.or("poly_power", a.poly_power, defaults.poly_power)?,
        max_iters: s.or("iters", a.iters, defaults.max_iters)?,
        eval_every: s.or("eval_every", a.eval_every, defaults.eval_every)?,
        patience: s.or("patience", a.patience, defaults.patience)?,
        patch_size: s.or("patch_size", a.patch_size, defaults.patch_size)?,
        sgd: SgdConfig {
            momentum: s.or("momentum", a.momentum, defaults.sgd.momentum)?,
            weight_decay: s.or("weight_decay", a.weight_decay, defaults.sgd.weight_decay)?,
        },
        augment: s.or("augment", a.augment, defaults.augment)?,
        seed,
    };
    config.validate()?;
    let stem_channels = s.get("stem_channels", a.stem_channels)?;
    let head_channels = s.get("head_channels", a.head_channels)?;
    let text = fs::read_to_string(&genotype_path).map_err(|e| CliError::Config(format!("cannot read genotype: {e}")))?;
    let genotype = Genotype::parse(&text)?;
    genotype.validate()?;
    output_dir(&out)?;

    let (cube, train, val) = load_scene(&cube_path, &train_path, &val_path)?;
    let classes = train.num_classes().max(val.num_classes());
    let mut net = CompactConfig::new(classes, cube.bands);
    apply_widths(&mut net.stem, &mut net.head, stem_channels, head_channels);

    let mut history = History::create(out.join("train_history.jsonl"))?;
    let mut log_err = None;
    let run = train_stage(&cube, &train, &val, genotype, net, &config, |r| {
        println!(
            "iter {:>6} loss {:.4} val OA {:.2} lr {:.5}",
            r.iteration,
            r.train_loss,
            100.0 * r.val_oa,
            r.lr
        );
        if let Err(e) = history.log.append(r) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    history.finish()?;
    run.checkpoint(&cube).save(&out.join("weights.json"))?;
    println!(
        "best iteration {} val {}{}",
        run.outcome.best_iteration,
        run.outcome.best,
        if run.outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let s = Settings::load("infer", a.config.as_deref())?;
    let weights = existing_file(s.require("weights", a.weights)?, "weights")?;
    let cube_path = existing_file(s.require("cube", a.cube)?, "cube")?;
    let out: PathBuf = s.require("out", a.out)?;
    let strategy = s.or("strategy", a.strategy, Strategy::Plain)?;
    let defaults = InferenceConfig::default();
    let config = InferenceConfig {
        window: s.or("window", a.window, defaults.window)?,
        scales: s.or("scales", a.scales, defaults.scales)?,
        batch_size: s.or("batch_size", a.batch_size, defaults.batch_size)?,
    };
    output_dir(&out)?;

    let checkpoint = Checkpoint::load(&weights)?;
    let (net, mut store) = checkpoint.build_compact()?;
    let mut cube = HsiCube::load(&cube_path)?;
    if let Some(norm) = &checkpoint.norm {
        cube.normalize(norm)?;
    }
    let result = run_inference(&net, &mut store, &cube, strategy, &config)?;
    result.class_map.save(&out.join("classmap.lbl"))?;
    let k = net.config.num_classes;
    let probs = HsiCube::new(cube.height, cube.width, k, result.probabilities.iter().map(|&p| p as f32).collect())?;
    probs.save(&out.join("probabilities.hsi"))?;
    println!(
        "strategy {strategy} tiles {} calls {} pixels {} seconds {:.3} throughput {:.2} KP/s",
        result.tiles,
        result.network_calls,
        cube.height * cube.width,
        result.seconds,
        result.kilopixels_per_second()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let s = Settings::load("eval", a.config.as_deref())?;
    let pred = existing_file(s.require("pred", a.pred)?, "prediction")?;
    let reference = existing_file(s.require("ref", a.reference)?, "reference")?;
    let pred = LabelMap::load(&pred)?;
    let reference = LabelMap::load(&reference)?;
    let classes = s.or("classes", a.classes, pred.num_classes().max(reference.num_classes()))?;
    let scores = evaluate(&reference, &pred, classes)?;
    println!("{scores}");
    Ok(())
}
