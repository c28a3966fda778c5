//! Training of the compact network, plus step and validation helpers shared
//! with the architecture search.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, ParamStore, Role};
use crate::data::{extract_sample, random_samples, HsiCube, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::inference::{class_map, plan_tiles, predict, Model, ProbabilityMap};
use crate::metrics::{ConfusionMatrix, Scores};
use crate::optim::{poly_lr, Group, Sgd, SgdConfig};
use crate::tensor::Tensor;

/// Stack equally sized samples into a `[B, 1, bands, h, w]` input and the
/// concatenated label patches.
pub fn batch_tensor(samples: &[&Sample]) -> Result<(Tensor, Vec<u16>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w, bands) = (first.height, first.width, first.bands);
    let mut x = Vec::with_capacity(samples.len() * first.x.len());
    let mut y = Vec::with_capacity(samples.len() * first.y.len());
    for s in samples {
        if (s.height, s.width, s.bands) != (h, w, bands) {
            return Err(Error::Shape(format!(
                "batch mixes {}x{}x{} and {h}x{w}x{bands} samples",
                s.height, s.width, s.bands
            )));
        }
        x.extend(s.x.iter().map(|&v| v as f64));
        y.extend_from_slice(&s.y);
    }
    Ok((Tensor::new(vec![samples.len(), 1, bands, h, w], x)?, y))
}

/// One forward and backward pass in train mode. Gradients reach only the
/// parameters whose role passes `trainable`. Returns the loss, and skips the
/// backward pass when it is not finite.
pub fn loss_and_grad(model: &dyn Model, store: &mut ParamStore, batch: &[&Sample], trainable: fn(Role) -> bool) -> Result<f64> {
    let (x, y) = batch_tensor(batch)?;
    store.zero_grad();
    let mut g = Graph::new(store, Mode::Train).with_trainable(trainable);
    let x = g.constant(x);
    let logits = model.forward(&mut g, x)?;
    let loss = g.masked_cross_entropy(logits, &y)?;
    let value = g.value(loss).data()[0];
    if value.is_finite() {
        g.backward(loss)?;
    }
    Ok(value)
}

/// Non-overlapping windows over the scene that hold at least one labeled
/// pixel of `labels`.
pub fn validation_windows(cube: &HsiCube, labels: &LabelMap, window: usize) -> Result<Vec<Sample>> {
    let plan = plan_tiles((cube.height, cube.width), window, window)?;
    let (h, w) = plan.window;
    let mut out = Vec::new();
    for &anchor in &plan.anchors {
        let s = extract_sample(cube, labels, anchor, h, w)?;
        if s.labeled_count() > 0 {
            out.push(s);
        }
    }
    Ok(out)
}

/// Score eval-mode predictions on the labeled pixels of `samples`. Windows
/// that overlap are stitched by summing probabilities, so every pixel is
/// counted once.
pub fn evaluate_samples(model: &dyn Model, store: &mut ParamStore, samples: &[Sample], scene: (usize, usize), batch: usize) -> Result<Scores> {
    let k = model.num_classes();
    let (h, w) = scene;
    let mut probs = ProbabilityMap::new(k, h, w);
    let mut reference = LabelMap::empty(h, w);
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = batch_tensor(&refs)?;
        let out = predict(model, store, x)?;
        for (i, s) in chunk.iter().enumerate() {
            let per = k * s.height * s.width;
            probs.add_tile((s.row, s.col), (s.height, s.width), &out.data()[i * per..(i + 1) * per]);
            for r in 0..s.height {
                for c in 0..s.width {
                    let label = s.y[r * s.width + c];
                    if label != 0 {
                        reference.labels[(s.row + r) * w + s.col + c] = label;
                    }
                }
            }
        }
    }
    // Sums rather than means: argmax does not depend on the coverage count.
    let predicted = class_map(&probs.accum, k, h, w);
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate(&reference, &predicted)?;
    cm.summary()
}

/// A random flip and quarter rotation applied jointly to cube and labels.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let mut s = sample.rotate(rng.random_range(0..4));
    if rng.random_bool(0.5) {
        s = s.flip_horizontal();
    }
    if rng.random_bool(0.5) {
        s = s.flip_vertical();
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalTrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub poly_power: f64,
    pub max_iters: usize,
    pub eval_every: usize,
    /// Evaluations without a validation improvement before stopping.
    pub patience: usize,
    pub patch_size: usize,
    pub sgd: SgdConfig,
    pub augment: bool,
    pub seed: u64,
}

impl Default for FinalTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            lr_init: 0.1,
            poly_power: 0.9,
            max_iters: 5000,
            eval_every: 100,
            patience: 20,
            patch_size: 32,
            sgd: SgdConfig {
                momentum: 0.9,
                weight_decay: 3e-4,
            },
            augment: true,
            seed: 0,
        }
    }
}

impl FinalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_iters == 0 || self.patch_size == 0 {
            return Err(Error::Config("batch_size, max_iters and patch_size must be positive".into()));
        }
        if self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("eval_every and patience must be at least 1".into()));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        Ok(())
    }
}

/// One validation point of final training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean training loss since the previous record.
    pub train_loss: f64,
    pub val_oa: f64,
    pub val_aa: f64,
    pub val_kappa: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<TrainRecord>,
    pub best_iteration: usize,
    pub best: Scores,
    pub stopped_early: bool,
}

/// Train from freshly cropped and augmented samples with SGD under a poly
/// schedule. The parameters with the best validation OA are restored into
/// `store` on return.
pub fn train_final(
    model: &dyn Model,
    store: &mut ParamStore,
    cube: &HsiCube,
    train: &LabelMap,
    val: &LabelMap,
    config: &FinalTrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.labeled_count() == 0 {
        return Err(Error::EmptySupervision);
    }
    let windows = validation_windows(cube, val, config.patch_size)?;
    if windows.is_empty() {
        return Err(Error::Config("validation map has no labeled pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sgd = Sgd::new(config.sgd, Group::Network);
    let scene = (cube.height, cube.width);
    let mut history = Vec::new();
    let mut best: Option<(Scores, usize, crate::autodiff::Snapshot)> = None;
    let mut stale = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut stopped_early = false;
    for iter in 0..config.max_iters {
        let lr = poly_lr(iter as f64, config.lr_init, config.max_iters as f64, config.poly_power);
        let mut batch = random_samples(cube, train, config.batch_size, config.patch_size, &mut rng)?;
        if config.augment {
            batch = batch.iter().map(|s| augment(s, &mut rng)).collect();
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let loss = loss_and_grad(model, store, &refs, |r| !r.is_arch())?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "final training",
                epoch: 0,
                iteration: iter + 1,
                value: loss,
            });
        }
        sgd.step(store, lr);
        loss_sum += loss;
        loss_n += 1;
        let done = iter + 1;
        if done % config.eval_every != 0 && done != config.max_iters {
            continue;
        }
        let scores = evaluate_samples(model, store, &windows, scene, config.batch_size)?;
        let record = TrainRecord {
            iteration: done,
            train_loss: loss_sum / loss_n as f64,
            val_oa: scores.oa,
            val_aa: scores.aa,
            val_kappa: scores.kappa,
            lr,
        };
        on_record(&record);
        history.push(record);
        (loss_sum, loss_n) = (0.0, 0);
        if best.as_ref().is_none_or(|(b, _, _)| scores.oa > b.oa) {
            best = Some((scores, done, store.snapshot()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best, best_iteration, snapshot) = best.expect("at least one evaluation");
    store.restore(&snapshot);
    Ok(TrainOutcome {
        history,
        best_iteration,
        best,
        stopped_early,
    })
}

/// References to `items` in random order, in batches of `size`; the last
/// batch may be short.
pub(crate) fn shuffled_batches<'a, T>(items: &'a [T], size: usize, rng: &mut impl Rng) -> Vec<Vec<&'a T>> {
    let mut refs: Vec<&T> = items.iter().collect();
    refs.shuffle(rng);
    refs.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}
