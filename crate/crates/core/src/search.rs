//! Alternating optimization of supernet weights and architecture logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Role};
use crate::data::{random_samples, HsiCube, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::optim::{cosine_lr, Adam, AdamConfig, Group, Sgd, SgdConfig};
use crate::supernet::{ArchValues, Supernet};
use crate::train::{evaluate_samples, loss_and_grad, shuffled_batches, validation_windows};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    /// Leading epochs that update only the network weights.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Total training samples, split evenly between the two updates.
    pub pool_size: usize,
    pub patch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub theta: SgdConfig,
    pub arch: AdamConfig,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 20,
            batch_size: 4,
            pool_size: 400,
            patch_size: 32,
            lr_max: 0.025,
            lr_min: 0.001,
            theta: SgdConfig {
                momentum: 0.9,
                weight_decay: 3e-4,
            },
            arch: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("epochs, batch_size and patch_size must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.pool_size < 2 {
            return Err(Error::Config("pool_size must hold at least one sample per split".into()));
        }
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config("need lr_max >= lr_min >= 0".into()));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch as f64, self.lr_max, self.lr_min, self.epochs as f64)
    }
}

/// Training crops for the two updates and validation windows.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePool {
    pub train_theta: Vec<Sample>,
    pub train_arch: Vec<Sample>,
    pub val: Vec<Sample>,
    pub scene: (usize, usize),
}

impl SamplePool {
    /// Draw `pool_size` labeled crops from `train`, the first half for the
    /// weights and the rest for the architecture, and tile `val` without
    /// overlap.
    pub fn generate(cube: &HsiCube, train: &LabelMap, val: &LabelMap, pool_size: usize, patch: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut samples = random_samples(cube, train, pool_size, patch, rng)?;
        let train_arch = samples.split_off(pool_size.div_ceil(2));
        Ok(Self {
            train_theta: samples,
            train_arch,
            val: validation_windows(cube, val, patch)?,
            scene: (cube.height, cube.width),
        })
    }

    fn check(&self) -> Result<()> {
        if self.train_theta.is_empty() || self.train_arch.is_empty() || self.val.is_empty() {
            return Err(Error::Config(format!(
                "sample pool needs every split populated, got {}/{}/{}",
                self.train_theta.len(),
                self.train_arch.len(),
                self.val.len()
            )));
        }
        let bad = |s: &Sample| s.labeled_count() == 0;
        if self.train_theta.iter().any(bad) || self.train_arch.iter().any(bad) || self.val.iter().any(bad) {
            return Err(Error::Contract("sample pool holds a sample without labels".into()));
        }
        Ok(())
    }
}

/// Per-epoch search record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean architecture-step loss; absent during warm-up.
    pub arch_loss: Option<f64>,
    pub val_oa: f64,
    pub val_aa: f64,
    pub val_kappa: f64,
    pub lr: f64,
}

/// Optimizer state of one search run.
#[derive(Clone, Debug)]
pub struct Searcher<'a> {
    pub net: &'a Supernet,
    theta: Sgd,
    arch: Adam,
}

fn network_role(r: Role) -> bool {
    !r.is_arch()
}

fn arch_role(r: Role) -> bool {
    r.is_arch()
}

impl<'a> Searcher<'a> {
    pub fn new(net: &'a Supernet, config: &SearchConfig) -> Self {
        Self {
            net,
            theta: Sgd::new(config.theta, Group::Network),
            arch: Adam::new(config.arch, Group::Architecture),
        }
    }

    /// One SGD step on the network weights; architecture logits are left
    /// untouched. Returns the batch loss.
    pub fn theta_step(&mut self, store: &mut ParamStore, batch: &[&Sample], lr: f64) -> Result<f64> {
        let loss = loss_and_grad(self.net, store, batch, network_role)?;
        if loss.is_finite() {
            self.theta.step(store, lr);
        }
        Ok(loss)
    }

    /// One Adam step on the architecture logits; network weights are left
    /// untouched, though batch-norm running statistics advance.
    pub fn arch_step(&mut self, store: &mut ParamStore, batch: &[&Sample]) -> Result<f64> {
        let loss = loss_and_grad(self.net, store, batch, arch_role)?;
        if loss.is_finite() {
            self.arch.step(store);
        }
        Ok(loss)
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Architecture logits of the best validation epoch.
    pub arch: ArchValues,
    pub best_epoch: usize,
    pub best: Scores,
    pub history: Vec<EpochRecord>,
}

fn diverged(stage: &'static str, epoch: usize, iteration: usize, value: f64) -> Error {
    Error::Divergence {
        stage,
        epoch,
        iteration,
        value,
    }
}

/// Run the search. Warm-up epochs update only the weights; afterwards each
/// iteration takes one weight step and then one architecture step. The
/// supernet state of the epoch with the best validation OA is restored into
/// `store` on return. `on_epoch` sees each record and the store right after
/// that epoch.
pub fn run_search(
    net: &Supernet,
    store: &mut ParamStore,
    pool: &SamplePool,
    config: &SearchConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParamStore),
) -> Result<SearchOutcome> {
    config.validate()?;
    pool.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut searcher = Searcher::new(net, config);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(Scores, usize, crate::autodiff::Snapshot)> = None;
    for epoch in 1..=config.epochs {
        let lr = config.lr(epoch - 1);
        let searching = epoch > config.warmup_epochs;
        let theta_batches = shuffled_batches(&pool.train_theta, config.batch_size, &mut rng);
        let arch_batches = if searching {
            shuffled_batches(&pool.train_arch, config.batch_size, &mut rng)
        } else {
            Vec::new()
        };
        let (mut theta_sum, mut arch_sum) = (0.0, 0.0);
        for (it, batch) in theta_batches.iter().enumerate() {
            let loss = searcher.theta_step(store, batch, lr)?;
            if !loss.is_finite() {
                return Err(diverged("search weights", epoch, it + 1, loss));
            }
            theta_sum += loss;
            if searching {
                let arch_batch = &arch_batches[it % arch_batches.len()];
                let loss = searcher.arch_step(store, arch_batch)?;
                if !loss.is_finite() {
                    return Err(diverged("search architecture", epoch, it + 1, loss));
                }
                arch_sum += loss;
            }
        }
        let n = theta_batches.len() as f64;
        let scores = evaluate_samples(net, store, &pool.val, pool.scene, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: theta_sum / n,
            arch_loss: searching.then(|| arch_sum / n),
            val_oa: scores.oa,
            val_aa: scores.aa,
            val_kappa: scores.kappa,
            lr,
        };
        on_epoch(&record, store);
        history.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| scores.oa > b.oa) {
            best = Some((scores, epoch, store.snapshot()));
        }
    }
    let (best, best_epoch, snapshot) = best.expect("at least one epoch");
    store.restore(&snapshot);
    Ok(SearchOutcome {
        arch: net.arch_values(store),
        best_epoch,
        best,
        history,
    })
}
