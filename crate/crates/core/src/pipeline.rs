//! The two training stages end to end, as used by the command line tool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::checkpoint::Checkpoint;
use crate::compact::{CompactConfig, CompactNetwork};
use crate::data::{HsiCube, LabelMap};
use crate::error::Result;
use crate::genotype::Genotype;
use crate::search::{run_search, EpochRecord, SamplePool, SearchConfig, SearchOutcome};
use crate::supernet::{Supernet, SupernetConfig};
use crate::train::{train_final, FinalTrainConfig, TrainOutcome, TrainRecord};

/// Standardize `cube` in place with statistics of the `train` pixels.
pub fn normalize_with(cube: &mut HsiCube, train: &LabelMap) -> Result<()> {
    let stats = cube.stats(train)?;
    cube.normalize(&stats)
}

pub struct SearchRun {
    pub genotype: Genotype,
    pub outcome: SearchOutcome,
    pub checkpoint: Checkpoint,
}

/// Build and search a supernet on a normalized cube, then derive a genotype
/// whose widths scale `final_width`.
pub fn search_stage(
    cube: &HsiCube,
    train: &LabelMap,
    val: &LabelMap,
    net_config: SupernetConfig,
    config: &SearchConfig,
    final_width: usize,
    on_epoch: impl FnMut(&EpochRecord, &ParamStore),
) -> Result<SearchRun> {
    config.validate()?;
    net_config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let net = Supernet::new(&mut store, net_config, &mut rng)?;
    let pool = SamplePool::generate(cube, train, val, config.pool_size, config.patch_size, &mut rng)?;
    let outcome = run_search(&net, &mut store, &pool, config, on_epoch)?;
    let genotype = Genotype::derive(&outcome.arch, &net.config, final_width);
    let checkpoint = Checkpoint::of_supernet(&net, &store, cube.norm.clone());
    Ok(SearchRun {
        genotype,
        outcome,
        checkpoint,
    })
}

pub struct TrainRun {
    pub network: CompactNetwork,
    pub store: ParamStore,
    pub outcome: TrainOutcome,
}

impl TrainRun {
    pub fn checkpoint(&self, cube: &HsiCube) -> Checkpoint {
        Checkpoint::of_compact(&self.network, &self.store, cube.norm.clone())
    }
}

/// Build the compact network of `genotype` and train it on a normalized cube.
pub fn train_stage(
    cube: &HsiCube,
    train: &LabelMap,
    val: &LabelMap,
    genotype: Genotype,
    net_config: CompactConfig,
    config: &FinalTrainConfig,
    on_record: impl FnMut(&TrainRecord),
) -> Result<TrainRun> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let network = CompactNetwork::new(&mut store, genotype, net_config, &mut rng)?;
    let outcome = train_final(&network, &mut store, cube, train, val, config, on_record)?;
    Ok(TrainRun {
        network,
        store,
        outcome,
    })
}
