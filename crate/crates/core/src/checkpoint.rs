//! JSON checkpoints of trained networks and line-delimited history logs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::compact::{CompactConfig, CompactNetwork};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::supernet::{ArchValues, Supernet, SupernetConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "hsinas-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Network {
    Supernet { config: SupernetConfig, arch: ArchValues },
    Compact { config: CompactConfig, genotype: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub network: Network,
    /// Band statistics the training cube was standardized with.
    pub norm: Option<NormStats>,
    pub params: Vec<NamedTensor>,
    pub buffers: Vec<NamedTensor>,
}

fn named(name: &str, t: &Tensor) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

fn load_tensors<'a>(slots: impl Iterator<Item = (&'a str, &'a mut Tensor)>, saved: &[NamedTensor], what: &str) -> Result<()> {
    let mut count = 0;
    for (i, (name, value)) in slots.enumerate() {
        count += 1;
        let t = saved
            .get(i)
            .ok_or_else(|| Error::Checkpoint(format!("missing {what} `{name}`")))?;
        if t.name != name || t.shape != value.shape() {
            return Err(Error::Checkpoint(format!(
                "{what} {i} is `{}` {:?}, network expects `{name}` {:?}",
                t.name,
                t.shape,
                value.shape()
            )));
        }
        *value = Tensor::new(t.shape.clone(), t.data.clone())
            .map_err(|e| Error::Checkpoint(format!("{what} `{name}`: {e}")))?;
    }
    if count != saved.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} {what}s, network has {count}",
            saved.len()
        )));
    }
    Ok(())
}

impl Checkpoint {
    fn capture(network: Network, store: &ParamStore, norm: Option<NormStats>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            network,
            norm,
            params: store.params().iter().map(|p| named(&p.name, &p.value)).collect(),
            buffers: store.buffers().iter().map(|b| named(&b.name, &b.value)).collect(),
        }
    }

    pub fn of_supernet(net: &Supernet, store: &ParamStore, norm: Option<NormStats>) -> Self {
        let network = Network::Supernet {
            config: net.config.clone(),
            arch: net.arch_values(store),
        };
        Self::capture(network, store, norm)
    }

    pub fn of_compact(net: &CompactNetwork, store: &ParamStore, norm: Option<NormStats>) -> Self {
        let network = Network::Compact {
            config: net.config.clone(),
            genotype: net.genotype.to_text(),
        };
        Self::capture(network, store, norm)
    }

    /// Copy saved values into a store whose layout must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        load_tensors(
            store.params_mut().iter_mut().map(|p| (p.name.as_str(), &mut p.value)),
            &self.params,
            "parameter",
        )?;
        load_tensors(
            store.buffers_mut().iter_mut().map(|b| (b.name.as_str(), &mut b.value)),
            &self.buffers,
            "buffer",
        )
    }

    pub fn build_compact(&self) -> Result<(CompactNetwork, ParamStore)> {
        let Network::Compact { config, genotype } = &self.network else {
            return Err(Error::Checkpoint("checkpoint holds a supernet, not a compact network".into()));
        };
        let genotype = Genotype::parse(genotype)?;
        let mut store = ParamStore::new();
        // Initial values are overwritten right away.
        let net = CompactNetwork::new(&mut store, genotype, config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut store)?;
        Ok((net, store))
    }

    pub fn build_supernet(&self) -> Result<(Supernet, ParamStore)> {
        let Network::Supernet { config, .. } = &self.network else {
            return Err(Error::Checkpoint("checkpoint holds a compact network, not a supernet".into()));
        };
        let mut store = ParamStore::new();
        let net = Supernet::new(&mut store, config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        self.restore_into(&mut store)?;
        Ok((net, store))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `path` with `.partial` appended.
pub fn partial_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".partial");
    PathBuf::from(s)
}

/// Write to `<path>.partial`, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Appends one JSON object per line.
pub struct HistoryLog {
    file: fs::File,
    path: PathBuf,
}

impl HistoryLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn read_history<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                field: "record".into(),
                reason: e.to_string(),
            })
        })
        .collect()
}
