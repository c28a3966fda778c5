//! Flat dotted-key config files. Every key is `<command>.<option>`, written
//! either literally (`search.epochs = 30`) or under a `[search]` table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;

use crate::CliError;

pub const GEN_KEYS: &[&str] = &["out", "classes", "size", "noise", "seed"];
pub const SPLIT_KEYS: &[&str] = &["labels", "out", "train_per_class", "val_per_class", "seed"];
pub const SEARCH_KEYS: &[&str] = &[
    "cube",
    "labels",
    "out",
    "space",
    "layers",
    "nodes",
    "base_width",
    "final_width",
    "stem_channels",
    "head_channels",
    "epochs",
    "warmup_epochs",
    "batch_size",
    "pool_size",
    "patch_size",
    "lr_max",
    "lr_min",
    "momentum",
    "weight_decay",
    "arch_lr",
    "arch_weight_decay",
    "seed",
];
pub const TRAIN_KEYS: &[&str] = &[
    "genotype",
    "cube",
    "labels",
    "out",
    "stem_channels",
    "head_channels",
    "iters",
    "batch_size",
    "patch_size",
    "lr_init",
    "poly_power",
    "eval_every",
    "patience",
    "momentum",
    "weight_decay",
    "augment",
    "seed",
];
pub const INFER_KEYS: &[&str] = &["weights", "cube", "out", "strategy", "window", "scales", "batch_size"];
pub const EVAL_KEYS: &[&str] = &["pred", "ref", "classes"];

fn known(command: &str) -> Option<&'static [&'static str]> {
    Some(match command {
        "gen" => GEN_KEYS,
        "split" => SPLIT_KEYS,
        "search" => SEARCH_KEYS,
        "train" => TRAIN_KEYS,
        "infer" => INFER_KEYS,
        "eval" => EVAL_KEYS,
        _ => return None,
    })
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            _ => {
                out.insert(key, v.clone());
            }
        }
    }
}

/// Option values of one command, from the file and from flags.
#[derive(Debug, Default)]
pub struct Settings {
    command: String,
    values: BTreeMap<String, toml::Value>,
}

impl Settings {
    /// Parse `text`, rejecting any key that no command understands.
    pub fn parse(command: &str, text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &table, &mut flat);
        let mut values = BTreeMap::new();
        for (key, value) in flat {
            let (cmd, opt) = key
                .split_once('.')
                .ok_or_else(|| CliError::Config(format!("key `{key}` needs a command prefix, as in `{command}.{key}`")))?;
            let keys = known(cmd).ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?;
            if !keys.contains(&opt) {
                return Err(CliError::Config(format!("unknown key `{key}`")));
            }
            if cmd == command {
                values.insert(opt.to_string(), value);
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn load(command: &str, path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self {
                command: command.to_string(),
                values: BTreeMap::new(),
            }),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(command, &text)
            }
        }
    }

    /// The flag if given, else the file value.
    pub fn get<T: DeserializeOwned>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| CliError::Config(format!("{}.{key}: {e}", self.command))),
        }
    }

    pub fn or<T: DeserializeOwned>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError> {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    pub fn require<T: DeserializeOwned>(&self, key: &str, flag: Option<T>) -> Result<T, CliError> {
        self.get(key, flag)?
            .ok_or_else(|| CliError::Config(format!("missing `--{}` (or `{}.{key}` in the config file)", key.replace('_', "-"), self.command)))
    }
}
