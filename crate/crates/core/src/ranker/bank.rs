use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_fl_with, FeatureSpace, ModelConfig, Ranker, RankerError, RankerParams, Result, TrainingMetrics};
use crate::corpus::RunRecord;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema_version: u32,
    length: usize,
    seed: u64,
    config: ModelConfig,
    features: FeatureSpace,
    dataset_ids: Vec<String>,
    params: Vec<StoredTensor>,
}

impl Checkpoint {
    fn from_ranker(r: &Ranker) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            length: r.length,
            seed: r.seed,
            config: r.config.clone(),
            features: r.features.clone(),
            dataset_ids: r.params.dataset_ids().to_vec(),
            params: r
                .params
                .store()
                .iter()
                .map(|(name, t)| StoredTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    fn into_ranker(self) -> Result<Ranker> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(RankerError::Checkpoint(format!("unknown schema_version {}", self.schema_version)));
        }
        self.config.validate()?;
        let mut store = ParamStore::new();
        for t in self.params {
            store.push(t.name, Tensor::new(&t.shape, t.data)?);
        }
        if !store.all_finite() {
            return Err(RankerError::Checkpoint("non-finite parameter".into()));
        }
        let params = RankerParams::from_parts(&self.config, store, self.dataset_ids)?;
        Ok(Ranker {
            config: self.config,
            features: self.features,
            params,
            length: self.length,
            seed: self.seed,
        })
    }
}

pub fn save_checkpoint(ranker: &Ranker, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::from_ranker(ranker)).map_err(|e| RankerError::Checkpoint(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Ranker> {
    let text = fs::read_to_string(path)?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| RankerError::Checkpoint(e.to_string()))?;
    cp.into_ranker()
}

/// Index of a saved bank: one checkpoint file per curve length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub holdout: Option<String>,
    pub models: BTreeMap<usize, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// One trained model per curve length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelBank {
    models: BTreeMap<usize, Ranker>,
    pub holdout: Option<String>,
}

impl ModelBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ranker: Ranker) {
        self.models.insert(ranker.length, ranker);
    }

    pub fn get(&self, l: usize) -> Result<&Ranker> {
        self.models.get(&l).ok_or(RankerError::MissingLength(l))
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.models.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> impl Iterator<Item = &Ranker> {
        self.models.values()
    }

    /// Registers `id` in every model's dataset table.
    pub fn ensure_dataset(&mut self, id: &str) -> Result<()> {
        for m in self.models.values_mut() {
            m.ensure_dataset(id)?;
        }
        Ok(())
    }

    /// Seed used for the model of length `l`.
    pub fn length_seed(seed: u64, l: usize) -> u64 {
        seed ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// Trains one model per entry of `lengths`, in parallel. Each model gets a
    /// seed derived from the configured seed and its length.
    pub fn train(
        records: &[&RunRecord],
        lengths: &[usize],
        config: &ModelConfig,
        features: &FeatureSpace,
    ) -> Result<(Self, BTreeMap<usize, Vec<TrainingMetrics>>)> {
        let trained: Vec<_> = lengths
            .par_iter()
            .map(|&l| {
                let mut cfg = config.clone();
                cfg.training.seed = Self::length_seed(config.training.seed, l);
                train_fl_with(records, l, &cfg, features.clone())
            })
            .collect::<Result<_>>()?;
        let mut bank = ModelBank::new();
        let mut metrics = BTreeMap::new();
        for t in trained {
            metrics.insert(t.ranker.length, t.metrics);
            bank.insert(t.ranker);
        }
        Ok((bank, metrics))
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Manifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut models = BTreeMap::new();
        for (&l, m) in &self.models {
            let file = format!("f_l{l:04}.json");
            save_checkpoint(m, dir.join(&file))?;
            models.insert(l, file);
        }
        let manifest = Manifest {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            holdout: self.holdout.clone(),
            models,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| RankerError::Checkpoint(e.to_string()))?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RankerError::Checkpoint(e.to_string()))?;
        let mut bank = ModelBank {
            models: BTreeMap::new(),
            holdout: manifest.holdout,
        };
        for (l, file) in manifest.models {
            let m = load_checkpoint(dir.join(file))?;
            if m.length != l {
                return Err(RankerError::Checkpoint(format!("manifest lists length {l}, file holds {}", m.length)));
            }
            bank.insert(m);
        }
        Ok(bank)
    }
}
