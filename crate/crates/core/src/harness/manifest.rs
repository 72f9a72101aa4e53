use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary::Connectivity;
use crate::config::{EncoderConfig, Policy, ROUNDS};
use crate::error::{Error, Result};
use crate::harness::eval::Metrics;
use crate::harness::scene::{corpus_scene, Scene, SceneSpec};
use crate::harness::train::TrainConfig;
use crate::tensor::ParamStore;

/// Held-out scenes are drawn from this index onward so they never collide
/// with training scenes.
pub const HELDOUT_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub scene: SceneSpec,
    pub seed: u64,
    pub train_scenes: usize,
    pub heldout_scenes: usize,
}

/// Which scenes a corpus holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

impl DataSpec {
    pub fn first_index(&self, split: &Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Heldout => HELDOUT_OFFSET,
        }
    }

    pub fn size(&self, split: &Split) -> usize {
        match split {
            Split::Train => self.train_scenes,
            Split::Heldout => self.heldout_scenes,
        }
    }

    /// Generates a split; scene `i` depends only on `(seed, first + i)`.
    pub fn corpus(&self, split: &Split) -> Result<Vec<Scene>> {
        let first = self.first_index(split);
        let indices: Vec<u64> = (first..first + self.size(split) as u64).collect();
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            indices.par_iter().map(|&i| corpus_scene(self.seed, i, &self.scene)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        indices.iter().map(|&i| corpus_scene(self.seed, i, &self.scene)).collect()
    }

    pub fn descriptor(&self, split: Split) -> DatasetDescriptor {
        DatasetDescriptor {
            kind: "synthetic".into(),
            seed: self.seed,
            first_index: self.first_index(&split),
            scenes: self.size(&split),
            split,
            spec: self.scene.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub kind: String,
    pub split: Split,
    pub seed: u64,
    pub first_index: u64,
    pub scenes: usize,
    pub spec: SceneSpec,
}

/// Encoder, data and optimizer settings of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    pub eval_batch_size: usize,
}

impl RunConfig {
    /// Nano encoder on 64×64 five-class scenes.
    pub fn desk() -> Self {
        let encoder = EncoderConfig::nano();
        let scene = SceneSpec::desk(encoder.image_height, encoder.image_width, encoder.num_classes as u16);
        RunConfig {
            encoder,
            data: DataSpec { scene, seed: 7, train_scenes: 512, heldout_scenes: 128 },
            train: TrainConfig::default(),
            eval_batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.data.scene.validate()?;
        let e = &self.encoder;
        let s = &self.data.scene;
        if (s.height, s.width) != (e.image_height, e.image_width) {
            return Err(Error::Config("scene size differs from the encoder input size".into()));
        }
        if (s.num_classes as usize) > e.num_classes {
            return Err(Error::Config("scenes use more classes than the head predicts".into()));
        }
        if self.eval_batch_size == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// SHA-256 over parameter names, shapes and values.
pub fn params_digest(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for id in store.ids() {
        h.update(store.name(id).as_bytes());
        let t = store.get(id);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Evaluation record; contains nothing that varies between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub params_digest: String,
    pub seed: u64,
    pub dataset: DatasetDescriptor,
    pub policy: Policy,
    pub thresholds: [f64; ROUNDS],
    pub connectivity: Connectivity,
    pub metrics: Metrics,
    /// Overlay files written next to the manifest.
    pub overlays: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
