use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boundary::Connectivity;
use crate::error::{Error, Result};
use crate::geometry::COARSE_SIDE;

pub const ROUNDS: usize = 3;
pub const DEFAULT_THRESHOLDS: [f64; ROUNDS] = [0.005, 0.01, 0.02];

/// How each allocation round picks the frontier tokens to split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Split tokens whose predicted score strictly exceeds the round threshold.
    Adaptive,
    /// Split everything.
    Dense,
    /// Split `round(ratio · N)` frontier tokens drawn uniformly without replacement.
    RandomRatio { ratios: [f64; ROUNDS], seed: u64 },
    /// Per batch, with probability `rate`, threshold the ground-truth scores
    /// instead of the predicted ones.
    OracleMix { rate: f64, seed: u64 },
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Adaptive => "adaptive",
            Policy::Dense => "dense",
            Policy::RandomRatio { .. } => "random_ratio",
            Policy::OracleMix { .. } => "oracle_mix",
        }
    }

    /// Policy by name with default parameters.
    pub fn from_name(name: &str, seed: u64) -> Result<Policy> {
        match name {
            "adaptive" => Ok(Policy::Adaptive),
            "dense" => Ok(Policy::Dense),
            "random_ratio" => Ok(Policy::RandomRatio { ratios: [0.25; ROUNDS], seed }),
            "oracle_mix" => Ok(Policy::OracleMix { rate: 0.5, seed }),
            other => Err(Error::Config(format!(
                "unknown policy {other:?}; expected adaptive, dense, random_ratio or oracle_mix"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub name: String,
    pub image_height: u32,
    pub image_width: u32,
    pub num_classes: usize,
    pub stage1_dims: [usize; 4],
    pub stage1_blocks: [usize; 4],
    pub stage2_dims: [usize; 4],
    pub stage2_blocks: [usize; 4],
    pub rounds: usize,
    pub thresholds: [f64; ROUNDS],
    pub scorer_hidden: [usize; ROUNDS],
    pub cluster_size: usize,
    pub head_width: usize,
    pub mlp_ratio: usize,
    pub connectivity: Connectivity,
    pub policy: Policy,
    /// Child tokens start from an embedding of their own pixels.
    pub aux_image: bool,
    /// Child tokens inherit their parent's feature.
    pub feature_residual: bool,
    /// Skip Stage 2; one cluster block refines the final Stage-1 set instead.
    pub stage1_only: bool,
}

fn preset(name: &str, size: u32, classes: usize, s1: [usize; 4], b1: [usize; 4], b2: [usize; 4], cluster: usize) -> EncoderConfig {
    let s2 = [s1[3], s1[2], s1[1], s1[0]];
    EncoderConfig {
        name: name.into(),
        image_height: size,
        image_width: size,
        num_classes: classes,
        stage1_dims: s1,
        stage1_blocks: b1,
        stage2_dims: s2,
        stage2_blocks: b2,
        rounds: ROUNDS,
        thresholds: DEFAULT_THRESHOLDS,
        scorer_hidden: [s1[1] / 2, s1[2] / 2, s1[3] / 2],
        cluster_size: cluster,
        head_width: 32,
        mlp_ratio: 4,
        connectivity: Connectivity::Four,
        policy: Policy::Adaptive,
        aux_image: true,
        feature_residual: true,
        stage1_only: false,
    }
}

impl EncoderConfig {
    pub fn nano() -> Self {
        preset("nano", 64, 5, [64, 32, 16, 8], [1, 1, 1, 0], [1, 1, 2, 1], 8)
    }

    pub fn tiny() -> Self {
        preset("tiny", 512, 150, [512, 256, 128, 64], [1, 1, 1, 0], [4, 4, 16, 4], 32)
    }

    pub fn small() -> Self {
        preset("small", 512, 150, [512, 256, 128, 64], [2, 2, 2, 0], [4, 6, 24, 3], 32)
    }

    pub fn base() -> Self {
        preset("base", 512, 150, [768, 384, 192, 96], [2, 2, 2, 0], [8, 6, 18, 4], 32)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "nano" => Ok(Self::nano()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn heads(&self, dim: usize) -> usize {
        (dim / self.head_width).max(1)
    }

    /// Feature width of the tokens emitted at `level`.
    pub fn emit_dim(&self, level: usize) -> usize {
        if self.stage1_only {
            self.stage1_dims[3]
        } else {
            self.stage2_dims[3 - level]
        }
    }

    /// Width of the densified per-cell features.
    pub fn dense_dim(&self) -> usize {
        self.emit_dim(3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rounds != ROUNDS {
            return fail(format!("rounds must be {ROUNDS}, got {}", self.rounds));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return fail(format!("thresholds must be positive, got {t}"));
        }
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % COARSE_SIDE != 0
            || self.image_width % COARSE_SIDE != 0
        {
            return fail(format!("image size {}×{} must be a positive multiple of {COARSE_SIDE}", self.image_height, self.image_width));
        }
        let d = self.stage1_dims;
        if d[3] == 0 || (0..3).any(|r| d[r] != 2 * d[r + 1]) {
            return fail(format!("stage-1 dims {d:?} must halve each round"));
        }
        if self.stage2_dims != [d[3], d[2], d[1], d[0]] {
            return fail(format!("stage-2 dims {:?} must mirror stage-1 dims {d:?}", self.stage2_dims));
        }
        if self.stage1_blocks[3] != 0 {
            return fail("the last allocation round has no attention blocks".into());
        }
        if self.head_width == 0 || self.mlp_ratio == 0 || self.cluster_size == 0 || self.num_classes == 0 {
            return fail("head_width, mlp_ratio, cluster_size and num_classes must be positive".into());
        }
        if let Some(bad) = d.iter().find(|&&x| x % self.heads(x) != 0) {
            return fail(format!("dim {bad} does not split into {} heads", self.heads(*bad)));
        }
        if self.scorer_hidden.contains(&0) {
            return fail("scorer hidden widths must be positive".into());
        }
        match &self.policy {
            Policy::RandomRatio { ratios, .. } if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) => {
                fail(format!("random ratios {ratios:?} must lie in [0, 1]"))
            }
            Policy::OracleMix { rate, .. } if !(0.0..=1.0).contains(rate) => {
                fail(format!("oracle rate {rate} must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: EncoderConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}
