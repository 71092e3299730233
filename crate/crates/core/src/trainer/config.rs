use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detrhead::{SaliencyMode, VmrWeights};
use crate::error::{Error, Result};
use crate::exec::Execution;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "QDVMR_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub gpa: f64,
    pub w: f64,
    pub l1: f64,
    pub iou: f64,
    pub ce: f64,
    pub eos_coef: f64,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Probability clamp for the clip-wise BCE.
    pub eps: f64,
    /// Average both InfoNCE directions instead of video→text only.
    pub symmetric_nce: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        let v = VmrWeights::default();
        Self {
            gpa: 0.2,
            w: 0.4,
            l1: v.l1,
            iou: v.iou,
            ce: v.ce,
            eos_coef: v.eos_coef,
            tau: 0.07,
            eps: 1e-6,
            symmetric_nce: false,
        }
    }
}

impl LossWeights {
    pub fn vmr(&self) -> VmrWeights {
        VmrWeights {
            l1: self.l1,
            iou: self.iou,
            ce: self.ce,
            eos_coef: self.eos_coef,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("gpa", self.gpa),
            ("w", self.w),
            ("l1", self.l1),
            ("iou", self.iou),
            ("ce", self.ce),
            ("eos_coef", self.eos_coef),
        ];
        if let Some((n, v)) = named.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!(
                "loss weight {n} = {v} must be finite and non-negative"
            )));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Invalid(format!("tau = {} outside (0, 1]", self.tau)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Invalid(format!(
                "eps = {} outside (0, 0.5)",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Optional model components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub gpa: bool,
    pub ve: bool,
    pub qe: bool,
    pub cue: bool,
}

impl Toggles {
    pub const NONE: Self = Self {
        gpa: false,
        ve: false,
        qe: false,
        cue: false,
    };
    pub const ALL: Self = Self {
        gpa: true,
        ve: true,
        qe: true,
        cue: true,
    };
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

impl FromStr for Toggles {
    type Err = Error;

    /// Comma-separated subset of `gpa,ve,qe,cue`, or `none` / `all`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "" | "none" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut t = Self::NONE;
        for part in s.split(',').map(str::trim) {
            match part {
                "gpa" => t.gpa = true,
                "ve" => t.ve = true,
                "qe" => t.qe = true,
                "cue" => t.cue = true,
                other => {
                    return Err(Error::Invalid(format!(
                        "unknown toggle {other:?} (expected a subset of gpa,ve,qe,cue)"
                    )))
                }
            }
        }
        Ok(t)
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [
            ("gpa", self.gpa),
            ("ve", self.ve),
            ("qe", self.qe),
            ("cue", self.cue),
        ]
        .iter()
        .filter(|(_, b)| *b)
        .map(|(n, _)| *n)
        .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join(","))
        }
    }
}

/// The ten module combinations compared in the ablation grid.
pub const ABLATION_SETTINGS: [(char, Toggles); 10] = {
    const fn t(gpa: bool, ve: bool, qe: bool, cue: bool) -> Toggles {
        Toggles { gpa, ve, qe, cue }
    }
    [
        ('a', t(false, false, false, false)),
        ('b', t(true, false, false, false)),
        ('c', t(false, true, false, false)),
        ('d', t(false, false, true, false)),
        ('e', t(false, false, false, true)),
        ('f', t(false, false, true, true)),
        ('g', t(true, true, false, false)),
        ('h', t(true, false, true, true)),
        ('i', t(false, true, true, true)),
        ('j', t(true, true, true, true)),
    ]
};

pub fn ablation_setting(id: char) -> Result<Toggles> {
    ABLATION_SETTINGS
        .iter()
        .find(|(c, _)| *c == id)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Invalid(format!("unknown ablation setting {id:?} (expected a-j)")))
}

/// Where query-word features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEncoder {
    /// Precomputed text and masked-text feature files.
    #[default]
    Features,
    /// Trainable token-embedding table over the dataset vocabulary.
    Embedding,
}

impl FromStr for TextEncoder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Self::Features),
            "embedding" => Ok(Self::Embedding),
            other => Err(Error::Invalid(format!(
                "unknown text encoder {other:?} (expected features|embedding)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
    pub expansion_tokens: usize,
    pub proj_layers: usize,
    pub dropout: f64,
    pub text_encoder: TextEncoder,
    pub saliency: SaliencyMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        TrainConfig::desk().model
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.num_queries == 0 || self.expansion_tokens == 0 || self.ffn_dim == 0 {
            return Err(Error::Invalid(
                "num_queries, expansion_tokens and ffn_dim must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Stop early once the evaluation split reaches both targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopTargets {
    pub r1_07: f64,
    pub map_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub profile: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub mask_ratio: f64,
    pub train_split: String,
    /// Split used for best-checkpoint selection; falls back to the training
    /// split when absent from the dataset.
    pub val_split: String,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub top_k: usize,
    pub nms_iou: f64,
    pub ckpt_dir: Option<PathBuf>,
    pub execution: Execution,
    pub stop_at: Option<StopTargets>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small model for CPU runs on synthetic data.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            epochs: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            seed: 2024,
            toggles: Toggles::ALL,
            model: ModelConfig {
                hidden: 64,
                heads: 4,
                enc_layers: 1,
                dec_layers: 1,
                ffn_dim: 128,
                num_queries: 10,
                expansion_tokens: crate::debias::DEFAULT_EXPANSION_TOKENS,
                proj_layers: 2,
                dropout: 0.0,
                text_encoder: TextEncoder::Features,
                saliency: SaliencyMode::Gpa,
            },
            loss: LossWeights::default(),
            mask_ratio: crate::featurestore::masking::DEFAULT_MASK_RATIO,
            train_split: "train".into(),
            val_split: "val".into(),
            eval_every: 5,
            top_k: 10,
            nms_iou: 0.7,
            ckpt_dir: None,
            execution: Execution::default(),
            stop_at: None,
        }
    }

    /// Full-size settings for real features.
    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            profile: "paper".into(),
            epochs: 200,
            batch_size: 256,
            lr: 2e-4,
            model: ModelConfig {
                hidden: 256,
                heads: 8,
                enc_layers: 2,
                dec_layers: 2,
                ffn_dim: 1024,
                dropout: 0.1,
                ..desk.model
            },
            eval_every: 1,
            ..desk
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Invalid(format!(
                "unknown profile {other:?} (expected desk|paper)"
            ))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `QDVMR_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 || self.top_k == 0 {
            return Err(Error::Invalid(
                "epochs, batch_size, eval_every and top_k must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Invalid(
                "weight_decay must be >= 0 and grad_clip > 0".into(),
            ));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return Err(Error::Invalid(format!(
                "nms_iou {} outside (0, 1]",
                self.nms_iou
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Invalid(format!(
                "mask_ratio {} outside (0, 1]",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}
