//! Dataset manifests, feature tensors, query masking, clip labels, synthetic
//! data and batch collation.

mod batch;
mod labels;
mod manifest;
pub mod masking;
pub mod synth;
pub mod tensor_io;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Axis};
use serde::{Deserialize, Serialize};

pub use batch::{collate, Batch, CollateItem, SampleMeta};
pub use labels::{clip_labels_from_moments, num_clips};
pub use manifest::{
    hash_tokenize, load_manifest, parse_record, write_manifest, DatasetManifest, ManifestOptions,
    SampleRecord, DEFAULT_CLIP_LEN,
};
pub use masking::{mask_count, mask_query, MaskedQuery, DEFAULT_MASK_RATIO};
pub use tensor_io::{read_tensor, write_tensor};

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// A ground-truth window `[start, end]` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment(pub f64, pub f64);

impl Moment {
    pub fn start(&self) -> f64 {
        self.0
    }

    pub fn end(&self) -> f64 {
        self.1
    }

    pub fn length(&self) -> f64 {
        self.1 - self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub video: Mat,
    pub text: Mat,
    pub masked_text: Option<Mat>,
    pub audio: Option<Mat>,
}

/// Truncates or zero-pads `m` to exactly `rows` rows.
pub fn align_rows(m: &Mat, rows: usize) -> Mat {
    let mut out = Mat::zeros((rows, m.ncols()));
    let n = rows.min(m.nrows());
    out.slice_mut(s![..n, ..]).assign(&m.slice(s![..n, ..]));
    out
}

impl FeatureBundle {
    pub fn clips(&self) -> usize {
        self.video.nrows()
    }

    pub fn words(&self) -> usize {
        self.text.nrows()
    }

    /// Video features with audio appended along the feature axis.
    pub fn fused_video(&self) -> Mat {
        match &self.audio {
            Some(a) => {
                concatenate(Axis(1), &[self.video.view(), a.view()]).expect("audio aligned at load")
            }
            None => self.video.clone(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = |m: &Mat| m.iter().all(|v| v.is_finite());
        if !finite(&self.video) || !finite(&self.text) {
            return Err("non-finite feature values".into());
        }
        if let Some(a) = &self.audio {
            if a.nrows() != self.video.nrows() || !finite(a) {
                return Err("audio must be finite and share the clip axis with video".into());
            }
        }
        if let Some(w) = &self.masked_text {
            if w.dim() != self.text.dim() || !finite(w) {
                return Err("masked text must be finite and match text shape".into());
            }
        }
        Ok(())
    }
}

/// `dataset.json`, stored next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub vocab_size: usize,
    pub clip_len: f64,
    pub video_dim: usize,
    pub text_dim: usize,
    #[serde(default)]
    pub audio_dim: usize,
    #[serde(default = "default_manifest_name")]
    pub manifest: String,
}

fn default_manifest_name() -> String {
    "manifest.jsonl".into()
}

impl DatasetMeta {
    /// Last vocabulary id is reserved for masked words.
    pub fn mask_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    /// Input width of the video projection (video plus audio features).
    pub fn fused_video_dim(&self) -> usize {
        self.video_dim + self.audio_dim
    }
}

pub const META_FILE: &str = "dataset.json";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub meta: DatasetMeta,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let meta_path = root.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if meta.vocab_size < 2 {
            return Err(Error::Invalid("vocab_size must be at least 2".into()));
        }
        let opts = ManifestOptions {
            vocab_size: meta.vocab_size,
            clip_len: meta.clip_len,
        };
        let manifest = load_manifest(&root.join(&meta.manifest), &opts)?;
        Ok(Self {
            root: root.to_path_buf(),
            meta,
            manifest,
        })
    }

    pub fn records(&self, split: &str) -> Vec<&SampleRecord> {
        self.manifest.split(split).collect()
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Loads and validates the feature arrays of one record. Video and audio
    /// rows are aligned to the record's clip count.
    pub fn load_features(&self, rec: &SampleRecord) -> Result<FeatureBundle> {
        let l = rec.num_clips();
        let video = align_rows(&read_tensor(&self.resolve(&rec.video_feat))?, l);
        let text = read_tensor(&self.resolve(&rec.text_feat))?;
        let masked_text = rec
            .masked_text_feat
            .as_deref()
            .map(|p| read_tensor(&self.resolve(p)))
            .transpose()?;
        let audio = rec
            .audio_feat
            .as_deref()
            .map(|p| read_tensor(&self.resolve(p)).map(|a| align_rows(&a, l)))
            .transpose()?;
        let bundle = FeatureBundle {
            video,
            text,
            masked_text,
            audio,
        };
        let invalid = |message: String| Error::Validation {
            sample_id: rec.sample_id.clone(),
            message,
        };
        bundle.validate().map_err(invalid)?;
        if bundle.video.ncols() != self.meta.video_dim {
            return Err(invalid(format!(
                "video feature dim {} != dataset video_dim {}",
                bundle.video.ncols(),
                self.meta.video_dim
            )));
        }
        if bundle.text.ncols() != self.meta.text_dim {
            return Err(invalid(format!(
                "text feature dim {} != dataset text_dim {}",
                bundle.text.ncols(),
                self.meta.text_dim
            )));
        }
        let audio_dim = bundle.audio.as_ref().map_or(0, |a| a.ncols());
        if audio_dim != self.meta.audio_dim {
            return Err(invalid(format!(
                "audio feature dim {audio_dim} != dataset audio_dim {}",
                self.meta.audio_dim
            )));
        }
        Ok(bundle)
    }
}
