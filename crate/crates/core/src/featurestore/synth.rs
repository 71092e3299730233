//! Desk-scale synthetic datasets with a planted, learnable signal.
//!
//! Each sample draws a concept `k`. Clips inside the ground-truth moment
//! carry concept `k`'s visual vector; an optional distractor span elsewhere
//! carries a different concept. The query contains two of concept `k`'s
//! vocabulary words, whose text embeddings carry concept `k`'s text vector.
//! Vocabulary layout: `[0, concepts·words_per_concept)` are concept words,
//! then filler words, and the last id is the mask sentinel.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::labels::clip_labels_from_moments;
use super::masking::{mask_query, DEFAULT_MASK_RATIO};
use super::{tensor_io, write_manifest, DatasetMeta, Moment, SampleRecord, META_FILE};
use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Training samples.
    pub n: usize,
    /// Extra samples tagged `val`.
    pub n_val: usize,
    /// Maximum clips per video.
    pub clips: usize,
    /// Maximum words per query.
    pub words: usize,
    pub video_dim: usize,
    pub text_dim: usize,
    /// 0 disables audio features.
    pub audio_dim: usize,
    pub seed: u64,
    pub clip_len: f64,
    pub concepts: usize,
    pub words_per_concept: usize,
    pub vocab_size: usize,
    pub noise: f64,
    pub signal: f64,
    pub distractor_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 64,
            n_val: 0,
            clips: 20,
            words: 8,
            video_dim: 32,
            text_dim: 32,
            audio_dim: 0,
            seed: 7,
            clip_len: 2.0,
            concepts: 8,
            words_per_concept: 3,
            vocab_size: 64,
            noise: 0.3,
            signal: 2.5,
            distractor_prob: 0.7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synthetic config: {m}")));
        if self.n == 0 {
            return bad("sample count must be at least 1");
        }
        if self.video_dim < 4 || self.text_dim < 4 || (self.audio_dim != 0 && self.audio_dim < 4) {
            return bad("feature dims must be at least 4");
        }
        if self.clips < 4 || self.words < 3 {
            return bad("need at least 4 clips and 3 words");
        }
        if self.concepts < 2 || self.words_per_concept < 2 {
            return bad("need at least 2 concepts with 2 words each");
        }
        if self.vocab_size < self.concepts * self.words_per_concept + 2 {
            return bad("vocabulary too small for concept words, filler and mask sentinel");
        }
        if self.clip_len.is_nan() || self.clip_len <= 0.0 {
            return bad("clip_len must be positive");
        }
        Ok(())
    }

    pub fn concept_of_token(&self, id: u32) -> Option<usize> {
        let id = id as usize;
        (id < self.concepts * self.words_per_concept).then(|| id / self.words_per_concept)
    }

    fn filler_range(&self) -> std::ops::Range<u32> {
        (self.concepts * self.words_per_concept) as u32..(self.vocab_size - 1) as u32
    }
}

fn normal_mat(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Mat {
    Mat::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize, norm: f64) -> Mat {
    let mut m = normal_mat(rng, (rows, dim), 1.0);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r.mapv_inplace(|v| v / n * norm);
    }
    m
}

/// Writes `dataset.json`, `manifest.jsonl`, `synth.json` and QDT feature
/// files under `out`. Output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let concept_video = unit_rows(&mut rng, cfg.concepts, cfg.video_dim, cfg.signal);
    let concept_audio =
        (cfg.audio_dim > 0).then(|| unit_rows(&mut rng, cfg.concepts, cfg.audio_dim, cfg.signal));
    let concept_text = unit_rows(&mut rng, cfg.concepts, cfg.text_dim, cfg.signal);
    let mut table = normal_mat(
        &mut rng,
        (cfg.vocab_size, cfg.text_dim),
        1.0 / (cfg.text_dim as f64).sqrt(),
    );
    for id in 0..cfg.concepts * cfg.words_per_concept {
        let k = id / cfg.words_per_concept;
        let mut row = table.row_mut(id);
        row *= 0.3;
        row += &concept_text.row(k);
    }
    let mask_id = (cfg.vocab_size - 1) as u32;

    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out)?;
    for sub in ["video", "text", "masked_text", "audio"] {
        if sub != "audio" || cfg.audio_dim > 0 {
            mkdir(&out.join("features").join(sub))?;
        }
    }

    let mut records = Vec::with_capacity(cfg.n + cfg.n_val);
    for i in 0..cfg.n + cfg.n_val {
        let min_l = (3 * cfg.clips).div_ceil(4).max(4);
        let l = rng.random_range(min_l..=cfg.clips);
        let width = rng.random_range(2..=(l / 2).max(2));
        let start = rng.random_range(0..=l - width);
        let concept = rng.random_range(0..cfg.concepts);

        let mut video = normal_mat(&mut rng, (l, cfg.video_dim), cfg.noise);
        let mut audio =
            (cfg.audio_dim > 0).then(|| normal_mat(&mut rng, (l, cfg.audio_dim), cfg.noise));
        for c in start..start + width {
            let mut row = video.row_mut(c);
            row += &concept_video.row(concept);
            if let (Some(a), Some(ca)) = (audio.as_mut(), concept_audio.as_ref()) {
                let mut arow = a.row_mut(c);
                arow += &ca.row(concept);
            }
        }
        if rng.random::<f64>() < cfg.distractor_prob {
            let other = (concept + rng.random_range(1..cfg.concepts)) % cfg.concepts;
            let dw = rng.random_range(2..=4usize);
            let spots: Vec<usize> = (0..=l.saturating_sub(dw))
                .filter(|&s| s + dw <= start || s >= start + width)
                .collect();
            if let Some(&s) = spots.choose(&mut rng) {
                for c in s..s + dw {
                    let mut row = video.row_mut(c);
                    row += &concept_video.row(other);
                }
            }
        }

        let n_words = rng.random_range((cfg.words - 2).max(3)..=cfg.words);
        let mut concept_words: Vec<u32> = (0..cfg.words_per_concept)
            .map(|j| (concept * cfg.words_per_concept + j) as u32)
            .collect();
        concept_words.shuffle(&mut rng);
        let mut tokens: Vec<u32> = concept_words[..2].to_vec();
        let filler = cfg.filler_range();
        while tokens.len() < n_words {
            tokens.push(rng.random_range(filler.clone()));
        }
        tokens.shuffle(&mut rng);
        let text = table.select(
            ndarray::Axis(0),
            &tokens.iter().map(|&t| t as usize).collect::<Vec<_>>(),
        );
        let masked = mask_query(&tokens, DEFAULT_MASK_RATIO, rng.random(), mask_id)?;
        let mut masked_text = text.clone();
        for &p in &masked.mask_positions {
            masked_text.row_mut(p).fill(0.0);
        }

        let duration = l as f64 * cfg.clip_len;
        let moments = vec![Moment(
            start as f64 * cfg.clip_len,
            (start + width) as f64 * cfg.clip_len,
        )];
        let clip_relevance = clip_labels_from_moments(&moments, duration, cfg.clip_len);
        let saliency: Vec<u8> = (0..l)
            .map(|c| {
                if c >= start && c < start + width {
                    if width >= 3 && (c == start || c == start + width - 1) {
                        3
                    } else {
                        4
                    }
                } else {
                    rng.random_range(0..=1)
                }
            })
            .collect();

        let sample_id = format!("s{i:04}");
        let video_id = format!("v{i:04}");
        let video_feat = format!("features/video/{video_id}.qdt");
        let text_feat = format!("features/text/{sample_id}.qdt");
        let masked_feat = format!("features/masked_text/{sample_id}.qdt");
        tensor_io::write_tensor(&out.join(&video_feat), &video)?;
        tensor_io::write_tensor(&out.join(&text_feat), &text)?;
        tensor_io::write_tensor(&out.join(&masked_feat), &masked_text)?;
        let audio_feat = match &audio {
            Some(a) => {
                let p = format!("features/audio/{video_id}.qdt");
                tensor_io::write_tensor(&out.join(&p), a)?;
                Some(p)
            }
            None => None,
        };
        let query_text = tokens
            .iter()
            .map(|&t| match cfg.concept_of_token(t) {
                Some(k) => format!("c{k}w{}", t as usize % cfg.words_per_concept),
                None => format!("w{t}"),
            })
            .collect::<Vec<_>>()
            .join(" ");
        records.push(SampleRecord {
            sample_id,
            video_id,
            query_text,
            query_token_ids: tokens,
            duration,
            clip_len: cfg.clip_len,
            moments,
            clip_relevance,
            saliency_labels: Some(saliency),
            split: if i < cfg.n {
                "train".into()
            } else {
                "val".into()
            },
            mask_positions: Some(masked.mask_positions),
            video_feat,
            text_feat,
            masked_text_feat: Some(masked_feat),
            audio_feat,
        });
    }

    let meta = DatasetMeta {
        vocab_size: cfg.vocab_size,
        clip_len: cfg.clip_len,
        video_dim: cfg.video_dim,
        text_dim: cfg.text_dim,
        audio_dim: cfg.audio_dim,
        manifest: "manifest.jsonl".into(),
    };
    write_pretty(&out.join(META_FILE), &meta)?;
    write_pretty(&out.join("synth.json"), cfg)?;
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
