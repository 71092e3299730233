//! JSON Lines manifests in the native schema or the QVHighlights schema.
//!
//! | native              | QVHighlights        |
//! |---------------------|---------------------|
//! | `sample_id`         | `qid`               |
//! | `video_id`          | `vid`               |
//! | `query_text`        | `query`             |
//! | `moments`           | `relevant_windows`  |
//! | `clip_relevance`    | `relevant_clip_ids` |
//! | `saliency_labels`   | `saliency_scores`   |
//!
//! QVHighlights saliency scores (one row of annotator grades per relevant
//! clip) are folded into one label per clip by rounding the annotator mean;
//! clips outside `relevant_clip_ids` get label 0. Records without
//! `query_token_ids` are tokenized by [`hash_tokenize`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{clip_labels_from_moments, num_clips};
use super::Moment;
use crate::error::{Error, Result};

pub const DEFAULT_CLIP_LEN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub video_id: String,
    pub query_text: String,
    pub query_token_ids: Vec<u32>,
    pub duration: f64,
    pub clip_len: f64,
    pub moments: Vec<Moment>,
    pub clip_relevance: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_labels: Option<Vec<u8>>,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_positions: Option<Vec<usize>>,
    pub video_feat: String,
    pub text_feat: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masked_text_feat: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_feat: Option<String>,
}

impl SampleRecord {
    pub fn num_clips(&self) -> usize {
        self.clip_relevance.len()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |message: String| {
            Err(Error::Validation {
                sample_id: self.sample_id.clone(),
                message,
            })
        };
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if self.clip_len.is_nan() || self.clip_len <= 0.0 {
            return bad(format!("clip_len {} must be positive", self.clip_len));
        }
        for m in &self.moments {
            if !(0.0 <= m.start() && m.start() < m.end() && m.end() <= self.duration) {
                return bad(format!(
                    "moment [{}, {}] violates 0 <= start < end <= duration ({})",
                    m.start(),
                    m.end(),
                    self.duration
                ));
            }
        }
        let l = num_clips(self.duration, self.clip_len);
        if self.clip_relevance.len() != l {
            return bad(format!(
                "clip_relevance has {} entries, expected ceil(duration / clip_len) = {l}",
                self.clip_relevance.len()
            ));
        }
        if self.clip_relevance.iter().any(|&c| c > 1) {
            return bad("clip_relevance must be binary".into());
        }
        if let Some(s) = &self.saliency_labels {
            if s.len() != l {
                return bad(format!(
                    "saliency_labels has {} entries, expected {l}",
                    s.len()
                ));
            }
            if s.iter().any(|&v| v > 4) {
                return bad("saliency labels must lie in 0..=4".into());
            }
        }
        if self.query_token_ids.is_empty() {
            return bad("query has no tokens".into());
        }
        if let Some(&t) = self
            .query_token_ids
            .iter()
            .find(|&&t| t as usize >= vocab_size)
        {
            return bad(format!("token id {t} >= vocabulary size {vocab_size}"));
        }
        if let Some(pos) = &self.mask_positions {
            if pos.iter().any(|&p| p >= self.query_token_ids.len()) {
                return bad("mask position beyond query length".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split<'a>(&'a self, name: &str) -> impl Iterator<Item = &'a SampleRecord> + 'a {
        let name = name.to_string();
        self.records.iter().filter(move |r| r.split == name)
    }

    pub fn has_split(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.split == name)
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ManifestOptions {
    pub vocab_size: usize,
    pub clip_len: f64,
}

impl Default for ManifestOptions {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            clip_len: DEFAULT_CLIP_LEN,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    #[serde(alias = "qid")]
    sample_id: serde_json::Value,
    #[serde(alias = "vid")]
    video_id: Option<String>,
    #[serde(alias = "query")]
    query_text: Option<String>,
    query_token_ids: Option<Vec<i64>>,
    duration: f64,
    clip_len: Option<f64>,
    #[serde(alias = "relevant_windows")]
    moments: Option<Vec<[f64; 2]>>,
    clip_relevance: Option<Vec<u8>>,
    relevant_clip_ids: Option<Vec<usize>>,
    saliency_labels: Option<Vec<u8>>,
    saliency_scores: Option<Vec<Vec<f64>>>,
    split: Option<String>,
    mask_positions: Option<Vec<usize>>,
    video_feat: Option<String>,
    text_feat: Option<String>,
    masked_text_feat: Option<String>,
    audio_feat: Option<String>,
}

/// FNV-1a word hashing into `[0, vocab_size - 1)`; the last id stays free
/// for the mask sentinel.
pub fn hash_tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    let buckets = vocab_size.saturating_sub(1).max(1) as u64;
    text.split_whitespace()
        .map(|w| {
            let w: String = w
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            let mut h: u64 = 0xcbf29ce484222325;
            for b in w.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (h % buckets) as u32
        })
        .collect()
}

fn convert(
    raw: RawRecord,
    opts: &ManifestOptions,
) -> std::result::Result<SampleRecord, (String, String)> {
    let sample_id = match raw.sample_id {
        serde_json::Value::String(s) => s,
        serde_json::Value::Number(n) => n.to_string(),
        other => {
            return Err((
                other.to_string(),
                "sample_id must be a string or number".into(),
            ))
        }
    };
    let fail = |m: String| (sample_id.clone(), m);
    let clip_len = raw.clip_len.unwrap_or(opts.clip_len);
    let moments: Vec<Moment> = raw
        .moments
        .unwrap_or_default()
        .into_iter()
        .map(|[s, e]| Moment(s, e))
        .collect();
    let query_text = raw.query_text.unwrap_or_default();
    let query_token_ids = match raw.query_token_ids {
        Some(ids) => ids
            .into_iter()
            .map(|t| u32::try_from(t).map_err(|_| fail(format!("negative token id {t}"))))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        None => hash_tokenize(&query_text, opts.vocab_size),
    };
    if !(clip_len > 0.0 && raw.duration > 0.0) {
        return Err(fail("duration and clip_len must be positive".into()));
    }
    let l = num_clips(raw.duration, clip_len);
    let clip_relevance = match (raw.clip_relevance, &raw.relevant_clip_ids) {
        (Some(c), _) => c,
        (None, Some(ids)) => {
            let mut c = vec![0u8; l];
            for &i in ids {
                *c.get_mut(i)
                    .ok_or_else(|| fail(format!("relevant clip id {i} >= {l} clips")))? = 1;
            }
            c
        }
        (None, None) => clip_labels_from_moments(&moments, raw.duration, clip_len),
    };
    let saliency_labels = match (raw.saliency_labels, raw.saliency_scores) {
        (Some(s), _) => Some(s),
        (None, Some(scores)) => {
            let ids = raw
                .relevant_clip_ids
                .as_ref()
                .ok_or_else(|| fail("saliency_scores requires relevant_clip_ids".into()))?;
            if ids.len() != scores.len() {
                return Err(fail(
                    "saliency_scores and relevant_clip_ids differ in length".into(),
                ));
            }
            let mut s = vec![0u8; l];
            for (&i, grades) in ids.iter().zip(&scores) {
                if grades.is_empty() {
                    continue;
                }
                let mean = grades.iter().sum::<f64>() / grades.len() as f64;
                if let Some(slot) = s.get_mut(i) {
                    *slot = mean.round().clamp(0.0, 4.0) as u8;
                }
            }
            Some(s)
        }
        (None, None) => None,
    };
    let video_id = raw.video_id.unwrap_or_else(|| sample_id.clone());
    Ok(SampleRecord {
        video_feat: raw
            .video_feat
            .unwrap_or_else(|| format!("features/video/{video_id}.qdt")),
        text_feat: raw
            .text_feat
            .unwrap_or_else(|| format!("features/text/{sample_id}.qdt")),
        masked_text_feat: raw.masked_text_feat,
        audio_feat: raw.audio_feat,
        sample_id,
        video_id,
        query_text,
        query_token_ids,
        duration: raw.duration,
        clip_len,
        moments,
        clip_relevance,
        saliency_labels,
        split: raw.split.unwrap_or_else(|| "train".into()),
        mask_positions: raw.mask_positions,
    })
}

/// Parses one manifest line without validating invariants.
pub fn parse_record(
    line: &str,
    opts: &ManifestOptions,
) -> std::result::Result<SampleRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    convert(raw, opts).map_err(|(id, m)| format!("sample {id}: {m}"))
}

pub fn load_manifest(path: &Path, opts: &ManifestOptions) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let rec = convert(raw, opts)
            .map_err(|(sample_id, message)| Error::Validation { sample_id, message })?;
        rec.validate(opts.vocab_size)?;
        records.push(rec);
    }
    Ok(DatasetManifest { records })
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn native(id: &str, end: f64) -> String {
        format!(
            r#"{{"sample_id":"{id}","video_id":"v{id}","query_text":"a b","query_token_ids":[1,2],"duration":10.0,"clip_len":2.0,"moments":[[2.0,{end}]],"clip_relevance":[0,1,1,0,0],"split":"train","video_feat":"v.qdt","text_feat":"t.qdt"}}"#
        )
    }

    #[test]
    fn three_lines_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            [native("a", 6.0), native("b", 6.0), native("c", 6.0)].join("\n"),
        )
        .unwrap();
        let m = load_manifest(&p, &ManifestOptions::default()).unwrap();
        let ids: Vec<_> = m.records.iter().map(|r| r.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn end_past_duration_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, [native("ok", 6.0), native("broken", 12.0)].join("\n")).unwrap();
        match load_manifest(&p, &ManifestOptions::default()) {
            Err(Error::Validation { sample_id, .. }) => assert_eq!(sample_id, "broken"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(&p, format!("{}\n{{not json\n", native("a", 6.0))).unwrap();
        match load_manifest(&p, &ManifestOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn token_ids_must_fit_vocabulary() {
        let rec = parse_record(&native("a", 6.0), &ManifestOptions::default()).unwrap();
        assert!(rec.validate(3).is_ok());
        assert!(rec.validate(2).is_err());
    }

    #[test]
    fn hash_tokenizer_reserves_sentinel() {
        let ids = hash_tokenize("The cat, the CAT!", 8);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[1], ids[3]);
        assert!(ids.iter().all(|&t| t < 7));
    }
}
