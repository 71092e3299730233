//! Moment retrieval and highlight detection metrics.
//!
//! Moment AP uses greedy matching of score-ranked predictions to unmatched
//! ground truths, followed by all-point interpolated precision. Highlight AP
//! reuses the same interpolation over score-ranked clips. Score ties are
//! broken by original index.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detrhead::RankedMoment;
use crate::error::{Error, Result};
use crate::exec::Execution;

pub use crate::detrhead::iou_1d;

/// IoU thresholds averaged by `map_avg`: 0.50, 0.55, ..., 0.95.
pub const MAP_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

/// Label at or above which a clip counts as a highlight.
pub const DEFAULT_POSITIVE_LABEL: u8 = 4;

/// IoU that rejects degenerate intervals.
pub fn checked_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if e <= s || !s.is_finite() || !e.is_finite() {
            return Err(Error::Invalid(format!("degenerate interval [{s}, {e}]")));
        }
    }
    Ok(iou_1d(a, b))
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("IoU threshold {t} outside (0, 1]")))
    }
}

/// Indices sorted by descending score, ties by index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn ranked(preds: &[RankedMoment]) -> Vec<(f64, f64)> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    rank_by_score(&scores)
        .into_iter()
        .map(|i| (preds[i].start, preds[i].end))
        .collect()
}

/// All-point interpolated AP from true-positive flags in rank order.
pub fn interpolated_ap(tp: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let precision: Vec<f64> = tp
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            hits += t as usize;
            hits as f64 / (k + 1) as f64
        })
        .collect();
    let mut best = 0.0f64;
    let mut ap = 0.0;
    for k in (0..tp.len()).rev() {
        best = best.max(precision[k]);
        if tp[k] {
            ap += best;
        }
    }
    ap / n_pos as f64
}

/// 1.0 when the top-ranked prediction reaches `threshold` IoU with any
/// ground truth.
pub fn recall1_at_iou(preds: &[RankedMoment], gts: &[(f64, f64)], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let order = ranked(preds);
    let top = *order
        .first()
        .ok_or_else(|| Error::Invalid("empty prediction list".into()))?;
    for &g in gts {
        if checked_iou(top, g)? >= threshold {
            return Ok(1.0);
        }
    }
    Ok(0.0)
}

/// Detection AP for one sample. No ground truth gives 0.
pub fn ap_at_iou(preds: &[RankedMoment], gts: &[(f64, f64)], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for p in ranked(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (j, &g) in gts.iter().enumerate() {
            let iou = checked_iou(p, g)?;
            if !used[j] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        tp.push(best.is_some());
    }
    Ok(interpolated_ap(&tp, gts.len()))
}

/// Ranked predictions paired with ground-truth windows.
pub type MomentSample = (Vec<RankedMoment>, Vec<(f64, f64)>);

/// Mean of per-sample AP at each threshold of [`MAP_THRESHOLDS`], averaged.
pub fn map_avg(samples: &[MomentSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &t in &MAP_THRESHOLDS {
        let mut s = 0.0;
        for (p, g) in samples {
            s += ap_at_iou(p, g, t)?;
        }
        total += s / samples.len() as f64;
    }
    Ok(total / MAP_THRESHOLDS.len() as f64)
}

fn check_saliency(scores: &[f64], labels: &[u8]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Invalid("no labeled clips".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} saliency scores for {} labeled clips",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Interpolated AP of score-ranked clips; `None` when no clip is positive.
pub fn hd_ap(scores: &[f64], labels: &[u8], positive: u8) -> Result<Option<f64>> {
    check_saliency(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l >= positive).count();
    if n_pos == 0 {
        return Ok(None);
    }
    let tp: Vec<bool> = rank_by_score(scores)
        .into_iter()
        .map(|i| labels[i] >= positive)
        .collect();
    Ok(Some(interpolated_ap(&tp, n_pos)))
}

/// 1.0 when the top-scored clip is positive.
pub fn hit_at_1(scores: &[f64], labels: &[u8], positive: u8) -> Result<f64> {
    check_saliency(scores, labels)?;
    Ok((labels[rank_by_score(scores)[0]] >= positive) as u8 as f64)
}

/// How highlight AP is aggregated across samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HdAveraging {
    /// Mean of per-sample AP over samples with at least one positive clip.
    #[default]
    PerSample,
    /// One AP over all clips of all samples ranked together.
    Pooled,
}

/// Highlight AP over a dataset of `(scores, labels)` pairs.
pub fn hd_map(samples: &[(&[f64], &[u8])], positive: u8, mode: HdAveraging) -> Result<f64> {
    match mode {
        HdAveraging::PerSample => {
            let mut sum = 0.0;
            let mut n = 0usize;
            for &(s, l) in samples {
                if let Some(ap) = hd_ap(s, l, positive)? {
                    sum += ap;
                    n += 1;
                }
            }
            Ok(if n == 0 { 0.0 } else { sum / n as f64 })
        }
        HdAveraging::Pooled => {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for &(s, l) in samples {
                check_saliency(s, l)?;
                scores.extend_from_slice(s);
                labels.extend_from_slice(l);
            }
            if labels.is_empty() {
                return Ok(0.0);
            }
            Ok(hd_ap(&scores, &labels, positive)?.unwrap_or(0.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub positive_label: u8,
    pub hd_averaging: HdAveraging,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            positive_label: DEFAULT_POSITIVE_LABEL,
            hd_averaging: HdAveraging::PerSample,
        }
    }
}

/// Inputs for scoring one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub sample_id: String,
    pub gts: Vec<(f64, f64)>,
    pub preds: Vec<RankedMoment>,
    pub saliency_scores: Vec<f64>,
    pub saliency_labels: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub sample_id: String,
    pub r1_05: f64,
    pub r1_07: f64,
    pub ap_05: f64,
    pub ap_075: f64,
    pub ap_avg: f64,
    pub hd_ap: Option<f64>,
    pub hit1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1_05: f64,
    pub r1_07: f64,
    pub map_05: f64,
    pub map_075: f64,
    pub map_avg: f64,
    pub hd_map: f64,
    pub hit1: f64,
    pub per_sample: Vec<SampleReport>,
}

/// Top-level numeric fields every serialized report carries.
pub const REPORT_FIELDS: [&str; 7] = [
    "r1_05", "r1_07", "map_05", "map_075", "map_avg", "hd_map", "hit1",
];

fn score_sample(s: &SampleEval, opts: &EvalOptions) -> Result<SampleReport> {
    let ctx = |e: Error| match e {
        Error::Validation { .. } => e,
        other => Error::Validation {
            sample_id: s.sample_id.clone(),
            message: other.to_string(),
        },
    };
    let mut aps = Vec::with_capacity(MAP_THRESHOLDS.len());
    for &t in &MAP_THRESHOLDS {
        aps.push(ap_at_iou(&s.preds, &s.gts, t).map_err(ctx)?);
    }
    let (hd, hit) = match &s.saliency_labels {
        Some(labels) => {
            let ap = hd_ap(&s.saliency_scores, labels, opts.positive_label).map_err(ctx)?;
            let hit = ap
                .map(|_| hit_at_1(&s.saliency_scores, labels, opts.positive_label))
                .transpose()
                .map_err(ctx)?;
            (ap, hit)
        }
        None => (None, None),
    };
    Ok(SampleReport {
        sample_id: s.sample_id.clone(),
        r1_05: recall1_at_iou(&s.preds, &s.gts, 0.5).map_err(ctx)?,
        r1_07: recall1_at_iou(&s.preds, &s.gts, 0.7).map_err(ctx)?,
        ap_05: aps[0],
        ap_075: aps[5],
        ap_avg: aps.iter().sum::<f64>() / aps.len() as f64,
        hd_ap: hd,
        hit1: hit,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores every sample and aggregates. HIT@1 is averaged over the same
/// samples as highlight AP.
pub fn evaluate(samples: &[SampleEval], opts: &EvalOptions, exec: Execution) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let per_sample = exec
        .map(samples, |_, s| score_sample(s, opts))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let hd_map = match opts.hd_averaging {
        HdAveraging::PerSample => mean(per_sample.iter().filter_map(|r| r.hd_ap)),
        HdAveraging::Pooled => {
            let pairs: Vec<(&[f64], &[u8])> = samples
                .iter()
                .filter_map(|s| {
                    s.saliency_labels
                        .as_deref()
                        .map(|l| (s.saliency_scores.as_slice(), l))
                })
                .collect();
            hd_map(&pairs, opts.positive_label, HdAveraging::Pooled)?
        }
    };
    let report = EvalReport {
        r1_05: mean(per_sample.iter().map(|r| r.r1_05)),
        r1_07: mean(per_sample.iter().map(|r| r.r1_07)),
        map_05: mean(per_sample.iter().map(|r| r.ap_05)),
        map_075: mean(per_sample.iter().map(|r| r.ap_075)),
        map_avg: mean(per_sample.iter().map(|r| r.ap_avg)),
        hd_map,
        hit1: mean(per_sample.iter().filter_map(|r| r.hit1)),
        per_sample,
    };
    report.validate().map_err(Error::Invalid)?;
    Ok(report)
}

impl EvalReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.r1_05,
            self.r1_07,
            self.map_05,
            self.map_075,
            self.map_avg,
            self.hd_map,
            self.hit1,
        ]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in REPORT_FIELDS.iter().zip(self.values()) {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Two-column table of the headline numbers, in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, v) in REPORT_FIELDS.iter().zip(self.values()) {
            let _ = writeln!(out, "{name:<8} {:>6.2}", 100.0 * v);
        }
        out
    }
}

/// Checks a serialized report: the seven headline fields are numbers in
/// `[0, 1]` and `per_sample` is an array of objects with a `sample_id`.
pub fn validate_report_json(v: &Value) -> std::result::Result<(), String> {
    let obj = v.as_object().ok_or("report is not a JSON object")?;
    for name in REPORT_FIELDS {
        let x = obj
            .get(name)
            .and_then(Value::as_f64)
            .ok_or_else(|| format!("missing numeric field {name}"))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(format!("{name} = {x} outside [0, 1]"));
        }
    }
    let rows = obj
        .get("per_sample")
        .and_then(Value::as_array)
        .ok_or("missing per_sample array")?;
    for (i, r) in rows.iter().enumerate() {
        if r.get("sample_id").and_then(Value::as_str).is_none() {
            return Err(format!("per_sample[{i}] lacks sample_id"));
        }
    }
    Ok(())
}
