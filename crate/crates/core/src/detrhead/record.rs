//! JSON Lines prediction records.
//!
//! One object per line:
//! `{"sample_id": str, "pred_relevant_windows": [[start_s, end_s, score], ...],
//!   "pred_saliency_scores": [float, ...]}` with windows ranked by descending
//! score.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::RankedMoment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub pred_relevant_windows: Vec<[f64; 3]>,
    pub pred_saliency_scores: Vec<f64>,
}

impl PredictionRecord {
    pub fn new(sample_id: impl Into<String>, moments: &[RankedMoment], saliency: Vec<f64>) -> Self {
        Self {
            sample_id: sample_id.into(),
            pred_relevant_windows: moments.iter().map(|m| [m.start, m.end, m.score]).collect(),
            pred_saliency_scores: saliency,
        }
    }

    pub fn moments(&self) -> Vec<RankedMoment> {
        self.pred_relevant_windows
            .iter()
            .map(|w| RankedMoment {
                start: w[0],
                end: w[1],
                score: w[2],
            })
            .collect()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.sample_id.is_empty() {
            return Err("empty sample_id".into());
        }
        for (i, w) in self.pred_relevant_windows.iter().enumerate() {
            if w.iter().any(|v| !v.is_finite()) {
                return Err(format!("window {i} has a non-finite value"));
            }
            if !(w[0] >= 0.0 && w[1] > w[0]) {
                return Err(format!(
                    "window {i} is not a valid interval: [{}, {}]",
                    w[0], w[1]
                ));
            }
            if i > 0 && w[2] > self.pred_relevant_windows[i - 1][2] {
                return Err(format!("window {i} is ranked above a higher score"));
            }
        }
        if self.pred_saliency_scores.iter().any(|v| !v.is_finite()) {
            return Err("non-finite saliency score".into());
        }
        Ok(())
    }
}

/// Checks one JSON line against the record schema.
pub fn validate_prediction_line(line: &str) -> std::result::Result<PredictionRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let rec: PredictionRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
    rec.validate()?;
    Ok(rec)
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        r.validate().map_err(|m| Error::Validation {
            sample_id: r.sample_id.clone(),
            message: m,
        })?;
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            validate_prediction_line(l).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            })
        })
        .collect()
}
