//! Checkpoints: a directory of QDT tensors plus `index.json`.
//!
//! ```text
//! ckpt/
//!   index.json
//!   params/<name>.qdt
//!   adam_m/<name>.qdt
//!   adam_v/<name>.qdt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Toggles, TrainConfig};
use super::model::{InputDims, QdVmr};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::featurestore::tensor_io::{read_tensor, write_tensor};

pub const INDEX_FILE: &str = "index.json";
pub const FORMAT: &str = "qdvmr-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<String>,
    pub v: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub format: String,
    pub epoch: usize,
    pub step: u64,
    pub model: ModelConfig,
    pub toggles: Toggles,
    pub dims: InputDims,
    pub config: Option<TrainConfig>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: QdVmr,
    pub optimizer: Option<AdamW>,
    pub epoch: usize,
    pub config: Option<TrainConfig>,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.qdt")
}

pub fn save(
    dir: &Path,
    model: &QdVmr,
    optimizer: Option<&AdamW>,
    epoch: usize,
    config: Option<&TrainConfig>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let store = &model.store;
    let mut params = Vec::with_capacity(store.len());
    let mut m_files = Vec::new();
    let mut v_files = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        let file = format!("params/{}", file_name(name));
        let value = store.get(id);
        write_tensor(&dir.join(&file), value)?;
        params.push(ParamEntry {
            name: name.to_string(),
            file,
            shape: [value.nrows(), value.ncols()],
        });
        if let Some(opt) = optimizer {
            let mf = format!("adam_m/{}", file_name(name));
            let vf = format!("adam_v/{}", file_name(name));
            write_tensor(&dir.join(&mf), &opt.m[id.0])?;
            write_tensor(&dir.join(&vf), &opt.v[id.0])?;
            m_files.push(mf);
            v_files.push(vf);
        }
    }
    let index = CheckpointIndex {
        format: FORMAT.into(),
        epoch,
        step: optimizer.map_or(0, |o| o.step),
        model: model.cfg,
        toggles: model.toggles,
        dims: model.dims,
        config: config.cloned(),
        params,
        optimizer: optimizer.map(|o| OptimizerEntry {
            config: o.cfg,
            step: o.step,
            m: m_files,
            v: v_files,
        }),
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    if index.format != FORMAT {
        return Err(Error::Invalid(format!(
            "{}: unsupported checkpoint format {:?}",
            path.display(),
            index.format
        )));
    }
    Ok(index)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let index = read_index(dir)?;
    let mut model = QdVmr::new(index.model, index.toggles, index.dims, 0)?;
    if index.params.len() != model.store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint lists {} tensors, model has {}",
            index.params.len(),
            model.store.len()
        )));
    }
    let read = |rel: &str, want: (usize, usize)| -> Result<crate::autodiff::Mat> {
        let path: PathBuf = dir.join(rel);
        let m = read_tensor(&path)?;
        if m.dim() != want {
            return Err(Error::Tensor {
                path,
                message: format!("shape {:?}, expected {want:?}", m.dim()),
            });
        }
        Ok(m)
    };
    let mut ids = Vec::with_capacity(index.params.len());
    for p in &index.params {
        let id = model.store.id(&p.name).ok_or_else(|| {
            Error::Invalid(format!(
                "checkpoint tensor {:?} has no model parameter",
                p.name
            ))
        })?;
        let want = model.store.get(id).dim();
        *model.store.get_mut(id) = read(&p.file, want)?;
        ids.push(id);
    }
    let optimizer = match &index.optimizer {
        Some(o) => {
            let mut opt = AdamW::new(o.config, &model.store);
            opt.step = o.step;
            for ((id, mf), vf) in ids.iter().zip(&o.m).zip(&o.v) {
                let want = model.store.get(*id).dim();
                opt.m[id.0] = read(mf, want)?;
                opt.v[id.0] = read(vf, want)?;
            }
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: index.epoch,
        config: index.config,
    })
}
