use ndarray::{s, Array3, ArrayView2};

use super::{MaskedQuery, Moment};
use crate::autodiff::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub sample_id: String,
    pub duration: f64,
    pub moments: Vec<Moment>,
    pub clip_relevance: Vec<u8>,
    pub saliency_labels: Option<Vec<u8>>,
}

/// One sample ready for collation.
#[derive(Debug, Clone)]
pub struct CollateItem {
    pub meta: SampleMeta,
    /// `L×D_v` (audio already fused).
    pub video: Mat,
    /// `N×D_t` precomputed text features, absent in token-embedding mode.
    pub text: Option<Mat>,
    pub masked_text: Option<Mat>,
    pub tokens: Vec<u32>,
    pub masked: Option<MaskedQuery>,
}

impl CollateItem {
    pub fn words(&self) -> usize {
        self.text.as_ref().map_or(self.tokens.len(), |t| t.nrows())
    }
}

/// Zero-padded batch. `video_valid[b][i]` / `text_valid[b][j]` mark real rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub video: Array3<f64>,
    pub video_valid: Vec<Vec<bool>>,
    pub text: Option<Array3<f64>>,
    pub masked_text: Option<Array3<f64>>,
    pub text_valid: Vec<Vec<bool>>,
    /// Padded with id 0 to the batch's longest query.
    pub tokens: Vec<Vec<u32>>,
    pub masked: Vec<Option<MaskedQuery>>,
    pub meta: Vec<SampleMeta>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn max_clips(&self) -> usize {
        self.video.dim().1
    }

    pub fn max_words(&self) -> usize {
        self.text_valid.first().map_or(0, |v| v.len())
    }

    pub fn video(&self, b: usize) -> ArrayView2<'_, f64> {
        self.video.index_axis(ndarray::Axis(0), b)
    }

    pub fn text(&self, b: usize) -> Option<ArrayView2<'_, f64>> {
        self.text
            .as_ref()
            .map(|t| t.index_axis(ndarray::Axis(0), b))
    }

    pub fn masked_text(&self, b: usize) -> Option<ArrayView2<'_, f64>> {
        self.masked_text
            .as_ref()
            .map(|t| t.index_axis(ndarray::Axis(0), b))
    }

    /// Padded token ids with the mask sentinel at masked positions.
    pub fn masked_tokens(&self, b: usize) -> Option<Vec<u32>> {
        self.masked[b].as_ref().map(|m| {
            let mut t = self.tokens[b].clone();
            t[..m.token_ids_with_mask.len()].copy_from_slice(&m.token_ids_with_mask);
            t
        })
    }
}

fn pad_stack(items: &[&Mat], rows: usize, what: &str) -> Result<Array3<f64>> {
    let cols = items[0].ncols();
    if let Some(bad) = items.iter().find(|m| m.ncols() != cols) {
        return Err(Error::Shape(format!(
            "{what} feature dims differ across samples ({cols} vs {})",
            bad.ncols()
        )));
    }
    let mut out = Array3::zeros((items.len(), rows, cols));
    for (b, m) in items.iter().enumerate() {
        out.slice_mut(s![b, ..m.nrows(), ..]).assign(m);
    }
    Ok(out)
}

pub fn collate(items: &[CollateItem]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot collate an empty sample list".into()));
    }
    let max_l = items.iter().map(|i| i.video.nrows()).max().unwrap();
    let max_n = items.iter().map(|i| i.words()).max().unwrap();

    let videos: Vec<&Mat> = items.iter().map(|i| &i.video).collect();
    let video = pad_stack(&videos, max_l, "video")?;

    let all_or_none = |count: usize, what: &str| -> Result<bool> {
        match count {
            0 => Ok(false),
            c if c == items.len() => Ok(true),
            _ => Err(Error::Shape(format!(
                "{what} present for only some samples"
            ))),
        }
    };
    let text = if all_or_none(
        items.iter().filter(|i| i.text.is_some()).count(),
        "text features",
    )? {
        let t: Vec<&Mat> = items.iter().map(|i| i.text.as_ref().unwrap()).collect();
        Some(pad_stack(&t, max_n, "text")?)
    } else {
        None
    };
    let masked_text = if all_or_none(
        items.iter().filter(|i| i.masked_text.is_some()).count(),
        "masked text features",
    )? {
        let t: Vec<&Mat> = items
            .iter()
            .map(|i| i.masked_text.as_ref().unwrap())
            .collect();
        for (i, m) in items.iter().zip(&t) {
            if m.nrows() != i.words() {
                return Err(Error::Shape(format!(
                    "{}: masked text has {} rows, text has {}",
                    i.meta.sample_id,
                    m.nrows(),
                    i.words()
                )));
            }
        }
        Some(pad_stack(&t, max_n, "masked text")?)
    } else {
        None
    };

    let video_valid = items
        .iter()
        .map(|i| (0..max_l).map(|r| r < i.video.nrows()).collect())
        .collect();
    let text_valid = items
        .iter()
        .map(|i| (0..max_n).map(|r| r < i.words()).collect())
        .collect();
    let tokens = items
        .iter()
        .map(|i| {
            let mut t = i.tokens.clone();
            t.resize(max_n.max(t.len()), 0);
            t
        })
        .collect();
    Ok(Batch {
        video,
        video_valid,
        text,
        masked_text,
        text_valid,
        tokens,
        masked: items.iter().map(|i| i.masked.clone()).collect(),
        meta: items.iter().map(|i| i.meta.clone()).collect(),
    })
}
