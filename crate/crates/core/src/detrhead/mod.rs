//! Transformer encoder–decoder with learnable moment queries, set matching,
//! span losses, saliency scoring and ranked prediction.

pub mod hungarian;
mod record;
mod span;

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hungarian::MatchResult;
pub use record::{read_predictions, validate_prediction_line, write_predictions, PredictionRecord};
pub use span::{giou_1d, giou_loss, giou_rows, iou_1d, span_l1, MomentSpan};

use crate::autodiff::{softmax_rows_value, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{DecoderLayer, EncoderLayer, Linear, Mlp, ParamId, ParamStore, Session};

/// Index of the foreground class in the classifier logits.
pub const FOREGROUND: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmrWeights {
    pub l1: f64,
    pub iou: f64,
    pub ce: f64,
    /// Weight of the background class in the classification loss.
    pub eos_coef: f64,
}

impl Default for VmrWeights {
    fn default() -> Self {
        Self {
            l1: 10.0,
            iou: 1.0,
            ce: 4.0,
            eos_coef: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMode {
    /// Clip-wise query similarity `S̄`.
    #[default]
    Gpa,
    /// Linear map on encoded video tokens.
    Head,
}

impl FromStr for SaliencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpa" => Ok(Self::Gpa),
            "head" => Ok(Self::Head),
            other => Err(Error::Invalid(format!(
                "unknown saliency mode {other:?} (expected gpa|head)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetrConfig {
    pub hidden: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_dim: usize,
    pub num_queries: usize,
}

/// Fixed sinusoidal position table, `len×dim`.
pub fn sinusoidal(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let k = (i / 2) as f64 * 2.0;
        let angle = pos as f64 / 10000f64.powf(k / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Segment ids for type embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Video = 0,
    Expansion = 1,
    Text = 2,
}

#[derive(Debug, Clone)]
pub struct DetrHead {
    pub cfg: DetrConfig,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub queries: ParamId,
    pub type_embed: ParamId,
    pub span_head: Mlp,
    pub class_head: Linear,
    pub saliency_head: Option<Linear>,
}

/// Decoder outputs: `spans` (`M×2`, `(center, width)` in `(0,1)`) and
/// foreground/background `logits` (`M×2`).
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub spans: Var,
    pub logits: Var,
}

impl DetrHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        cfg: DetrConfig,
        saliency_head: bool,
    ) -> Self {
        let h = cfg.hidden;
        let encoder = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("enc.{i}"), h, cfg.heads, cfg.ffn_dim))
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("dec.{i}"), h, cfg.heads, cfg.ffn_dim))
            .collect();
        let queries = store.add(
            "dec.queries",
            crate::gradcheck::random_mat(rng, (cfg.num_queries, h), 1.0),
        );
        let type_embed = store.add(
            "enc.type_embed",
            crate::gradcheck::random_mat(rng, (3, h), 0.02),
        );
        Self {
            cfg,
            encoder,
            decoder,
            queries,
            type_embed,
            span_head: Mlp::new(store, rng, "head.span", &[h, h, 2]),
            class_head: Linear::new(store, rng, "head.class", h, 2, true),
            saliency_head: saliency_head
                .then(|| Linear::new(store, rng, "head.saliency", h, 1, true)),
        }
    }

    /// Adds positional encodings to video rows, type embeddings to every row,
    /// and runs the encoder over `video ‖ text`. `text` holds
    /// `n_expansion` expansion rows followed by word rows.
    pub fn encode(
        &self,
        s: &mut Session,
        video: Var,
        text: Var,
        n_expansion: usize,
        video_valid: &[bool],
        text_valid: &[bool],
    ) -> Result<Var> {
        let (l, h) = s.g.shape(video);
        let (t, ht) = s.g.shape(text);
        if h != self.cfg.hidden || ht != h {
            return Err(Error::Shape(format!(
                "encoder expects hidden {}, got {h}/{ht}",
                self.cfg.hidden
            )));
        }
        if video_valid.len() != l || text_valid.len() + n_expansion != t {
            return Err(Error::Shape(
                "encoder validity masks do not match inputs".into(),
            ));
        }
        let pos = s.input(sinusoidal(l, h));
        let video = s.g.add(video, pos);
        let joint = s.g.concat_rows(&[video, text]);
        let seg = |r: usize| {
            if r < l {
                Segment::Video
            } else if r < l + n_expansion {
                Segment::Expansion
            } else {
                Segment::Text
            }
        };
        let select = Mat::from_shape_fn((l + t, 3), |(r, k)| (seg(r) as usize == k) as u8 as f64);
        let select = s.input(select);
        let types = s.param(self.type_embed);
        let typed = s.g.matmul(select, types);
        let x = s.g.add(joint, typed);
        let mut valid = video_valid.to_vec();
        valid.extend(std::iter::repeat_n(true, n_expansion));
        valid.extend_from_slice(text_valid);
        Ok(crate::debias::run_encoder(
            s,
            &self.encoder,
            x,
            Some(&valid),
        ))
    }

    pub fn decode(
        &self,
        s: &mut Session,
        memory_video: Var,
        video_valid: &[bool],
    ) -> DecoderOutput {
        let mut tgt = s.param(self.queries);
        for layer in &self.decoder {
            tgt = layer.forward(s, tgt, memory_video, Some(video_valid));
        }
        let raw = self.span_head.forward(s, tgt);
        let spans = s.g.sigmoid(raw);
        let logits = self.class_head.forward(s, tgt);
        DecoderOutput { spans, logits }
    }

    /// Per-clip scores as a `1×L` row.
    pub fn saliency(
        &self,
        s: &mut Session,
        mode: SaliencyMode,
        s_bar: Var,
        memory_video: Var,
    ) -> Result<Var> {
        match mode {
            SaliencyMode::Gpa => Ok(s_bar),
            SaliencyMode::Head => {
                let head = self.saliency_head.as_ref().ok_or_else(|| {
                    Error::Invalid("model was built without a saliency head".into())
                })?;
                let col = head.forward(s, memory_video);
                Ok(s.g.transpose(col))
            }
        }
    }
}

/// Spans and foreground probabilities read off a decoder pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub spans: Vec<MomentSpan>,
    pub fg_prob: Vec<f64>,
    pub saliency: Vec<f64>,
}

impl PredictionSet {
    pub fn from_outputs(spans: &Mat, logits: &Mat, saliency: Vec<f64>) -> Self {
        let probs = softmax_rows_value(logits, None);
        Self {
            spans: spans
                .rows()
                .into_iter()
                .map(|r| MomentSpan::new(r[0], r[1]))
                .collect(),
            fg_prob: probs.column(FOREGROUND).to_vec(),
            saliency,
        }
    }
}

/// `gt × pred` matching cost.
pub fn match_cost(spans: &Mat, logits: &Mat, gt: &[MomentSpan], w: &VmrWeights) -> Mat {
    let probs = softmax_rows_value(logits, None);
    Mat::from_shape_fn((gt.len(), spans.nrows()), |(k, j)| {
        let p = MomentSpan::new(spans[[j, 0]], spans[[j, 1]]);
        w.l1 * span_l1(&p, &gt[k]) + w.iou * giou_loss(&p, &gt[k]) - w.ce * probs[[j, FOREGROUND]]
    })
}

pub fn hungarian_match(
    spans: &Mat,
    logits: &Mat,
    gt: &[MomentSpan],
    w: &VmrWeights,
) -> Result<MatchResult> {
    hungarian::solve(&match_cost(spans, logits, gt, w))
}

/// Unweighted components and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct VmrLoss {
    pub total: Var,
    pub l1: Var,
    pub iou: Var,
    pub ce: Var,
}

/// `λ_L1·L1 + λ_iou·(1 − gIoU)` averaged over matched pairs, plus
/// `λ_ce` times the class-weighted cross-entropy over all queries (matched
/// queries are foreground, the rest background weighted by `eos_coef`).
pub fn vmr_loss(
    g: &mut Graph,
    spans: Var,
    logits: Var,
    gt: &[MomentSpan],
    matching: &MatchResult,
    w: &VmrWeights,
) -> VmrLoss {
    let m = g.shape(spans).0;
    let (l1, iou) = if matching.pairs.is_empty() {
        (g.scalar(0.0), g.scalar(0.0))
    } else {
        let k = matching.pairs.len() as f64;
        let preds: Vec<usize> = matching.pairs.iter().map(|p| p.1).collect();
        let target = Mat::from_shape_fn((preds.len(), 2), |(r, c)| {
            let s = gt[matching.pairs[r].0];
            if c == 0 {
                s.center
            } else {
                s.width
            }
        });
        let pm = g.gather_rows(spans, &preds);
        let tm = g.constant(target);
        let d = g.sub(pm, tm);
        let ad = g.abs(d);
        let l1_sum = g.sum(ad);
        let l1 = g.scale(l1_sum, 1.0 / k);
        let gi = giou_rows(g, pm, tm);
        let gsum = g.sum(gi);
        let neg = g.scale(gsum, -1.0 / k);
        let iou = g.add_scalar(neg, 1.0);
        (l1, iou)
    };
    let targets: Vec<(usize, usize)> = (0..m)
        .map(|j| {
            (
                j,
                if matching.is_matched_pred(j) {
                    FOREGROUND
                } else {
                    1 - FOREGROUND
                },
            )
        })
        .collect();
    let weights: Vec<f64> = targets
        .iter()
        .map(|&(_, c)| if c == FOREGROUND { 1.0 } else { w.eos_coef })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let ls = g.log_softmax_rows(logits);
    let picked = g.pick(ls, &targets);
    let wv = g.constant(Mat::from_shape_vec((1, m), weights).unwrap());
    let weighted = g.mul(picked, wv);
    let s = g.sum(weighted);
    let ce = g.scale(s, -1.0 / wsum.max(f64::MIN_POSITIVE));

    let a = g.scale(l1, w.l1);
    let b = g.scale(iou, w.iou);
    let c = g.scale(ce, w.ce);
    let ab = g.add(a, b);
    let total = g.add(ab, c);
    VmrLoss { total, l1, iou, ce }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedMoment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// Spans in seconds ranked by foreground probability (ties by slot index),
/// with greedy 1-D NMS dropping spans whose IoU with a kept span exceeds
/// `nms_iou` (so `nms_iou = 1` disables suppression).
pub fn predict(
    pred: &PredictionSet,
    duration: f64,
    top_k: usize,
    nms_iou: f64,
) -> Vec<RankedMoment> {
    let mut order: Vec<usize> = (0..pred.spans.len()).collect();
    order.sort_by(|&a, &b| pred.fg_prob[b].total_cmp(&pred.fg_prob[a]).then(a.cmp(&b)));
    let mut kept: Vec<(f64, f64)> = Vec::new();
    let mut out = Vec::new();
    for j in order {
        if out.len() >= top_k {
            break;
        }
        let iv = pred.spans[j].interval();
        if kept.iter().any(|&k| iou_1d(k, iv) > nms_iou) {
            continue;
        }
        kept.push(iv);
        let (start, end) = pred.spans[j].to_seconds(duration);
        out.push(RankedMoment {
            start,
            end,
            score: pred.fg_prob[j],
        });
    }
    out
}
