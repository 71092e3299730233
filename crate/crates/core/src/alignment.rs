//! Feature-space projection and the global partial aligner: clip/word cosine
//! similarity, the part-aware clip loss, and the batch-level contrastive
//! loss.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore, Session};

/// Norm floor for cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Video,
    Text,
}

/// Per-modality MLPs into the shared hidden space. Complete and masked text
/// share the text projection.
#[derive(Debug, Clone)]
pub struct Projector {
    pub video: Mlp,
    pub text: Mlp,
    pub video_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
}

impl Projector {
    /// `layers == 1` is a single affine map; otherwise `layers` linear maps
    /// with ReLU between them.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        video_dim: usize,
        text_dim: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend(std::iter::repeat_n(hidden, layers.max(1)));
            d
        };
        Self {
            video: Mlp::new(store, rng, "proj.video", &dims(video_dim)),
            text: Mlp::new(store, rng, "proj.text", &dims(text_dim)),
            video_dim,
            text_dim,
            hidden,
        }
    }

    pub fn project(&self, s: &mut Session, x: Var, modality: Modality) -> Result<Var> {
        let (mlp, want) = match modality {
            Modality::Video => (&self.video, self.video_dim),
            Modality::Text => (&self.text, self.text_dim),
        };
        let got = s.g.shape(x).1;
        if got != want {
            return Err(Error::Shape(format!(
                "{modality:?} features have dim {got}, projection expects {want}"
            )));
        }
        Ok(mlp.forward(s, x))
    }
}

/// `S[j,i] = ⟨t_j, v_i⟩ / (max(‖t_j‖, ε)·max(‖v_i‖, ε))`, shape `N×L`.
pub fn cosine_similarity(g: &mut Graph, text: Var, video: Var) -> Var {
    let t = g.row_normalize(text, NORM_EPS);
    let v = g.row_normalize(video, NORM_EPS);
    g.matmul_t(t, v)
}

pub fn cosine_similarity_mat(text: &Mat, video: &Mat) -> Mat {
    let mut g = Graph::new();
    let t = g.constant(text.clone());
    let v = g.constant(video.clone());
    let s = cosine_similarity(&mut g, t, v);
    g.value(s).clone()
}

/// `1×R` row of weights averaging the valid rows.
pub fn mean_weights(valid: &[bool]) -> Mat {
    let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
    Mat::from_shape_fn(
        (1, valid.len()),
        |(_, j)| if valid[j] { 1.0 / n } else { 0.0 },
    )
}

/// Mean over valid rows, `1×C`.
pub fn masked_mean(g: &mut Graph, x: Var, valid: &[bool]) -> Var {
    let w = g.constant(mean_weights(valid));
    g.matmul(w, x)
}

/// Mean over (valid) words of each column of `S`, as a `1×L` row.
pub fn clipwise_similarity(g: &mut Graph, sim: Var, word_valid: &[bool]) -> Var {
    masked_mean(g, sim, word_valid)
}

/// Binary cross-entropy summed over valid clips with
/// `p = clamp((S̄ + 1)/2, ε, 1 − ε)`.
pub fn part_aware_loss(
    g: &mut Graph,
    s_bar: Var,
    labels: &[u8],
    clip_valid: &[bool],
    eps: f64,
) -> Result<Var> {
    let l = g.shape(s_bar).1;
    if labels.len() != l || clip_valid.len() != l {
        return Err(Error::Shape(format!(
            "part-aware loss: {l} clip scores, {} labels, {} validity flags",
            labels.len(),
            clip_valid.len()
        )));
    }
    let half = g.scale(s_bar, 0.5);
    let p = g.add_scalar(half, 0.5);
    let p = g.clamp(p, eps, 1.0 - eps);
    let log_p = g.ln(p);
    let neg = g.scale(p, -1.0);
    let q = g.add_scalar(neg, 1.0);
    let log_q = g.ln(q);
    let pos_w = Mat::from_shape_fn((1, l), |(_, i)| {
        (clip_valid[i] && labels[i] == 1) as u8 as f64
    });
    let neg_w = Mat::from_shape_fn((1, l), |(_, i)| {
        (clip_valid[i] && labels[i] == 0) as u8 as f64
    });
    let pos_w = g.constant(pos_w);
    let neg_w = g.constant(neg_w);
    let a = g.mul(log_p, pos_w);
    let b = g.mul(log_q, neg_w);
    let ab = g.add(a, b);
    let total = g.sum(ab);
    Ok(g.scale(total, -1.0))
}

/// InfoNCE over the batch with positives on the diagonal and logits
/// `v_i·t_j / τ`. `symmetric` averages the video→text and text→video
/// directions.
pub fn global_contrastive_loss(
    g: &mut Graph,
    video_means: Var,
    text_means: Var,
    tau: f64,
    symmetric: bool,
) -> Var {
    let b = g.shape(video_means).0;
    let logits = g.matmul_t(video_means, text_means);
    let logits = g.scale(logits, 1.0 / tau);
    let diag: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
    let direction = |g: &mut Graph, logits: Var| {
        let ls = g.log_softmax_rows(logits);
        let picked = g.pick(ls, &diag);
        let s = g.sum(picked);
        g.scale(s, -1.0 / b as f64)
    };
    let forward = direction(g, logits);
    if !symmetric {
        return forward;
    }
    let lt = g.transpose(logits);
    let backward = direction(g, lt);
    let both = g.add(forward, backward);
    g.scale(both, 0.5)
}

/// Average of the part-aware and global losses.
pub fn gpa_loss(g: &mut Graph, part: Var, global: Var) -> Var {
    let s = g.add(part, global);
    g.scale(s, 0.5)
}
