//! Visual enhancement: co-attention over the clip/word similarity matrix and
//! the fused, query-aware clip features.
//!
//! Matrices here are video-major: `A = Sᵀ` is `L×N`, so a "row" is a clip.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore, Session};

fn row_mask(g: &mut Graph, x: Var, rows_valid: &[bool]) -> Var {
    let cols = g.shape(x).1;
    let m = Mat::from_shape_fn((rows_valid.len(), cols), |(i, _)| {
        rows_valid[i] as u8 as f64
    });
    let m = g.constant(m);
    g.mul(x, m)
}

/// Returns `(S_r, S_c)`, both `L×N`: `S_r` is a softmax over words for each
/// clip, `S_c` a softmax over clips for each word. Rows of padded clips in
/// `S_r` and columns of padded words in `S_c` are zero.
pub fn normalize_similarity(
    g: &mut Graph,
    sim: Var,
    word_valid: &[bool],
    clip_valid: &[bool],
) -> (Var, Var) {
    let a = g.transpose(sim);
    let s_r = g.softmax_rows(a, Some(word_valid));
    let s_r = row_mask(g, s_r, clip_valid);
    let per_word = g.softmax_rows(sim, Some(clip_valid));
    let per_word = row_mask(g, per_word, word_valid);
    let s_c = g.transpose(per_word);
    (s_r, s_c)
}

/// `F_v2q = S_r · F̄_t` (clip-level textual features).
pub fn clip_level_text(g: &mut Graph, s_r: Var, text: Var) -> Var {
    g.matmul(s_r, text)
}

/// `F_q2v = S_r · S_cᵀ · F̄_v`.
pub fn query_aware_video(g: &mut Graph, s_r: Var, s_c: Var, video: Var) -> Var {
    let word_visual = {
        let t = g.transpose(s_c);
        g.matmul(t, video)
    };
    g.matmul(s_r, word_visual)
}

/// Linear map over `[F̄_v ‖ F_v2q ‖ F̄_v⊙F_v2q ‖ F̄_v⊙F_q2v ‖ F̄_t^G]`.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub linear: Linear,
    pub hidden: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize) -> Self {
        Self {
            linear: Linear::new(store, rng, "ve.fuse", 5 * hidden, hidden, true),
            hidden,
        }
    }

    pub fn concat(g: &mut Graph, video: Var, v2q: Var, q2v: Var, sentence: Var) -> Result<Var> {
        let (l, h) = g.shape(video);
        for (name, v) in [("F_v2q", v2q), ("F_q2v", q2v)] {
            if g.shape(v) != (l, h) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {:?}",
                    g.shape(v),
                    (l, h)
                )));
            }
        }
        if g.shape(sentence) != (1, h) {
            return Err(Error::Shape(format!(
                "sentence feature is {:?}, expected (1, {h})",
                g.shape(sentence)
            )));
        }
        let p1 = g.mul(video, v2q);
        let p2 = g.mul(video, q2v);
        let sent = g.broadcast_rows(sentence, l);
        Ok(g.concat_cols(&[video, v2q, p1, p2, sent]))
    }

    pub fn fuse(
        &self,
        s: &mut Session,
        video: Var,
        v2q: Var,
        q2v: Var,
        sentence: Var,
    ) -> Result<Var> {
        let cat = Self::concat(&mut s.g, video, v2q, q2v, sentence)?;
        Ok(self.linear.forward(s, cat))
    }

    /// Full enhancement path from the similarity matrix to `F̂_v`.
    #[allow(clippy::too_many_arguments)]
    pub fn enhance(
        &self,
        s: &mut Session,
        sim: Var,
        video: Var,
        text: Var,
        sentence: Var,
        word_valid: &[bool],
        clip_valid: &[bool],
    ) -> Result<Var> {
        let (s_r, s_c) = normalize_similarity(&mut s.g, sim, word_valid, clip_valid);
        let v2q = clip_level_text(&mut s.g, s_r, text);
        let q2v = query_aware_video(&mut s.g, s_r, s_c, video);
        self.fuse(s, video, v2q, q2v, sentence)
    }
}
