//! Query debiasing: learnable expansion tokens refined by the shared encoder,
//! and video-conditioned masked-word prediction.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{multi_head, EncoderLayer, Linear, Mlp, ParamId, ParamStore, Session};

pub const DEFAULT_EXPANSION_TOKENS: usize = 3;

#[derive(Debug, Clone)]
pub struct ExpansionTokens {
    pub f_e: ParamId,
    pub count: usize,
}

impl ExpansionTokens {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, count: usize, hidden: usize) -> Self {
        assert!(count >= 1, "need at least one expansion token");
        let init = crate::gradcheck::random_mat(rng, (count, hidden), 0.02);
        Self {
            f_e: store.add("qe.tokens", init),
            count,
        }
    }
}

/// Runs the encoder stack without positional or type embeddings.
pub fn run_encoder(
    s: &mut Session,
    layers: &[EncoderLayer],
    mut x: Var,
    valid: Option<&[bool]>,
) -> Var {
    for layer in layers {
        x = layer.forward(s, x, valid);
    }
    x
}

/// `[encoder(F_e ‖ F̄_t)[..N_e] ; F̄_t]`. The first `N_e` rows are the
/// refined expansion tokens; the remaining rows are `text` itself.
pub fn expand_query(
    s: &mut Session,
    tokens: &ExpansionTokens,
    text: Var,
    text_valid: &[bool],
    encoder: &[EncoderLayer],
) -> Result<Var> {
    let f_e = s.param(tokens.f_e);
    let (he, ht) = (s.g.shape(f_e).1, s.g.shape(text).1);
    if he != ht {
        return Err(Error::Shape(format!(
            "expansion tokens have dim {he}, text has {ht}"
        )));
    }
    let joint = s.g.concat_rows(&[f_e, text]);
    let mut valid = vec![true; tokens.count];
    valid.extend_from_slice(text_valid);
    let refined = run_encoder(s, encoder, joint, Some(&valid));
    let head = s.g.slice_rows(refined, 0, tokens.count);
    Ok(s.g.concat_rows(&[head, text]))
}

/// Words attend to video clips; `F_w^R = F̄_w + MLP(softmax(QKᵀ/√d) V)` with
/// learned query/key maps and `V = F̄_v`.
#[derive(Debug, Clone)]
pub struct WordVideoAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub mlp: Mlp,
    pub heads: usize,
}

impl WordVideoAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize, heads: usize) -> Self {
        Self {
            wq: Linear::new(store, rng, "cue.attn.q", hidden, hidden, true),
            wk: Linear::new(store, rng, "cue.attn.k", hidden, hidden, true),
            mlp: Mlp::new(store, rng, "cue.mlp", &[hidden, hidden, hidden]),
            heads,
        }
    }

    /// The attention context `softmax(QKᵀ/√d) V` (`N×H`). With every clip
    /// masked the context is zero.
    pub fn context(&self, s: &mut Session, words: Var, video: Var, video_valid: &[bool]) -> Var {
        let q = self.wq.forward(s, words);
        let k = self.wk.forward(s, video);
        multi_head(s, q, k, video, self.heads, Some(video_valid))
    }

    pub fn forward(&self, s: &mut Session, words: Var, video: Var, video_valid: &[bool]) -> Var {
        let ctx = self.context(s, words, video, video_valid);
        let m = self.mlp.forward(s, ctx);
        s.g.add(words, m)
    }
}

/// `H → H → L_vocab` MLP followed by a log-softmax.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub mlp: Mlp,
}

impl MlmHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize, vocab: usize) -> Self {
        Self {
            mlp: Mlp::new(store, rng, "cue.head", &[hidden, hidden, vocab]),
        }
    }

    pub fn log_probs(&self, s: &mut Session, x: Var) -> Var {
        let logits = self.mlp.forward(s, x);
        s.g.log_softmax_rows(logits)
    }
}

/// Mean negative log-likelihood of `gold[k]` at row `positions[k]`.
pub fn mlm_loss(g: &mut Graph, log_probs: Var, positions: &[usize], gold: &[u32]) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::Invalid(
            "masked-word loss needs at least one masked position".into(),
        ));
    }
    if positions.len() != gold.len() {
        return Err(Error::Shape(
            "mask positions and gold ids differ in length".into(),
        ));
    }
    let (n, v) = g.shape(log_probs);
    if let Some(k) = (0..positions.len()).find(|&k| positions[k] >= n || gold[k] as usize >= v) {
        return Err(Error::Invalid(format!(
            "masked position {} / gold id {} out of range",
            positions[k], gold[k]
        )));
    }
    let at: Vec<(usize, usize)> = positions
        .iter()
        .zip(gold)
        .map(|(&p, &t)| (p, t as usize))
        .collect();
    let picked = g.pick(log_probs, &at);
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / positions.len() as f64))
}

/// Probability rows of the head, for inspection.
pub fn mlm_probabilities(s: &mut Session, head: &MlmHead, x: Var) -> Mat {
    let lp = head.log_probs(s, x);
    s.g.value(lp).mapv(f64::exp)
}
