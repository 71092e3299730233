use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LossWeights, ModelConfig, TextEncoder, Toggles};
use crate::alignment::{self, Modality, Projector, NORM_EPS};
use crate::autodiff::{Mat, Var};
use crate::debias::{expand_query, ExpansionTokens, MlmHead, WordVideoAttention};
use crate::detrhead::{
    hungarian_match, vmr_loss, DecoderOutput, DetrConfig, DetrHead, MomentSpan, SaliencyMode,
    VmrLoss,
};
use crate::error::{Error, Result};
use crate::featurestore::Batch;
use crate::fusion::Fusion;
use crate::gradcheck::random_mat;
use crate::nn::{ParamId, ParamStore, Session};

/// Input feature sizes the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    /// Video width after audio fusion.
    pub video_dim: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
}

/// Video-conditioned masked-word prediction.
#[derive(Debug, Clone)]
pub struct Cue {
    pub attn: WordVideoAttention,
    pub head: MlmHead,
}

#[derive(Debug, Clone)]
pub struct QdVmr {
    pub cfg: ModelConfig,
    pub toggles: Toggles,
    pub dims: InputDims,
    pub store: ParamStore,
    pub projector: Projector,
    /// Token-embedding table (`vocab×D_t`) in embedding mode.
    pub embed: Option<ParamId>,
    pub expansion: Option<ExpansionTokens>,
    pub cue: Option<Cue>,
    pub fusion: Option<Fusion>,
    pub head: DetrHead,
}

/// Query words in either feature form.
#[derive(Debug, Clone)]
pub enum TextInput {
    Features(Mat),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct MaskedInput {
    pub text: TextInput,
    pub positions: Vec<usize>,
    pub gold: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Targets {
    /// Normalized ground-truth spans.
    pub spans: Vec<MomentSpan>,
    /// Clip relevance padded with zeros to the padded clip count.
    pub clip_relevance: Vec<u8>,
}

/// One (possibly padded) sample.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub video: Mat,
    pub video_valid: Vec<bool>,
    pub text: TextInput,
    pub text_valid: Vec<bool>,
    pub masked: Option<MaskedInput>,
    pub targets: Option<Targets>,
}

impl SampleInput {
    /// Row `b` of a collated batch. Text comes from features when the batch
    /// carries them and from token ids otherwise.
    pub fn from_batch(batch: &Batch, b: usize) -> Self {
        let text = match batch.text(b) {
            Some(t) => TextInput::Features(t.to_owned()),
            None => TextInput::Tokens(batch.tokens[b].clone()),
        };
        let masked = batch.masked[b].as_ref().map(|m| MaskedInput {
            text: match batch.masked_text(b) {
                Some(t) => TextInput::Features(t.to_owned()),
                None => TextInput::Tokens(batch.masked_tokens(b).expect("masked query present")),
            },
            positions: m.mask_positions.clone(),
            gold: m.gold_ids.clone(),
        });
        let meta = &batch.meta[b];
        let mut clip_relevance = meta.clip_relevance.clone();
        clip_relevance.resize(batch.max_clips(), 0);
        let spans = meta
            .moments
            .iter()
            .map(|m| MomentSpan::from_interval(m.start() / meta.duration, m.end() / meta.duration))
            .collect();
        Self {
            video: batch.video(b).to_owned(),
            video_valid: batch.video_valid[b].clone(),
            text,
            text_valid: batch.text_valid[b].clone(),
            masked,
            targets: Some(Targets {
                spans,
                clip_relevance,
            }),
        }
    }
}

/// Which optional paths a forward pass ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub similarity: bool,
    pub part_aware: bool,
    pub global_means: bool,
    pub fusion: bool,
    pub expansion: bool,
    pub cue: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub decoded: DecoderOutput,
    /// `1×L_padded` clip scores.
    pub saliency: Var,
    /// Unit-norm pooled features for the batch contrastive term.
    pub video_mean: Option<Var>,
    pub text_mean: Option<Var>,
    pub part_aware: Option<Var>,
    pub mlm: Option<Var>,
    pub vmr: Option<VmrLoss>,
    pub trace: ForwardTrace,
}

impl QdVmr {
    pub fn new(cfg: ModelConfig, toggles: Toggles, dims: InputDims, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dims.video_dim == 0 || dims.text_dim == 0 || dims.vocab_size < 2 {
            return Err(Error::Invalid(format!("invalid input dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let projector = Projector::new(
            &mut store,
            &mut rng,
            dims.video_dim,
            dims.text_dim,
            h,
            cfg.proj_layers,
        );
        let embed = (cfg.text_encoder == TextEncoder::Embedding).then(|| {
            let init = random_mat(
                &mut rng,
                (dims.vocab_size, dims.text_dim),
                1.0 / (dims.text_dim as f64).sqrt(),
            );
            store.add("text.embed", init)
        });
        let head = DetrHead::new(
            &mut store,
            &mut rng,
            DetrConfig {
                hidden: h,
                heads: cfg.heads,
                enc_layers: cfg.enc_layers,
                dec_layers: cfg.dec_layers,
                ffn_dim: cfg.ffn_dim,
                num_queries: cfg.num_queries,
            },
            cfg.saliency == SaliencyMode::Head,
        );
        let expansion = toggles
            .qe
            .then(|| ExpansionTokens::new(&mut store, &mut rng, cfg.expansion_tokens, h));
        let cue = toggles.cue.then(|| Cue {
            attn: WordVideoAttention::new(&mut store, &mut rng, h, cfg.heads),
            head: MlmHead::new(&mut store, &mut rng, h, dims.vocab_size),
        });
        let fusion = toggles.ve.then(|| Fusion::new(&mut store, &mut rng, h));
        Ok(Self {
            cfg,
            toggles,
            dims,
            store,
            projector,
            embed,
            expansion,
            cue,
            fusion,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Loss terms in the objective: span/class loss, plus the two alignment
    /// terms and the masked-word term when enabled.
    pub fn loss_terms(&self) -> usize {
        1 + 2 * self.toggles.gpa as usize + self.toggles.cue as usize
    }

    fn embed_text(&self, s: &mut Session, text: &TextInput) -> Result<Var> {
        match text {
            TextInput::Features(m) => {
                if m.ncols() != self.dims.text_dim {
                    return Err(Error::Shape(format!(
                        "text features have dim {}, model expects {}",
                        m.ncols(),
                        self.dims.text_dim
                    )));
                }
                Ok(s.input(m.clone()))
            }
            TextInput::Tokens(ids) => {
                let table = self.embed.ok_or_else(|| {
                    Error::Invalid("token input requires the embedding text encoder".into())
                })?;
                if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.dims.vocab_size) {
                    return Err(Error::Invalid(format!("token id {bad} outside vocabulary")));
                }
                let t = s.param(table);
                let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                Ok(s.g.gather_rows(t, &idx))
            }
        }
    }

    /// Builds the graph for one sample. With `train`, the auxiliary losses and
    /// (given targets) the matched span loss are added.
    pub fn forward(
        &self,
        s: &mut Session,
        x: &SampleInput,
        train: bool,
        weights: &LossWeights,
    ) -> Result<ForwardOutput> {
        let (l, n) = (x.video_valid.len(), x.text_valid.len());
        if x.video.nrows() != l {
            return Err(Error::Shape(format!(
                "{} video rows for {l} validity flags",
                x.video.nrows()
            )));
        }
        let mut trace = ForwardTrace::default();
        let video_raw = s.input(x.video.clone());
        let text_raw = self.embed_text(s, &x.text)?;
        if s.g.shape(text_raw).0 != n {
            return Err(Error::Shape(format!(
                "{} text rows for {n} validity flags",
                s.g.shape(text_raw).0
            )));
        }
        let video = self.projector.project(s, video_raw, Modality::Video)?;
        let text = self.projector.project(s, text_raw, Modality::Text)?;

        let need_sim = (train && self.toggles.gpa)
            || self.toggles.ve
            || (!train && self.cfg.saliency == SaliencyMode::Gpa);
        let (sim, s_bar) = if need_sim {
            trace.similarity = true;
            let sim = alignment::cosine_similarity(&mut s.g, text, video);
            let s_bar = alignment::clipwise_similarity(&mut s.g, sim, &x.text_valid);
            (Some(sim), Some(s_bar))
        } else {
            (None, None)
        };

        let mut part_aware = None;
        let (mut video_mean, mut text_mean) = (None, None);
        if train && self.toggles.gpa {
            let t = x
                .targets
                .as_ref()
                .ok_or_else(|| Error::Invalid("training forward needs targets".into()))?;
            let sb = s_bar.expect("similarity computed");
            part_aware = Some(alignment::part_aware_loss(
                &mut s.g,
                sb,
                &t.clip_relevance,
                &x.video_valid,
                weights.eps,
            )?);
            let vm = alignment::masked_mean(&mut s.g, video, &x.video_valid);
            let tm = alignment::masked_mean(&mut s.g, text, &x.text_valid);
            video_mean = Some(s.g.row_normalize(vm, NORM_EPS));
            text_mean = Some(s.g.row_normalize(tm, NORM_EPS));
            trace.part_aware = true;
            trace.global_means = true;
        }

        let video_hat = match &self.fusion {
            Some(f) => {
                trace.fusion = true;
                let sentence = alignment::masked_mean(&mut s.g, text, &x.text_valid);
                f.enhance(
                    s,
                    sim.expect("similarity computed"),
                    video,
                    text,
                    sentence,
                    &x.text_valid,
                    &x.video_valid,
                )?
            }
            None => video,
        };

        let (text_hat, n_exp) = match &self.expansion {
            Some(e) => {
                trace.expansion = true;
                (
                    expand_query(s, e, text, &x.text_valid, &self.head.encoder)?,
                    e.count,
                )
            }
            None => (text, 0),
        };

        let mut mlm = None;
        if train {
            if let (Some(cue), Some(m)) = (&self.cue, &x.masked) {
                trace.cue = true;
                let w_raw = self.embed_text(s, &m.text)?;
                let words = self.projector.project(s, w_raw, Modality::Text)?;
                let refined = cue.attn.forward(s, words, video, &x.video_valid);
                let lp = cue.head.log_probs(s, refined);
                mlm = Some(crate::debias::mlm_loss(
                    &mut s.g,
                    lp,
                    &m.positions,
                    &m.gold,
                )?);
            } else if self.cue.is_some() {
                return Err(Error::Invalid(
                    "masked-word prediction is enabled but the sample has no masked query".into(),
                ));
            }
        }

        let memory =
            self.head
                .encode(s, video_hat, text_hat, n_exp, &x.video_valid, &x.text_valid)?;
        let mem_video = s.g.slice_rows(memory, 0, l);
        let decoded = self.head.decode(s, mem_video, &x.video_valid);
        let sal_src = match s_bar {
            Some(v) => v,
            None => s.g.constant(Mat::zeros((1, l))),
        };
        let saliency = self
            .head
            .saliency(s, self.cfg.saliency, sal_src, mem_video)?;

        let vmr = match (&x.targets, train) {
            (Some(t), true) => {
                let vw = weights.vmr();
                let m = hungarian_match(
                    s.g.value(decoded.spans),
                    s.g.value(decoded.logits),
                    &t.spans,
                    &vw,
                )?;
                Some(vmr_loss(
                    &mut s.g,
                    decoded.spans,
                    decoded.logits,
                    &t.spans,
                    &m,
                    &vw,
                ))
            }
            _ => None,
        };

        Ok(ForwardOutput {
            decoded,
            saliency,
            video_mean,
            text_mean,
            part_aware,
            mlm,
            vmr,
            trace,
        })
    }
}
