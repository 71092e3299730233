//! Objective assembly, optimization, checkpointing, evaluation and ablation.
//!
//! A training step builds one graph per sample (in parallel when enabled),
//! computes the batch contrastive term on a small separate graph over the
//! pooled features, seeds each sample graph with its share of that term's
//! gradient, and sums per-sample parameter gradients in sample order. The
//! result does not depend on the thread count.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    ablation_setting, LossWeights, ModelConfig, StopTargets, TextEncoder, Toggles, TrainConfig,
    ABLATION_SETTINGS, SEED_ENV,
};
pub use model::{ForwardOutput, ForwardTrace, InputDims, QdVmr, SampleInput, TextInput};
pub use optim::{AdamW, AdamWConfig};

use crate::alignment::global_contrastive_loss;
use crate::autodiff::{Graph, Mat};
use crate::detrhead::{predict, PredictionRecord, PredictionSet};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::featurestore::masking::mask_query;
use crate::featurestore::{
    collate, Batch, CollateItem, Dataset, MaskedQuery, SampleMeta, SampleRecord,
};
use crate::metrics::{self, EvalOptions, EvalReport, SampleEval};
use crate::nn::{ParamId, Session};

/// `λ_GPA·L_GPA + λ_w·L_w + L_VMR`, with disabled components contributing
/// exactly zero.
pub fn total_loss(l_gpa: f64, l_w: f64, l_vmr: f64, w: &LossWeights, toggles: &Toggles) -> f64 {
    let gpa = if toggles.gpa { w.gpa * l_gpa } else { 0.0 };
    let mlm = if toggles.cue { w.w * l_w } else { 0.0 };
    gpa + mlm + l_vmr
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed derived from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// A record with its features in memory.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub record: SampleRecord,
    /// Audio-fused video features.
    pub video: Mat,
    pub text: Mat,
    pub masked_text: Option<Mat>,
}

pub fn prepare_split(ds: &Dataset, split: &str, exec: Execution) -> Result<Vec<PreparedSample>> {
    let records = ds.records(split);
    if records.is_empty() {
        return Err(Error::Invalid(format!(
            "split {split:?} has no samples in {}",
            ds.root.display()
        )));
    }
    exec.map(&records, |_, rec| {
        let f = ds.load_features(rec)?;
        Ok(PreparedSample {
            video: f.fused_video(),
            text: f.text,
            masked_text: f.masked_text,
            record: (*rec).clone(),
        })
    })
    .into_iter()
    .collect()
}

/// How a sample is turned into a collatable item.
#[derive(Debug, Clone, Copy)]
pub enum ItemMode {
    /// Includes the masked query; embedding mode draws a fresh mask from
    /// `seed`.
    Train {
        seed: u64,
        mask_ratio: f64,
    },
    Inference,
}

pub fn collate_item(s: &PreparedSample, model: &QdVmr, mode: ItemMode) -> Result<CollateItem> {
    let rec = &s.record;
    let invalid = |message: String| Error::Validation {
        sample_id: rec.sample_id.clone(),
        message,
    };
    let mask_id = (model.dims.vocab_size - 1) as u32;
    let meta = SampleMeta {
        sample_id: rec.sample_id.clone(),
        duration: rec.duration,
        moments: rec.moments.clone(),
        clip_relevance: rec.clip_relevance.clone(),
        saliency_labels: rec.saliency_labels.clone(),
    };
    let embedding = model.cfg.text_encoder == TextEncoder::Embedding;
    let want_mask = matches!(mode, ItemMode::Train { .. }) && model.toggles.cue;
    let (masked, masked_text) = match (want_mask, embedding, mode) {
        (false, _, _) => (None, None),
        (true, true, ItemMode::Train { seed, mask_ratio }) => (
            Some(mask_query(&rec.query_token_ids, mask_ratio, seed, mask_id)?),
            None,
        ),
        (true, false, _) => {
            let mt = s.masked_text.clone().ok_or_else(|| {
                invalid("masked-word prediction needs masked text features".into())
            })?;
            let positions = rec
                .mask_positions
                .clone()
                .ok_or_else(|| invalid("masked-word prediction needs mask_positions".into()))?;
            if rec.query_token_ids.len() != s.text.nrows() {
                return Err(invalid(format!(
                    "{} token ids for {} text feature rows; masked words cannot be aligned",
                    rec.query_token_ids.len(),
                    s.text.nrows()
                )));
            }
            let mut with_mask = rec.query_token_ids.clone();
            let gold_ids = positions.iter().map(|&p| rec.query_token_ids[p]).collect();
            for &p in &positions {
                with_mask[p] = mask_id;
            }
            (
                Some(MaskedQuery {
                    token_ids_with_mask: with_mask,
                    mask_positions: positions,
                    gold_ids,
                }),
                Some(mt),
            )
        }
        (true, true, ItemMode::Inference) => unreachable!("inference never masks"),
    };
    Ok(CollateItem {
        meta,
        video: s.video.clone(),
        text: (!embedding).then(|| s.text.clone()),
        masked_text,
        tokens: rec.query_token_ids.clone(),
        masked,
    })
}

/// Mean loss components of a step or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub gpa: f64,
    pub part: f64,
    pub global: f64,
    pub mlm: f64,
    pub vmr: f64,
    pub l1: f64,
    pub giou: f64,
    pub ce: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 9] {
        [
            ("total", self.total),
            ("gpa", self.gpa),
            ("part_aware", self.part),
            ("global_contrastive", self.global),
            ("masked_word", self.mlm),
            ("vmr", self.vmr),
            ("span_l1", self.l1),
            ("span_giou", self.giou),
            ("class_ce", self.ce),
        ]
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.named()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    fn add_scaled(&mut self, o: &Self, k: f64) {
        self.total += k * o.total;
        self.gpa += k * o.gpa;
        self.part += k * o.part;
        self.global += k * o.global;
        self.mlm += k * o.mlm;
        self.vmr += k * o.vmr;
        self.l1 += k * o.l1;
        self.giou += k * o.giou;
        self.ce += k * o.ce;
    }
}

/// Per-parameter gradients indexed by parameter id.
pub type Grads = Vec<Option<Mat>>;

/// Batch loss and its gradient with respect to every parameter.
pub fn compute_gradients(
    model: &QdVmr,
    batch: &Batch,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(LossComponents, Grads)> {
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let w = cfg.loss;
    let dropout = model.cfg.dropout;

    struct Local<'a> {
        session: Session<'a>,
        out: ForwardOutput,
        objective: crate::autodiff::Var,
        comps: LossComponents,
    }

    let locals: Vec<Local> = cfg
        .execution
        .map_range(b, |i| -> Result<Local> {
            let x = SampleInput::from_batch(batch, i);
            let mut s = Session::new(
                &model.store,
                true,
                dropout,
                derive_seed(step_seed, &[i as u64]),
            );
            let out = model.forward(&mut s, &x, true, &w)?;
            let vmr = out.vmr.expect("training forward with targets");
            let mut terms = vec![vmr.total];
            let mut comps = LossComponents {
                vmr: s.g.scalar_value(vmr.total),
                l1: s.g.scalar_value(vmr.l1),
                giou: s.g.scalar_value(vmr.iou),
                ce: s.g.scalar_value(vmr.ce),
                ..Default::default()
            };
            if let Some(p) = out.part_aware {
                comps.part = s.g.scalar_value(p);
                terms.push(s.g.scale(p, w.gpa * 0.5));
            }
            if let Some(m) = out.mlm {
                comps.mlm = s.g.scalar_value(m);
                terms.push(s.g.scale(m, w.w));
            }
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = s.g.add(acc, t);
            }
            let objective = s.g.scale(acc, inv_b);
            Ok(Local {
                session: s,
                out,
                objective,
                comps,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let mut comps = LossComponents::default();
    for l in &locals {
        comps.add_scaled(&l.comps, inv_b);
    }

    // Batch contrastive term over pooled features.
    let mut pooled_grads: Option<(Mat, Mat)> = None;
    if model.toggles.gpa {
        let stack = |pick: fn(&ForwardOutput) -> Option<crate::autodiff::Var>| {
            let rows: Vec<Mat> = locals
                .iter()
                .map(|l| {
                    l.session
                        .g
                        .value(pick(&l.out).expect("pooled feature"))
                        .clone()
                })
                .collect();
            let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("pooled rows share width")
        };
        let vm = stack(|o| o.video_mean);
        let tm = stack(|o| o.text_mean);
        let mut g = Graph::new();
        let (v, t) = (g.leaf(vm), g.leaf(tm));
        let lg = global_contrastive_loss(&mut g, v, t, w.tau, w.symmetric_nce);
        comps.global = g.scalar_value(lg);
        let scaled = g.scale(lg, w.gpa * 0.5);
        let mut grads = g.backward(scaled);
        pooled_grads = Some((grads.take(v).expect("grad"), grads.take(t).expect("grad")));
    }
    comps.gpa = 0.5 * (comps.part + comps.global);
    comps.total = total_loss(comps.gpa, comps.mlm, comps.vmr, &w, &model.toggles);

    let pooled = pooled_grads.as_ref();
    let per_sample: Vec<Vec<(ParamId, Mat)>> = cfg.execution.map_owned(
        locals.into_iter().enumerate().collect(),
        |_, (i, l): (usize, Local)| {
            let mut seeds = vec![(l.objective, Mat::from_elem((1, 1), 1.0))];
            if let (Some((dv, dt)), Some(vm), Some(tm)) =
                (pooled, l.out.video_mean, l.out.text_mean)
            {
                seeds.push((vm, dv.slice(ndarray::s![i..i + 1, ..]).to_owned()));
                seeds.push((tm, dt.slice(ndarray::s![i..i + 1, ..]).to_owned()));
            }
            let mut grads = l.session.g.backward_with(&seeds);
            l.session
                .bound_params()
                .into_iter()
                .filter_map(|(id, var)| grads.take(var).map(|g| (id, g)))
                .collect()
        },
    );
    let mut grads: Grads = vec![None; model.store.len()];
    for sample in per_sample {
        for (id, g) in sample {
            match &mut grads[id.0] {
                Some(acc) => *acc += &g,
                slot => *slot = Some(g),
            }
        }
    }
    Ok((comps, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossComponents,
    pub grad_norm: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,total,gpa,part_aware,global_contrastive,masked_word,vmr,span_l1,span_giou,class_ce,grad_norm";

pub fn loss_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for e in curve {
        let l = &e.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            e.epoch,
            l.total,
            l.gpa,
            l.part,
            l.global,
            l.mlm,
            l.vmr,
            l.l1,
            l.giou,
            l.ce,
            e.grad_norm
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model after the final epoch.
    pub model: QdVmr,
    pub optimizer: AdamW,
    /// Model with the best evaluation score.
    pub best_model: QdVmr,
    pub best_epoch: usize,
    pub best_report: EvalReport,
    pub last_report: EvalReport,
    pub eval_split: String,
    pub curve: Vec<EpochStats>,
    pub epochs_run: usize,
}

pub fn input_dims(ds: &Dataset) -> InputDims {
    InputDims {
        video_dim: ds.meta.fused_video_dim(),
        text_dim: ds.meta.text_dim,
        vocab_size: ds.meta.vocab_size,
    }
}

/// Split used for model selection.
pub fn selection_split(cfg: &TrainConfig, ds: &Dataset) -> String {
    if ds.manifest.has_split(&cfg.val_split) {
        cfg.val_split.clone()
    } else {
        cfg.train_split.clone()
    }
}

pub fn train(cfg: &TrainConfig, ds: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, ds, |_, _| {})
}

/// Trains and calls `on_epoch` after every epoch with that epoch's losses and
/// the evaluation report when one was computed.
pub fn train_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    mut on_epoch: impl FnMut(&EpochStats, Option<&EvalReport>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let exec = cfg.execution;
    let mut model = QdVmr::new(cfg.model, cfg.toggles, input_dims(ds), cfg.seed)?;
    let train_set = prepare_split(ds, &cfg.train_split, exec)?;
    let eval_split = selection_split(cfg, ds);
    let eval_set = if eval_split == cfg.train_split {
        None
    } else {
        Some(prepare_split(ds, &eval_split, exec)?)
    };
    let eval_samples = eval_set.as_deref().unwrap_or(&train_set);
    let mut opt = AdamW::new(
        AdamWConfig::new(cfg.lr, cfg.weight_decay, cfg.grad_clip),
        &model.store,
    );

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, EvalReport, QdVmr)> = None;
    let mut last_report = None;
    let mut step = 0u64;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &[1, epoch as u64],
        )));
        let mut sums = LossComponents::default();
        let mut norm_sum = 0.0;
        let n_batches = order.len().div_ceil(cfg.batch_size);
        for chunk in order.chunks(cfg.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[2, epoch as u64, i as u64]);
                    collate_item(
                        &train_set[i],
                        &model,
                        ItemMode::Train {
                            seed,
                            mask_ratio: cfg.mask_ratio,
                        },
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = collate(&items)?;
            let (comps, mut grads) =
                compute_gradients(&model, &batch, cfg, derive_seed(cfg.seed, &[3, step]))?;
            if let Some(name) = comps.first_non_finite() {
                return Err(Error::Diverged {
                    epoch,
                    component: name.into(),
                });
            }
            if grads
                .iter()
                .flatten()
                .any(|g| g.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    epoch,
                    component: "gradient".into(),
                });
            }
            norm_sum += opt.update(&mut model.store, &mut grads);
            if let Some(id) = model
                .store
                .ids()
                .find(|&id| model.store.get(id).iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Diverged {
                    epoch,
                    component: format!("parameter {}", model.store.name(id)),
                });
            }
            sums.add_scaled(&comps, 1.0 / n_batches as f64);
            step += 1;
        }
        epochs_run = epoch;
        let stats = EpochStats {
            epoch,
            loss: sums,
            grad_norm: norm_sum / n_batches as f64,
        };
        curve.push(stats);

        let mut report = None;
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let r = evaluate_prepared(&model, eval_samples, cfg.top_k, cfg.nms_iou, exec)?;
            let better = best
                .as_ref()
                .is_none_or(|(_, b, _)| (r.r1_07, r.map_avg) > (b.r1_07, b.map_avg));
            if better {
                if let Some(dir) = &cfg.ckpt_dir {
                    checkpoint::save(dir, &model, Some(&opt), epoch, Some(cfg))?;
                }
                best = Some((epoch, r.clone(), model.clone()));
            }
            report = Some(r);
        }
        on_epoch(&stats, report.as_ref());
        if let Some(r) = report {
            let done = cfg
                .stop_at
                .is_some_and(|t| r.r1_07 >= t.r1_07 && r.map_avg >= t.map_avg);
            last_report = Some(r);
            if done {
                break;
            }
        }
    }
    let last_report = match last_report {
        Some(r) if curve.last().is_some_and(|e| e.epoch == epochs_run) => r,
        _ => evaluate_prepared(&model, eval_samples, cfg.top_k, cfg.nms_iou, exec)?,
    };
    if let Some(dir) = &cfg.ckpt_dir {
        checkpoint::save(&dir.join("last"), &model, Some(&opt), epochs_run, Some(cfg))?;
        let path = dir.join("loss.csv");
        fs::write(&path, loss_csv(&curve)).map_err(|e| Error::io(&path, e))?;
    }
    let (best_epoch, best_report, best_model) = best.expect("final epoch is always evaluated");
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        best_model,
        best_epoch,
        best_report,
        last_report,
        eval_split,
        curve,
        epochs_run,
    })
}

/// Predictions for one prepared sample.
pub fn predict_sample(
    model: &QdVmr,
    s: &PreparedSample,
    top_k: usize,
    nms_iou: f64,
) -> Result<PredictionRecord> {
    let item = collate_item(s, model, ItemMode::Inference)?;
    let batch = collate(std::slice::from_ref(&item))?;
    let mut x = SampleInput::from_batch(&batch, 0);
    x.targets = None;
    let mut sess = Session::inference(&model.store);
    let out = model.forward(&mut sess, &x, false, &LossWeights::default())?;
    let l = s.record.num_clips();
    let saliency = sess
        .g
        .value(out.saliency)
        .row(0)
        .iter()
        .take(l)
        .copied()
        .collect();
    let pset = PredictionSet::from_outputs(
        sess.g.value(out.decoded.spans),
        sess.g.value(out.decoded.logits),
        saliency,
    );
    let ranked = predict(&pset, s.record.duration, top_k, nms_iou);
    Ok(PredictionRecord::new(
        s.record.sample_id.clone(),
        &ranked,
        pset.saliency,
    ))
}

pub fn predict_prepared(
    model: &QdVmr,
    samples: &[PreparedSample],
    top_k: usize,
    nms_iou: f64,
    exec: Execution,
) -> Result<Vec<PredictionRecord>> {
    exec.map(samples, |_, s| predict_sample(model, s, top_k, nms_iou))
        .into_iter()
        .collect()
}

pub fn sample_eval(rec: &SampleRecord, pred: &PredictionRecord) -> SampleEval {
    SampleEval {
        sample_id: rec.sample_id.clone(),
        gts: rec.moments.iter().map(|m| (m.start(), m.end())).collect(),
        preds: pred.moments(),
        saliency_scores: pred.pred_saliency_scores.clone(),
        saliency_labels: rec.saliency_labels.clone(),
    }
}

/// Scores predictions against records, matched by sample id.
pub fn score_predictions(
    records: &[&SampleRecord],
    preds: &[PredictionRecord],
    opts: &EvalOptions,
    exec: Execution,
) -> Result<EvalReport> {
    let by_id: std::collections::HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.sample_id.as_str(), p)).collect();
    let samples = records
        .iter()
        .map(|r| {
            by_id
                .get(r.sample_id.as_str())
                .map(|p| sample_eval(r, p))
                .ok_or_else(|| Error::Validation {
                    sample_id: r.sample_id.clone(),
                    message: "no prediction for sample".into(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::evaluate(&samples, opts, exec)
}

pub fn evaluate_prepared(
    model: &QdVmr,
    samples: &[PreparedSample],
    top_k: usize,
    nms_iou: f64,
    exec: Execution,
) -> Result<EvalReport> {
    let preds = predict_prepared(model, samples, top_k, nms_iou, exec)?;
    let evals: Vec<SampleEval> = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| sample_eval(&s.record, p))
        .collect();
    metrics::evaluate(&evals, &EvalOptions::default(), exec)
}

/// Loads `split`, predicts with `model` and scores the predictions.
pub fn evaluate(
    model: &QdVmr,
    ds: &Dataset,
    split: &str,
    top_k: usize,
    nms_iou: f64,
    exec: Execution,
) -> Result<EvalReport> {
    check_dims(model, ds)?;
    let samples = prepare_split(ds, split, exec)?;
    evaluate_prepared(model, &samples, top_k, nms_iou, exec)
}

pub fn check_dims(model: &QdVmr, ds: &Dataset) -> Result<()> {
    let want = input_dims(ds);
    if model.dims != want {
        return Err(Error::Invalid(format!(
            "model was built for {:?}, dataset provides {want:?}",
            model.dims
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: char,
    pub toggles: Toggles,
    pub num_params: usize,
    pub loss_terms: usize,
    pub epochs_run: usize,
    pub report: EvalReport,
}

/// Trains and evaluates each requested setting of the ablation grid.
/// Checkpoints, when configured, go to `<ckpt_dir>/setting_<id>`.
pub fn ablate(
    cfg: &TrainConfig,
    ds: &Dataset,
    settings: &[char],
    eval_split: &str,
) -> Result<Vec<AblationRow>> {
    let toggles = settings
        .iter()
        .map(|&c| ablation_setting(c).map(|t| (c, t)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(toggles.len());
    for (c, t) in toggles {
        let mut run = cfg.clone();
        run.toggles = t;
        run.ckpt_dir = cfg
            .ckpt_dir
            .as_ref()
            .map(|d| d.join(format!("setting_{c}")));
        let out = train(&run, ds)?;
        let report = evaluate(
            &out.best_model,
            ds,
            eval_split,
            cfg.top_k,
            cfg.nms_iou,
            cfg.execution,
        )?;
        rows.push(AblationRow {
            setting: c,
            toggles: t,
            num_params: out.best_model.num_params(),
            loss_terms: out.best_model.loss_terms(),
            epochs_run: out.epochs_run,
            report,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<3} {:>3} {:>3} {:>3} {:>3} {:>9} {:>5} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "set",
        "gpa",
        "ve",
        "qe",
        "cue",
        "params",
        "terms",
        "R1@.5",
        "R1@.7",
        "mAP",
        "HD-mAP",
        "HIT@1"
    );
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in rows {
        let rep = &r.report;
        let _ = writeln!(
            out,
            "({}) {:>3} {:>3} {:>3} {:>3} {:>9} {:>5} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            r.setting,
            mark(r.toggles.gpa),
            mark(r.toggles.ve),
            mark(r.toggles.qe),
            mark(r.toggles.cue),
            r.num_params,
            r.loss_terms,
            100.0 * rep.r1_05,
            100.0 * rep.r1_07,
            100.0 * rep.map_avg,
            100.0 * rep.hd_map,
            100.0 * rep.hit1,
        );
    }
    out
}

/// Writes a model-only checkpoint.
pub fn save_model(dir: &Path, model: &QdVmr) -> Result<()> {
    checkpoint::save(dir, model, None, 0, None)
}
