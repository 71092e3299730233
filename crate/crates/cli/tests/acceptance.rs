//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Built with `harness = false` so the lines always reach the terminal.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ndarray::Array2;
use qdvmr::alignment::{
    clipwise_similarity, cosine_similarity, cosine_similarity_mat, global_contrastive_loss,
    part_aware_loss,
};
use qdvmr::autodiff::{Graph, Mat, Var};
use qdvmr::debias::{mlm_loss, MlmHead, WordVideoAttention};
use qdvmr::detrhead::{
    giou_1d, hungarian_match, match_cost, validate_prediction_line, vmr_loss, MomentSpan,
    RankedMoment, VmrWeights,
};
use qdvmr::featurestore::synth::{generate_synthetic, SynthConfig};
use qdvmr::featurestore::tensor_io::{decode, encode};
use qdvmr::featurestore::{mask_count, mask_query, read_tensor, write_tensor, Dataset};
use qdvmr::fusion::{normalize_similarity, Fusion};
use qdvmr::gradcheck::{check_gradients, random_mat, REL_FLOOR};
use qdvmr::metrics::{self, validate_report_json, HdAveraging, MAP_THRESHOLDS};
use qdvmr::nn::{ParamStore, Session};
use qdvmr::trainer::{
    self, checkpoint, prepare_split, LossWeights, QdVmr, StopTargets, TrainConfig,
};
use qdvmr::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

// Pinned targets and tolerances.
const OVERFIT_R1_07: f64 = 0.90;
const OVERFIT_MAP_AVG: f64 = 0.70;
const OVERFIT_MAX_EPOCHS: usize = 300;
const OVERFIT_MAX_SECS: f64 = 600.0;
const GRAD_TOL: f64 = 1e-3;
const GRAD_REPS: usize = 20;
const FD_STEP: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 200;
const AP_TOL: f64 = 1e-9;
const CLOSED_FORM_TOL: f64 = 1e-6;
const GIOU_TOL: f64 = 1e-9;
const SOFTMAX_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qdvmr"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env_remove("QDVMR_SEED")
        .output()
        .expect("spawn qdvmr")
}

fn run_ok(args: &[&str]) -> Result<Output, String> {
    let out = run(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`qdvmr {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Overfitting the 64-sample synthetic set through the CLI on one thread.
fn overfit(ws: &Workspace) -> Outcome {
    let data = ws.path("synth64");
    let ckpt = ws.path("overfit_ckpt");
    run_ok(&["gen-synth", "--n", "64", "--seed", "7", "--out", s(&data)])?;
    let mut cfg = TrainConfig::desk();
    cfg.epochs = OVERFIT_MAX_EPOCHS;
    cfg.execution = Execution::Sequential;
    cfg.stop_at = Some(StopTargets {
        r1_07: OVERFIT_R1_07,
        map_avg: OVERFIT_MAP_AVG,
    });
    let cfg_path = ws.path("overfit.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| e.to_string())?;

    let t0 = Instant::now();
    run_ok(&[
        "train",
        "--data",
        s(&data),
        "--config",
        s(&cfg_path),
        "--out",
        s(&ckpt),
    ])?;
    let secs = t0.elapsed().as_secs_f64();
    let best_epoch = read_json(&ckpt.join("index.json"))?["epoch"]
        .as_u64()
        .unwrap_or(0) as usize;
    let report_path = ws.path("overfit_report.json");
    run_ok(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "train",
        "--sequential",
        "--out",
        s(&report_path),
    ])?;
    let report = read_json(&report_path)?;
    let r1 = report["r1_07"].as_f64().unwrap_or(0.0);
    let map = report["map_avg"].as_f64().unwrap_or(0.0);
    let detail = format!("R1@0.7 {r1:.3}, mAP {map:.3} at epoch {best_epoch}, {secs:.1}s");
    ensure(
        r1 >= OVERFIT_R1_07
            && map >= OVERFIT_MAP_AVG
            && best_epoch <= OVERFIT_MAX_EPOCHS
            && secs < OVERFIT_MAX_SECS,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn valid_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let keep = rng.random_range(1..=n);
    (0..n).map(|i| i < keep).collect()
}

/// Central differences over every scalar of every parameter in `store`.
fn store_rel_error(store: &ParamStore, f: impl Fn(&mut Session) -> Var) -> f64 {
    let mut sess = Session::new(store, true, 0.0, 0);
    let out = f(&mut sess);
    let grads = sess.g.backward(out);
    let bound = sess.bound_params();
    let eval = |st: &ParamStore| {
        let mut sess = Session::inference(st);
        let out = f(&mut sess);
        sess.g.scalar_value(out)
    };
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (id, var) in bound {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(store.get(id).dim()));
        let (rows, cols) = store.get(id).dim();
        for r in 0..rows {
            for c in 0..cols {
                let x0 = store.get(id)[[r, c]];
                probe.get_mut(id)[[r, c]] = x0 + FD_STEP;
                let up = eval(&probe);
                probe.get_mut(id)[[r, c]] = x0 - FD_STEP;
                let down = eval(&probe);
                probe.get_mut(id)[[r, c]] = x0;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[[r, c]];
                worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR));
            }
        }
    }
    worst
}

fn gradient_suite() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut e = 0.0f64;
    for _ in 0..GRAD_REPS {
        let (n, l, h) = (
            rng.random_range(2..6),
            rng.random_range(3..8),
            rng.random_range(3..9),
        );
        let (wv, cv) = (valid_mask(&mut rng, n), valid_mask(&mut rng, l));
        let labels: Vec<u8> = (0..l).map(|_| rng.random_range(0..=1)).collect();
        let inputs = [
            random_mat(&mut rng, (n, h), 1.0),
            random_mat(&mut rng, (l, h), 1.0),
        ];
        let r = check_gradients(&inputs, FD_STEP, |g, v| {
            let sim = cosine_similarity(g, v[0], v[1]);
            let sb = clipwise_similarity(g, sim, &wv);
            part_aware_loss(g, sb, &labels, &cv, 1e-6).unwrap()
        });
        e = e.max(r.max_rel_error);
    }
    worst.push(("part-aware", e));

    let mut e = 0.0f64;
    for rep in 0..GRAD_REPS {
        let (b, h) = (rng.random_range(1..6), rng.random_range(2..8));
        let tau = rng.random_range(0.1..1.0);
        let inputs = [
            random_mat(&mut rng, (b, h), 0.5),
            random_mat(&mut rng, (b, h), 0.5),
        ];
        let r = check_gradients(&inputs, FD_STEP, |g, v| {
            global_contrastive_loss(g, v[0], v[1], tau, rep % 2 == 1)
        });
        e = e.max(r.max_rel_error);
    }
    worst.push(("global", e));

    let mut e = 0.0f64;
    for rep in 0..GRAD_REPS {
        let (n, l, vocab) = (
            rng.random_range(2..5),
            rng.random_range(2..6),
            rng.random_range(3..7),
        );
        let (hidden, heads) = [(2usize, 1usize), (4, 2)][rep % 2];
        let mut store = ParamStore::new();
        let attn = WordVideoAttention::new(&mut store, &mut rng, hidden, heads);
        let head = MlmHead::new(&mut store, &mut rng, hidden, vocab);
        let words = store.add("in.words", random_mat(&mut rng, (n, hidden), 1.0));
        let video = store.add("in.video", random_mat(&mut rng, (l, hidden), 1.0));
        let vv = valid_mask(&mut rng, l);
        let positions: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        let positions = if positions.is_empty() {
            vec![0]
        } else {
            positions
        };
        let gold: Vec<u32> = positions
            .iter()
            .map(|_| rng.random_range(0..vocab as u32))
            .collect();
        e = e.max(store_rel_error(&store, |s| {
            let (w, v) = (s.param(words), s.param(video));
            let refined = attn.forward(s, w, v, &vv);
            let lp = head.log_probs(s, refined);
            mlm_loss(&mut s.g, lp, &positions, &gold).unwrap()
        }));
    }
    worst.push(("masked-word", e));

    let mut e = 0.0f64;
    for _ in 0..GRAD_REPS {
        let (n, l, h) = (
            rng.random_range(2..5),
            rng.random_range(2..6),
            rng.random_range(2..5),
        );
        let mut store = ParamStore::new();
        let fusion = Fusion::new(&mut store, &mut rng, h);
        let text = store.add("in.text", random_mat(&mut rng, (n, h), 1.0));
        let video = store.add("in.video", random_mat(&mut rng, (l, h), 1.0));
        let sent = store.add("in.sentence", random_mat(&mut rng, (1, h), 1.0));
        let (wv, cv) = (valid_mask(&mut rng, n), valid_mask(&mut rng, l));
        let probe = random_mat(&mut rng, (l, h), 1.0);
        e = e.max(store_rel_error(&store, |s| {
            let (t, v, st) = (s.param(text), s.param(video), s.param(sent));
            let sim = cosine_similarity(&mut s.g, t, v);
            let out = fusion.enhance(s, sim, v, t, st, &wv, &cv).unwrap();
            let p = s.input(probe.clone());
            let prod = s.g.mul(out, p);
            s.g.sum(prod)
        }));
    }
    worst.push(("visual-enhancement", e));

    let mut e = 0.0f64;
    let w = VmrWeights::default();
    for _ in 0..GRAD_REPS {
        let m = rng.random_range(2..7);
        let k = rng.random_range(1..=m.min(3));
        let gt: Vec<MomentSpan> = (0..k)
            .map(|_| MomentSpan::new(rng.random_range(0.2..0.8), rng.random_range(0.05..0.4)))
            .collect();
        let raw = random_mat(&mut rng, (m, 2), 1.0);
        let logits = random_mat(&mut rng, (m, 2), 1.0);
        let spans = raw.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let matching = hungarian_match(&spans, &logits, &gt, &w).map_err(|e| e.to_string())?;
        let r = check_gradients(&[raw, logits], FD_STEP, |g, v| {
            let spans = g.sigmoid(v[0]);
            vmr_loss(g, spans, v[1], &gt, &matching, &w).total
        });
        e = e.max(r.max_rel_error);
    }
    worst.push(("span", e));

    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(worst.iter().all(|(_, e)| *e <= GRAD_TOL), || detail.clone())?;
    Ok(format!("max relative error: {detail}"))
}

fn brute_force_assignment(cost: &Mat) -> Vec<usize> {
    let (k, m) = cost.dim();
    let mut best = (f64::INFINITY, Vec::new());
    let mut current = Vec::with_capacity(k);
    fn rec(cost: &Mat, m: usize, current: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
        let k = cost.nrows();
        if current.len() == k {
            let c: f64 = current.iter().enumerate().map(|(r, &j)| cost[[r, j]]).sum();
            if c < best.0 {
                *best = (c, current.clone());
            }
            return;
        }
        for j in 0..m {
            if !current.contains(&j) {
                current.push(j);
                rec(cost, m, current, best);
                current.pop();
            }
        }
    }
    rec(cost, m, &mut current, &mut best);
    best.1
}

fn iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// AP from an explicitly constructed precision/recall curve.
fn pr_curve_ap(tp: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for k in 1..=tp.len() {
        let hits = tp[..k].iter().filter(|&&t| t).count() as f64;
        precision.push(hits / k as f64);
        recall.push(hits / n_pos as f64);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..tp.len() {
        let interp = precision[k..].iter().copied().fold(0.0, f64::max);
        ap += (recall[k] - prev_recall) * interp;
        prev_recall = recall[k];
    }
    ap
}

fn oracle_moment_ap(preds: &[RankedMoment], gts: &[(f64, f64)], t: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut used = vec![false; gts.len()];
    let tp: Vec<bool> = order
        .iter()
        .map(|&i| {
            let p = (preds[i].start, preds[i].end);
            let pick = (0..gts.len())
                .filter(|&j| !used[j] && iou(p, gts[j]) >= t)
                .max_by(|&a, &b| iou(p, gts[a]).total_cmp(&iou(p, gts[b])).then(b.cmp(&a)));
            if let Some(j) = pick {
                used[j] = true;
            }
            pick.is_some()
        })
        .collect();
    pr_curve_ap(&tp, gts.len())
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = VmrWeights::default();
    for inst in 0..ORACLE_INSTANCES {
        let m = rng.random_range(1..=6);
        let k = rng.random_range(1..=m);
        let spans = Array2::from_shape_fn((m, 2), |_| rng.random_range(0.05..0.95));
        let logits = random_mat(&mut rng, (m, 2), 1.0);
        let gt: Vec<MomentSpan> = (0..k)
            .map(|_| MomentSpan::new(rng.random_range(0.1..0.9), rng.random_range(0.05..0.5)))
            .collect();
        let cost = match_cost(&spans, &logits, &gt, &w);
        let result = hungarian_match(&spans, &logits, &gt, &w).map_err(|e| e.to_string())?;
        let brute = brute_force_assignment(&cost);
        let got: Vec<usize> = (0..k)
            .map(|r| result.pred_for_gt(r).unwrap_or(usize::MAX))
            .collect();
        let sum = |a: &[usize]| -> f64 { a.iter().enumerate().map(|(r, &j)| cost[[r, j]]).sum() };
        ensure(got == brute && sum(&got) == sum(&brute), || {
            format!("matching instance {inst}: {got:?} vs exhaustive {brute:?}")
        })?;
    }

    let mut worst: f64 = 0.0;
    for inst in 0..ORACLE_INSTANCES {
        let mut samples = Vec::new();
        let mut hd: Vec<(Vec<f64>, Vec<u8>)> = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let dur = 60.0;
            let n_gt = rng.random_range(1..=3);
            let gts: Vec<(f64, f64)> = (0..n_gt)
                .map(|_| {
                    let a = rng.random_range(0.0..50.0);
                    (a, a + rng.random_range(2.0..10.0f64).min(dur - a))
                })
                .collect();
            let preds: Vec<RankedMoment> = (0..rng.random_range(1..=8))
                .map(|_| {
                    let (a, b) = gts[rng.random_range(0..gts.len())];
                    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
                    let start = (a + jitter(&mut rng)).max(0.0);
                    let end = (b + jitter(&mut rng)).max(start + 0.5);
                    RankedMoment {
                        start,
                        end,
                        score: rng.random_range(0.0..1.0),
                    }
                })
                .collect();
            for &t in &MAP_THRESHOLDS {
                let got = metrics::ap_at_iou(&preds, &gts, t).map_err(|e| e.to_string())?;
                worst = worst.max((got - oracle_moment_ap(&preds, &gts, t)).abs());
            }
            samples.push((preds, gts));
            let n = rng.random_range(2..=8);
            hd.push((
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(0..=4)).collect(),
            ));
        }
        let map = metrics::map_avg(&samples).map_err(|e| e.to_string())?;
        let oracle_map = MAP_THRESHOLDS
            .iter()
            .map(|&t| {
                samples
                    .iter()
                    .map(|(p, g)| oracle_moment_ap(p, g, t))
                    .sum::<f64>()
                    / samples.len() as f64
            })
            .sum::<f64>()
            / MAP_THRESHOLDS.len() as f64;
        worst = worst.max((map - oracle_map).abs());

        let views: Vec<(&[f64], &[u8])> = hd
            .iter()
            .map(|(s, l)| (s.as_slice(), l.as_slice()))
            .collect();
        let got = metrics::hd_map(&views, 4, HdAveraging::PerSample).map_err(|e| e.to_string())?;
        let per: Vec<f64> = hd
            .iter()
            .filter(|(_, l)| l.iter().any(|&x| x >= 4))
            .map(|(s, l)| {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
                let tp: Vec<bool> = order.iter().map(|&i| l[i] >= 4).collect();
                pr_curve_ap(&tp, tp.iter().filter(|&&t| t).count())
            })
            .collect();
        let oracle_hd = if per.is_empty() {
            0.0
        } else {
            per.iter().sum::<f64>() / per.len() as f64
        };
        let diff = (got - oracle_hd).abs();
        ensure(diff <= AP_TOL, || {
            format!("HD-mAP instance {inst}: {got} vs {oracle_hd}")
        })?;
        worst = worst.max(diff);
    }
    ensure(worst <= AP_TOL, || format!("AP deviation {worst:.2e}"))?;
    Ok(format!(
        "{ORACLE_INSTANCES} matchings exact, AP/mAP/HD-mAP max deviation {worst:.1e}"
    ))
}

fn closed_forms() -> Outcome {
    let mut checks = Vec::new();

    let mut g = Graph::new();
    let v = g.leaf(Array2::from_shape_vec((1, 3), vec![0.6, 0.0, 0.8]).unwrap());
    let t = g.leaf(Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap());
    let l = global_contrastive_loss(&mut g, v, t, 0.07, false);
    checks.push(("InfoNCE B=1", g.scalar_value(l), 0.0, 0.0));

    let mut g = Graph::new();
    let eye = Array2::eye(2);
    let v = g.leaf(eye.clone());
    let t = g.leaf(eye);
    let l = global_contrastive_loss(&mut g, v, t, 1.0, false);
    checks.push((
        "InfoNCE B=2",
        g.scalar_value(l),
        (1.0 + (-1.0f64).exp()).ln(),
        CLOSED_FORM_TOL,
    ));

    let vocab = 17;
    let mut g = Graph::new();
    let logits = g.leaf(Array2::zeros((4, vocab)));
    let lp = g.log_softmax_rows(logits);
    let l = mlm_loss(&mut g, lp, &[0, 2, 3], &[1, 5, 16]).map_err(|e| e.to_string())?;
    checks.push((
        "uniform MLM",
        g.scalar_value(l),
        (vocab as f64).ln(),
        CLOSED_FORM_TOL,
    ));

    // S̄ = 0 maps to p = 0.5.
    let mut g = Graph::new();
    let sb = g.leaf(Array2::zeros((1, 2)));
    let l = part_aware_loss(&mut g, sb, &[1, 0], &[true, true], 1e-6).map_err(|e| e.to_string())?;
    checks.push(("BCE", g.scalar_value(l), 2.0 * 2.0f64.ln(), CLOSED_FORM_TOL));

    checks.push((
        "gIoU",
        giou_1d((0.0, 1.0), (2.0, 3.0)),
        -1.0 / 3.0,
        GIOU_TOL,
    ));

    for (name, got, want, tol) in &checks {
        ensure((got - want).abs() <= *tol, || {
            format!("{name}: {got} vs {want}")
        })?;
    }
    Ok(format!("{} closed forms", checks.len()))
}

fn defaults() -> Outcome {
    let w = LossWeights::default();
    let desk = TrainConfig::desk();
    let paper = TrainConfig::paper();
    let json: Value = serde_json::from_str(&paper.to_json()).map_err(|e| e.to_string())?;
    ensure(w.gpa == 0.2 && w.w == 0.4, || {
        format!("loss weights gpa {} w {}", w.gpa, w.w)
    })?;
    ensure(desk.loss == w && paper.loss == w, || {
        "profiles override loss weights".into()
    })?;
    ensure(
        json["epochs"] == 200 && json["batch_size"] == 256 && json["lr"] == 2e-4,
        || {
            format!(
                "paper profile epochs {} batch {} lr {}",
                json["epochs"], json["batch_size"], json["lr"]
            )
        },
    )?;
    Ok("gpa 0.2, w 0.4; paper profile 200 epochs, batch 256, lr 2e-4".into())
}

fn ablation(ws: &Workspace) -> Outcome {
    let data = ws.path("synth_small");
    let out = ws.path("ablation");
    run_ok(&[
        "gen-synth",
        "--n",
        "8",
        "--clips",
        "10",
        "--seed",
        "3",
        "--out",
        s(&data),
    ])?;
    run_ok(&[
        "ablate",
        "--data",
        s(&data),
        "--profile",
        "desk",
        "--epochs",
        "1",
        "--split",
        "train",
        "--out",
        s(&out),
    ])?;
    let rows = read_json(&out.join("ablation.json"))?;
    let rows = rows.as_array().ok_or("ablation.json is not an array")?;
    ensure(rows.len() == 10, || format!("{} rows", rows.len()))?;
    let table = std::fs::read_to_string(out.join("ablation.txt")).map_err(|e| e.to_string())?;
    ensure(table.lines().count() == 11, || {
        "table lacks one line per setting".into()
    })?;

    let cfg = TrainConfig::desk();
    let (h, ne) = (cfg.model.hidden, cfg.model.expansion_tokens);
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let full = QdVmr::new(
        cfg.model,
        qdvmr::trainer::Toggles::ALL,
        trainer::input_dims(&ds),
        0,
    )
    .map_err(|e| e.to_string())?;
    let cue = full.store.num_scalars_with_prefix("cue.");
    let get = |r: &Value, k: &str| r["toggles"][k].as_bool().unwrap_or(false) as usize;
    let base = rows[0]["num_params"].as_u64().unwrap_or(0) as usize;
    let mut by_id = HashMap::new();
    for (r, id) in rows.iter().zip("abcdefghij".chars()) {
        let setting = r["setting"].as_str().unwrap_or("");
        ensure(setting == id.to_string(), || {
            format!("row {id} is {setting:?}")
        })?;
        let want_toggles =
            qdvmr::trainer::config::ablation_setting(id).map_err(|e| e.to_string())?;
        let toggles: qdvmr::trainer::Toggles =
            serde_json::from_value(r["toggles"].clone()).map_err(|e| e.to_string())?;
        ensure(toggles == want_toggles, || {
            format!("({id}) toggles {toggles:?}")
        })?;
        let params = r["num_params"].as_u64().unwrap_or(0) as usize;
        let terms = r["loss_terms"].as_u64().unwrap_or(0) as usize;
        let want_params =
            base + get(r, "ve") * (5 * h * h + h) + get(r, "qe") * ne * h + get(r, "cue") * cue;
        let want_terms = 1 + 2 * get(r, "gpa") + get(r, "cue");
        ensure(params == want_params, || {
            format!("({id}) {params} params, declared {want_params}")
        })?;
        ensure(terms == want_terms, || {
            format!("({id}) {terms} loss terms, declared {want_terms}")
        })?;
        by_id.insert(id, params);
    }
    ensure(
        rows[0]["toggles"]
            == serde_json::json!({"gpa": false, "ve": false, "qe": false, "cue": false}),
        || "(a) is not the bare baseline".into(),
    )?;
    ensure(by_id[&'a'] < by_id[&'j'], || {
        "(a) is not smaller than (j)".into()
    })?;
    Ok(format!(
        "10 settings; params (a) {} < (j) {}",
        by_id[&'a'], by_id[&'j']
    ))
}

fn invariants(ws: &Workspace) -> Outcome {
    for n in 1..=100usize {
        let tokens: Vec<u32> = (0..n as u32).collect();
        let k = (n / 3).max(1);
        ensure(mask_count(n, 1.0 / 3.0) == k, || {
            format!("mask count for N={n}")
        })?;
        let m = mask_query(&tokens, 1.0 / 3.0, n as u64, 999).map_err(|e| e.to_string())?;
        let masked = m.token_ids_with_mask.iter().filter(|&&t| t == 999).count();
        ensure(
            m.mask_positions.len() == k
                && masked == k
                && m.mask_positions.windows(2).all(|w| w[0] < w[1]),
            || format!("masking N={n} produced {:?}", m.mask_positions),
        )?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n, l) = (rng.random_range(1..8), rng.random_range(1..10));
        let (wv, cv) = (valid_mask(&mut rng, n), valid_mask(&mut rng, l));
        let mut g = Graph::new();
        let sim = g.leaf(random_mat(&mut rng, (n, l), 3.0));
        let (s_r, s_c) = normalize_similarity(&mut g, sim, &wv, &cv);
        for (i, row) in g.value(s_r).rows().into_iter().enumerate() {
            let want = if cv[i] { 1.0 } else { 0.0 };
            worst = worst.max((row.sum() - want).abs());
        }
        for (j, col) in g.value(s_c).columns().into_iter().enumerate() {
            let want = if wv[j] { 1.0 } else { 0.0 };
            worst = worst.max((col.sum() - want).abs());
        }
        let h = rng.random_range(1..6);
        let c = cosine_similarity_mat(
            &random_mat(&mut rng, (n, h), 2.0),
            &random_mat(&mut rng, (l, h), 2.0),
        );
        ensure(c.iter().all(|x| x.abs() <= 1.0 + 1e-12), || {
            "cosine outside [-1, 1]".into()
        })?;
    }
    ensure(worst <= SOFTMAX_TOL, || {
        format!("softmax sums off by {worst:.1e}")
    })?;

    let data = ws.path("synth_inv");
    generate_synthetic(
        &SynthConfig {
            n: 12,
            clips: 12,
            ..Default::default()
        },
        &data,
    )
    .map_err(|e| e.to_string())?;
    let ds = Dataset::open(&data).map_err(|e| e.to_string())?;
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 3;
    cfg.execution = Execution::Sequential;
    let a = trainer::train(&cfg, &ds).map_err(|e| e.to_string())?;
    cfg.execution = Execution::Parallel;
    let b = trainer::train(&cfg, &ds).map_err(|e| e.to_string())?;
    let same_params = a
        .model
        .store
        .ids()
        .all(|id| a.model.store.get(id) == b.model.store.get(id));
    ensure(a.curve == b.curve && same_params, || {
        "same seed gave different runs".into()
    })?;

    let ckpt = ws.path("inv_ckpt");
    checkpoint::save(&ckpt, &a.model, Some(&a.optimizer), 3, Some(&cfg))
        .map_err(|e| e.to_string())?;
    let back = checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let samples = prepare_split(&ds, "train", Execution::Sequential).map_err(|e| e.to_string())?;
    let before = trainer::predict_prepared(&a.model, &samples, 10, 0.7, Execution::Sequential);
    let after = trainer::predict_prepared(&back.model, &samples, 10, 0.7, Execution::Sequential);
    let (before, after) = (
        before.map_err(|e| e.to_string())?,
        after.map_err(|e| e.to_string())?,
    );
    ensure(
        before == after && back.optimizer.as_ref() == Some(&a.optimizer),
        || "checkpoint reload changed the outputs".into(),
    )?;
    Ok(format!(
        "masking N=1..100, softmax sums within {worst:.0e}, cosine bounds, checkpoint and seed determinism"
    ))
}

fn formats(ws: &Workspace) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..50 {
        let shape = (rng.random_range(1..9), rng.random_range(1..9));
        let m = random_mat(&mut rng, shape, 10.0).mapv(|x| x as f32 as f64);
        let path = ws.path(&format!("t{i}.qdt"));
        write_tensor(&path, &m).map_err(|e| e.to_string())?;
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        ensure(
            back.iter().zip(&m).all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("tensor {i} changed"),
        )?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let raw = decode(&bytes)?;
        ensure(encode(&raw.dims, &raw.data) == bytes, || {
            format!("tensor {i} re-encodes differently")
        })?;
    }

    let data = ws.path("synth64");
    let ckpt = ws.path("overfit_ckpt");
    let pred = ws.path("pred.jsonl");
    let report = ws.path("pred_report.json");
    run_ok(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--split",
        "train",
        "--out",
        s(&pred),
    ])?;
    let text = std::fs::read_to_string(&pred).map_err(|e| e.to_string())?;
    let mut lines = 0;
    for (i, line) in text.lines().enumerate() {
        validate_prediction_line(line).map_err(|e| format!("prediction line {}: {e}", i + 1))?;
        lines += 1;
    }
    ensure(lines == 64, || format!("{lines} prediction lines"))?;
    run_ok(&[
        "eval",
        "--pred",
        s(&pred),
        "--data",
        s(&data),
        "--split",
        "train",
        "--out",
        s(&report),
    ])?;
    validate_report_json(&read_json(&report)?)?;
    validate_report_json(&read_json(&ws.path("overfit_report.json"))?)?;

    // A broken line must be rejected with the validation exit code.
    let bad = ws.path("bad.jsonl");
    let broken = text.replacen(
        "\"pred_relevant_windows\":[[",
        "\"pred_relevant_windows\":[[-5,",
        1,
    );
    std::fs::write(&bad, broken).map_err(|e| e.to_string())?;
    let code = run(&[
        "eval",
        "--pred",
        s(&bad),
        "--data",
        s(&data),
        "--split",
        "train",
    ])
    .status
    .code();
    ensure(code == Some(3), || {
        format!("corrupt predictions exited {code:?}")
    })?;
    Ok("50 tensors bit-exact; predict/eval outputs validate; corrupt JSONL rejected".into())
}

fn main() {
    let ws = Workspace::new();
    let criteria: [Criterion; 8] = [
        ("overfit", Box::new(|| overfit(&ws))),
        ("gradients", Box::new(gradient_suite)),
        ("oracles", Box::new(oracles)),
        ("closed forms", Box::new(closed_forms)),
        ("defaults", Box::new(defaults)),
        ("ablation grid", Box::new(|| ablation(&ws))),
        ("invariants", Box::new(|| invariants(&ws))),
        ("formats", Box::new(|| formats(&ws))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = check();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
