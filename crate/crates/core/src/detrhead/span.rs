use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};

/// Normalized `(center, width)` span in fractions of the video duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub center: f64,
    pub width: f64,
}

impl MomentSpan {
    pub fn new(center: f64, width: f64) -> Self {
        Self { center, width }
    }

    pub fn from_interval(start: f64, end: f64) -> Self {
        Self {
            center: (start + end) / 2.0,
            width: end - start,
        }
    }

    /// `[c − w/2, c + w/2]` without clamping.
    pub fn raw_interval(&self) -> (f64, f64) {
        (
            self.center - self.width / 2.0,
            self.center + self.width / 2.0,
        )
    }

    /// Interval clamped to `[0, 1]`.
    pub fn interval(&self) -> (f64, f64) {
        let (s, e) = self.raw_interval();
        (s.clamp(0.0, 1.0), e.clamp(0.0, 1.0))
    }

    pub fn is_valid(&self) -> bool {
        let (s, e) = self.interval();
        (0.0..=1.0).contains(&self.center) && self.width > 0.0 && self.width <= 1.0 && e > s
    }

    /// `(start, end)` in seconds.
    pub fn to_seconds(&self, duration: f64) -> (f64, f64) {
        let (s, e) = self.interval();
        (s * duration, e * duration)
    }
}

/// IoU of two intervals; 0 when disjoint.
pub fn iou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (|hull| − |union|)/|hull|`, in `[−1, 1]`.
pub fn giou_1d(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    if hull <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

pub fn span_l1(a: &MomentSpan, b: &MomentSpan) -> f64 {
    (a.center - b.center).abs() + (a.width - b.width).abs()
}

pub fn giou_loss(a: &MomentSpan, b: &MomentSpan) -> f64 {
    1.0 - giou_1d(a.raw_interval(), b.raw_interval())
}

/// Row-wise gIoU between two `K×2` `(center, width)` matrices, as `K×1`.
pub fn giou_rows(g: &mut Graph, pred: Var, gt: Var) -> Var {
    let to_se = |g: &mut Graph, x: Var| {
        let k = g.shape(x).0;
        let c = g.slice_cols(x, 0, 1);
        let w = g.slice_cols(x, 1, 2);
        let hw = g.scale(w, 0.5);
        let s = g.sub(c, hw);
        let e = g.add(c, hw);
        debug_assert_eq!(g.shape(s), (k, 1));
        (s, e, w)
    };
    let (ps, pe, pw) = to_se(g, pred);
    let (gs, ge, gw) = to_se(g, gt);
    let lo = g.maximum(ps, gs);
    let hi = g.minimum(pe, ge);
    let span = g.sub(hi, lo);
    let zero = {
        let k = g.shape(span).0;
        g.constant(Mat::zeros((k, 1)))
    };
    let inter = g.maximum(span, zero);
    let widths = g.add(pw, gw);
    let union = g.sub(widths, inter);
    let hull_hi = g.maximum(pe, ge);
    let hull_lo = g.minimum(ps, gs);
    let hull = g.sub(hull_hi, hull_lo);
    let iou = g.div(inter, union);
    let gap = g.sub(hull, union);
    let pen = g.div(gap, hull);
    g.sub(iou, pen)
}
