//! Box regression objective: weighted L1 plus generalized IoU.
//!
//! Raw predictions are regularized before scoring: widths and heights are
//! `max(0, x2 - x1)`, intersections clip at zero, and sub-gradients are zero
//! wherever a clamp is active.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const LAMBDA_L1: f64 = 5.0;
pub const LAMBDA_GIOU: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Giou {
    pub value: f64,
    /// Both boxes have zero area; `value` is reported as 0.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_term: f64,
    pub giou_term: f64,
    pub total: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

/// Value and partial derivatives of `max(0, v)` with respect to `v`.
fn relu(v: f64) -> (f64, f64) {
    if v > 0.0 {
        (v, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Generalized IoU together with its gradient with respect to `a`'s corners.
pub fn giou_with_grad(a: &BBox, b: &BBox) -> (Giou, [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();

    let (aw, daw) = relu(ax2 - ax1);
    let (ah, dah) = relu(ay2 - ay1);
    let (bw, _) = relu(bx2 - bx1);
    let (bh, _) = relu(by2 - by1);
    let area_a = aw * ah;
    let area_b = bw * bh;
    if area_a == 0.0 && area_b == 0.0 {
        return (
            Giou {
                value: 0.0,
                degenerate: true,
            },
            [0.0; 4],
        );
    }

    // d(min/max)/d(a-coordinate): 1 when `a` supplies the extreme value.
    let (ix1, dix1) = if ax1 > bx1 { (ax1, 1.0) } else { (bx1, 0.0) };
    let (iy1, diy1) = if ay1 > by1 { (ay1, 1.0) } else { (by1, 0.0) };
    let (ix2, dix2) = if ax2 < bx2 { (ax2, 1.0) } else { (bx2, 0.0) };
    let (iy2, diy2) = if ay2 < by2 { (ay2, 1.0) } else { (by2, 0.0) };
    let (iw, diw) = relu(ix2 - ix1);
    let (ih, dih) = relu(iy2 - iy1);
    let inter = iw * ih;
    let union = area_a + area_b - inter;

    let (cx1, dcx1) = if ax1 < bx1 { (ax1, 1.0) } else { (bx1, 0.0) };
    let (cy1, dcy1) = if ay1 < by1 { (ay1, 1.0) } else { (by1, 0.0) };
    let (cx2, dcx2) = if ax2 > bx2 { (ax2, 1.0) } else { (bx2, 0.0) };
    let (cy2, dcy2) = if ay2 > by2 { (ay2, 1.0) } else { (by2, 0.0) };
    let (cw, dcw) = relu(cx2 - cx1);
    let (ch, dch) = relu(cy2 - cy1);
    let area_c = cw * ch;

    let iou = inter / union;
    let value = iou - (area_c - union) / area_c;

    // value = inter/union + union/area_c - 1
    let d_inter = 1.0 / union;
    let d_union = -inter / (union * union) + 1.0 / area_c;
    let d_area_c = -union / (area_c * area_c);

    // Partials of intermediate quantities with respect to (ax1, ay1, ax2, ay2).
    let d_area_a = [-daw * ah, -dah * aw, daw * ah, dah * aw];
    let d_iw = [-diw * dix1, 0.0, diw * dix2, 0.0];
    let d_ih = [0.0, -dih * diy1, 0.0, dih * diy2];
    let d_cw = [-dcw * dcx1, 0.0, dcw * dcx2, 0.0];
    let d_ch = [0.0, -dch * dcy1, 0.0, dch * dcy2];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let di = d_iw[k] * ih + iw * d_ih[k];
        let du = d_area_a[k] - di;
        let dc = d_cw[k] * ch + cw * d_ch[k];
        grad[k] = d_inter * di + d_union * du + d_area_c * dc;
    }
    (
        Giou {
            value,
            degenerate: false,
        },
        grad,
    )
}

/// `IoU - (area(C) - area(A ∪ B)) / area(C)`, with `C` the smallest enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> Giou {
    giou_with_grad(a, b).0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: LAMBDA_L1,
            giou: LAMBDA_GIOU,
        }
    }
}

/// Weighted L1 + GIoU loss and its gradient with respect to `pred`'s corners.
pub fn tracking_loss_with_grad(pred: &BBox, gt: &BBox) -> Result<(LossBreakdown, [f64; 4])> {
    weighted_loss_with_grad(pred, gt, LossWeights::default())
}

pub fn weighted_loss_with_grad(pred: &BBox, gt: &BBox, w: LossWeights) -> Result<(LossBreakdown, [f64; 4])> {
    if pred.frame != gt.frame {
        return Err(Error::Contract(format!(
            "loss between boxes in frames {:?} and {:?}",
            pred.frame, gt.frame
        )));
    }
    let p = pred.corners();
    let g = gt.corners();
    if p.iter().chain(&g).any(|v| !v.is_finite()) {
        return Err(Error::Numerics {
            op: "tracking_loss".into(),
        });
    }
    let mut l1 = 0.0;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        let d = p[k] - g[k];
        l1 += d.abs();
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[k] = w.l1 * sign / 4.0;
    }
    l1 /= 4.0;
    let (gi, dgi) = giou_with_grad(pred, gt);
    let giou_term = 1.0 - gi.value;
    for k in 0..4 {
        grad[k] -= w.giou * dgi[k];
    }
    let breakdown = LossBreakdown {
        l1_term: l1,
        giou_term,
        total: w.l1 * l1 + w.giou * giou_term,
        lambda_l1: w.l1,
        lambda_giou: w.giou,
    };
    Ok((breakdown, grad))
}

pub fn tracking_loss(pred: &BBox, gt: &BBox) -> Result<LossBreakdown> {
    Ok(tracking_loss_with_grad(pred, gt)?.0)
}
