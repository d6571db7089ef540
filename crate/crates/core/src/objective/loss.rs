//! Differentiable loss and decode ops over flattened `[N, A, C]` predictions.

use super::assign::{Anchors, BoxXyxy};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

const GIOU_EPS: f64 = 1e-9;
/// Clamp on the log-size offsets of the anchor-based branch.
const MAX_LOG_SCALE: f64 = 4.0;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of a small slice, in f64.
fn softmax_into<T: Scalar>(z: &[T], scale: f64, out: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64() * scale));
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v.as_f64() * scale - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

fn check_rows<T: Scalar>(op: &'static str, t: &Tensor<T>, cols: usize) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 3 || s[2] != cols {
        return shape_err(op, format!("expected [N, A, {cols}], got {s:?}"));
    }
    Ok((s[0], s[1]))
}

/// Expected bin index of a softmax distribution.
pub fn dfl_expectation<T: Scalar>(logits: &[T]) -> f64 {
    let mut p = vec![0.0; logits.len()];
    softmax_into(logits, 1.0, &mut p);
    p.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

fn ltrb_to_box(p: [f64; 2], s: f64, d: [f64; 4]) -> BoxXyxy {
    [p[0] - d[0] * s, p[1] - d[1] * s, p[0] + d[2] * s, p[1] + d[3] * s]
}

/// DFL branch `[N, A, 4 * bins]` to boxes `[N, A, 4]` in pixels; each side
/// distance is the distribution's expectation times the stride.
pub fn decode_dfl<T: Scalar>(reg: &Tensor<T>, anchors: &Anchors, bins: usize) -> Result<Tensor<T>> {
    let (n, a) = check_rows("decode_dfl", reg, 4 * bins)?;
    if a != anchors.len() {
        return shape_err("decode_dfl", format!("{a} anchors in predictions, {} expected", anchors.len()));
    }
    let x = reg.data();
    let mut probs = vec![0.0; n * a * 4 * bins];
    let mut out = Vec::with_capacity(n * a * 4);
    for r in 0..n * a {
        let ai = r % a;
        let mut d = [0.0; 4];
        for side in 0..4 {
            let off = (r * 4 + side) * bins;
            softmax_into(&x[off..off + bins], 1.0, &mut probs[off..off + bins]);
            d[side] = (0..bins).map(|k| k as f64 * probs[off + k]).sum();
        }
        let b = ltrb_to_box(anchors.points[ai], anchors.strides[ai], d);
        out.extend(b.iter().map(|v| T::lit(*v)));
    }
    let strides = anchors.strides.clone();
    Ok(Tensor::from_op(vec![n, a, 4], out, &[reg], move |g, _| {
        let mut gx = vec![T::zero(); probs.len()];
        for r in 0..n * a {
            let s = strides[r % a];
            for side in 0..4 {
                // x1 = cx - l*s, y1 = cy - t*s, x2 = cx + r*s, y2 = cy + b*s.
                let sign = if side < 2 { -1.0 } else { 1.0 };
                let gd = g[r * 4 + side].as_f64() * sign * s;
                let off = (r * 4 + side) * bins;
                let mean: f64 = (0..bins).map(|k| k as f64 * probs[off + k]).sum();
                for k in 0..bins {
                    gx[off + k] = T::lit(gd * probs[off + k] * (k as f64 - mean));
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Direct distances `[N, A, 4]` in stride units to pixel boxes.
pub fn decode_naive<T: Scalar>(reg: &Tensor<T>, anchors: &Anchors) -> Result<Tensor<T>> {
    let (n, a) = check_rows("decode_naive", reg, 4)?;
    if a != anchors.len() {
        return shape_err("decode_naive", format!("{a} anchors in predictions, {} expected", anchors.len()));
    }
    let x = reg.data();
    let mut out = Vec::with_capacity(n * a * 4);
    for r in 0..n * a {
        let ai = r % a;
        let d = [0, 1, 2, 3].map(|k| x[r * 4 + k].as_f64());
        out.extend(ltrb_to_box(anchors.points[ai], anchors.strides[ai], d).map(T::lit));
    }
    let strides = anchors.strides.clone();
    Ok(Tensor::from_op(vec![n, a, 4], out, &[reg], move |g, _| {
        let gx = g
            .iter()
            .enumerate()
            .map(|(i, gv)| {
                let s = strides[(i / 4) % a];
                let sign = if i % 4 < 2 { -1.0 } else { 1.0 };
                T::lit(gv.as_f64() * sign * s)
            })
            .collect();
        vec![Some(gx)]
    }))
}

/// Anchor-based offsets `(tx, ty, tw, th)` relative to each square prior:
/// center `p + t * side`, size `side * exp(t)`.
pub fn decode_anchor<T: Scalar>(reg: &Tensor<T>, anchors: &Anchors) -> Result<Tensor<T>> {
    let (n, a) = check_rows("decode_anchor", reg, 4)?;
    if a != anchors.len() {
        return shape_err("decode_anchor", format!("{a} anchors in predictions, {} expected", anchors.len()));
    }
    let x = reg.data();
    let side = |ai: usize| anchors.boxes[ai][2] - anchors.boxes[ai][0];
    let mut out = Vec::with_capacity(n * a * 4);
    for r in 0..n * a {
        let ai = r % a;
        let s = side(ai);
        let t = [0, 1, 2, 3].map(|k| x[r * 4 + k].as_f64());
        let cx = anchors.points[ai][0] + t[0] * s;
        let cy = anchors.points[ai][1] + t[1] * s;
        let w = s * t[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        let h = s * t[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
        out.extend([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0].map(T::lit));
    }
    let sides: Vec<f64> = (0..a).map(side).collect();
    Ok(Tensor::from_op(vec![n, a, 4], out, &[reg], move |g, p| {
        let x = p[0].data();
        let mut gx = vec![T::zero(); x.len()];
        for r in 0..n * a {
            let s = sides[r % a];
            let gb = [0, 1, 2, 3].map(|k| g[r * 4 + k].as_f64());
            gx[r * 4] = T::lit((gb[0] + gb[2]) * s);
            gx[r * 4 + 1] = T::lit((gb[1] + gb[3]) * s);
            for (k, (lo, hi)) in [(2, (0, 2)), (3, (1, 3))] {
                let t = x[r * 4 + k].as_f64();
                if t.abs() < MAX_LOG_SCALE {
                    let half = s * t.exp() / 2.0;
                    gx[r * 4 + k] = T::lit((gb[hi] - gb[lo]) * half);
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Selects rows `rows` (flat indices into `N * A`) of an `[N, A, C]` tensor.
pub fn gather_rows<T: Scalar>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 {
        return shape_err("gather_rows", format!("expected [N, A, C], got {s:?}"));
    }
    let (total, c) = (s[0] * s[1], s[2]);
    if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
        return shape_err("gather_rows", format!("row {bad} out of range {total}"));
    }
    let x = t.data();
    let mut out = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        out.extend_from_slice(&x[r * c..(r + 1) * c]);
    }
    let rows = rows.to_vec();
    Ok(Tensor::from_op(vec![rows.len(), c], out, &[t], move |g, _| {
        let mut gx = vec![T::zero(); total * c];
        for (i, &r) in rows.iter().enumerate() {
            for k in 0..c {
                gx[r * c + k] = gx[r * c + k] + g[i * c + k];
            }
        }
        vec![Some(gx)]
    }))
}

/// Generalized IoU of two boxes.
pub fn giou(p: &BoxXyxy, t: &BoxXyxy) -> f64 {
    1.0 - giou_terms(p, t).0
}

/// `(loss, d loss / d p)` for one predicted box against a fixed target.
fn giou_terms(p: &BoxXyxy, t: &BoxXyxy) -> (f64, [f64; 4]) {
    let (pw, ph) = (p[2] - p[0], p[3] - p[1]);
    let (wp, hp) = (pw.max(0.0), ph.max(0.0));
    let ap = wp * hp;
    let at = (t[2] - t[0]) * (t[3] - t[1]);
    let iw_raw = p[2].min(t[2]) - p[0].max(t[0]);
    let ih_raw = p[3].min(t[3]) - p[1].max(t[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = ap + at - inter + GIOU_EPS;
    let cw = p[2].max(t[2]) - p[0].min(t[0]);
    let ch = p[3].max(t[3]) - p[1].min(t[1]);
    let hull = cw * ch + GIOU_EPS;
    let loss = 2.0 - inter / union - union / hull;

    let d_inter = -1.0 / union - inter / (union * union) + 1.0 / hull;
    let d_ap = inter / (union * union) - 1.0 / hull;
    let d_hull = union / (hull * hull);
    let ind = |c: bool| if c { 1.0 } else { 0.0 };
    let mut g = [0.0; 4];
    // x pair (k = 0, 2) and y pair (k = 1, 3).
    for (lo, hi, other_p, other_i, other_c, raw_p, raw_i) in [
        (0, 2, hp, ih, ch, pw, iw_raw),
        (1, 3, wp, iw, cw, ph, ih_raw),
    ] {
        let area_side = d_ap * other_p * ind(raw_p > 0.0);
        let inter_side = d_inter * other_i * ind(raw_i > 0.0);
        let hull_side = d_hull * other_c;
        g[lo] = -area_side - inter_side * ind(p[lo] >= t[lo]) - hull_side * ind(p[lo] <= t[lo]);
        g[hi] = area_side + inter_side * ind(p[hi] <= t[hi]) + hull_side * ind(p[hi] >= t[hi]);
    }
    (loss, g)
}

/// `sum_i w_i * (1 - GIoU(pred_i, target_i)) / norm` over `[M, 4]` boxes.
pub fn giou_loss<T: Scalar>(
    pred: &Tensor<T>,
    targets: &[BoxXyxy],
    weights: &[f64],
    norm: f64,
) -> Result<Tensor<T>> {
    let s = pred.shape();
    if s.len() != 2 || s[1] != 4 || s[0] != targets.len() || weights.len() != targets.len() {
        return shape_err(
            "giou_loss",
            format!("pred {s:?}, {} targets, {} weights", targets.len(), weights.len()),
        );
    }
    let x = pred.data();
    let mut total = 0.0;
    let mut grads = vec![T::zero(); x.len()];
    for (i, (t, w)) in targets.iter().zip(weights).enumerate() {
        let p = [0, 1, 2, 3].map(|k| x[i * 4 + k].as_f64());
        let (l, g) = giou_terms(&p, t);
        total += w * l / norm;
        for k in 0..4 {
            grads[i * 4 + k] = T::lit(w * g[k] / norm);
        }
    }
    Ok(Tensor::from_op(vec![1], vec![T::lit(total)], &[pred], move |g, _| {
        vec![Some(grads.iter().map(|v| *v * g[0]).collect())]
    }))
}

/// Bracketing bins and weights of a continuous target in `[0, reg_max]`.
/// The right bin is always `left + 1`, so `t = reg_max` uses the pair
/// `(reg_max - 1, reg_max)` with all weight on the right.
pub fn dfl_bracket(t: f64, reg_max: usize) -> (usize, f64, f64) {
    let t = t.clamp(0.0, reg_max as f64);
    let left = (t.floor() as usize).min(reg_max - 1);
    let right = left + 1;
    (left, right as f64 - t, t - left as f64)
}

/// Distribution focal loss over `[M, 4 * bins]` logits against per-side
/// targets in bin units: `sum_i w_i * mean_side CE_bracket / norm`.
pub fn dfl_loss<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[[f64; 4]],
    weights: &[f64],
    norm: f64,
) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[1] % 4 != 0 {
        return shape_err("dfl_loss", format!("expected [M, 4 * bins], got {s:?}"));
    }
    let bins = s[1] / 4;
    if bins < 2 {
        return Err(Error::InvalidArgument(format!(
            "reg_max must be >= 1 (got {} bins)",
            bins
        )));
    }
    if s[0] != targets.len() || weights.len() != targets.len() {
        return shape_err("dfl_loss", format!("{} rows, {} targets", s[0], targets.len()));
    }
    let reg_max = bins - 1;
    let x = logits.data();
    let mut total = 0.0;
    let mut grads = vec![T::zero(); x.len()];
    let mut p = vec![0.0; bins];
    for (i, (t, w)) in targets.iter().zip(weights).enumerate() {
        let scale = w / (4.0 * norm);
        for side in 0..4 {
            let off = (i * 4 + side) * bins;
            softmax_into(&x[off..off + bins], 1.0, &mut p);
            let (l, wl, wr) = dfl_bracket(t[side], reg_max);
            let loss = -(wl * p[l].max(f64::MIN_POSITIVE).ln() + wr * p[l + 1].max(f64::MIN_POSITIVE).ln());
            total += scale * loss;
            for k in 0..bins {
                let target = if k == l {
                    wl
                } else if k == l + 1 {
                    wr
                } else {
                    0.0
                };
                grads[off + k] = T::lit(scale * (p[k] * (wl + wr) - target));
            }
        }
    }
    Ok(Tensor::from_op(vec![1], vec![T::lit(total)], &[logits], move |g, _| {
        vec![Some(grads.iter().map(|v| *v * g[0]).collect())]
    }))
}

/// Varifocal-style classification loss on logits of any shape:
/// BCE against the soft targets, weighted by the target on positives
/// (`target > 0`) and by `p^2` on negatives, summed and divided by `norm`.
pub fn vfl_loss<T: Scalar>(logits: &Tensor<T>, targets: &[f64], norm: f64) -> Result<Tensor<T>> {
    if logits.numel() != targets.len() {
        return shape_err(
            "vfl_loss",
            format!("{} logits, {} targets", logits.numel(), targets.len()),
        );
    }
    let x = logits.data();
    let mut total = 0.0;
    let mut grads = vec![T::zero(); x.len()];
    for (i, (&z, &t)) in x.iter().zip(targets).enumerate() {
        let z = z.as_f64();
        let p = sigmoid(z);
        let bce = softplus(z) - t * z;
        let (l, g) = if t > 0.0 {
            (t * bce, t * (p - t))
        } else {
            (p * p * bce, 2.0 * p * p * (1.0 - p) * bce + p * p * p)
        };
        total += l;
        grads[i] = T::lit(g / norm);
    }
    total /= norm;
    Ok(Tensor::from_op(vec![1], vec![T::lit(total)], &[logits], move |g, _| {
        vec![Some(grads.iter().map(|v| *v * g[0]).collect())]
    }))
}

/// Bernoulli KL(teacher || student) per class on sigmoid probabilities of
/// temperature-scaled logits, summed over classes and averaged over rows
/// (every anchor). `student` and `teacher` share the shape `[.., K]`.
pub fn kd_cls_loss<T: Scalar>(
    student: &Tensor<T>,
    teacher: &[T],
    num_classes: usize,
    temperature: f64,
) -> Result<Tensor<T>> {
    if student.numel() != teacher.len() {
        return Err(Error::Mismatch(format!(
            "classification KD: student has {} values, teacher {}",
            student.numel(),
            teacher.len()
        )));
    }
    let rows = (student.numel() / num_classes.max(1)).max(1) as f64;
    let x = student.data();
    let mut total = 0.0;
    let mut grads = vec![T::zero(); x.len()];
    for (i, (s, t)) in x.iter().zip(teacher).enumerate() {
        let (zs, zt) = (s.as_f64() / temperature, t.as_f64() / temperature);
        let pt = sigmoid(zt);
        let ps = sigmoid(zs);
        // ln p = -softplus(-z), ln(1 - p) = -softplus(z).
        let (lpt, lqt) = (-softplus(-zt), -softplus(zt));
        let (lps, lqs) = (-softplus(-zs), -softplus(zs));
        let kl = pt * (lpt - lps) + (1.0 - pt) * (lqt - lqs);
        total += kl.max(0.0);
        grads[i] = T::lit((ps - pt) / temperature / rows);
    }
    Ok(Tensor::from_op(vec![1], vec![T::lit(total / rows)], &[student], move |g, _| {
        vec![Some(grads.iter().map(|v| *v * g[0]).collect())]
    }))
}

/// Softmax KL(teacher || student) per side over `[M, 4 * bins]` rows,
/// averaged over sides and rows. Zero rows give zero.
pub fn kd_reg_loss<T: Scalar>(
    student: &Tensor<T>,
    teacher: &[T],
    temperature: f64,
) -> Result<Tensor<T>> {
    let s = student.shape();
    if s.len() != 2 || s[1] % 4 != 0 {
        return shape_err("kd_reg_loss", format!("expected [M, 4 * bins], got {s:?}"));
    }
    if student.numel() != teacher.len() {
        return Err(Error::Mismatch(format!(
            "regression KD: student has {} values, teacher {}",
            student.numel(),
            teacher.len()
        )));
    }
    let bins = s[1] / 4;
    let groups = s[0] * 4;
    let denom = groups.max(1) as f64;
    let x = student.data();
    let inv_t = 1.0 / temperature;
    let mut total = 0.0;
    let mut grads = vec![T::zero(); x.len()];
    let (mut ps, mut pt) = (vec![0.0; bins], vec![0.0; bins]);
    for gi in 0..groups {
        let off = gi * bins;
        softmax_into(&x[off..off + bins], inv_t, &mut ps);
        softmax_into(&teacher[off..off + bins], inv_t, &mut pt);
        for k in 0..bins {
            if pt[k] > 0.0 {
                total += pt[k] * (pt[k].ln() - ps[k].max(f64::MIN_POSITIVE).ln());
            }
            grads[off + k] = T::lit((ps[k] - pt[k]) * inv_t / denom);
        }
    }
    Ok(Tensor::from_op(vec![1], vec![T::lit((total / denom).max(0.0))], &[student], move |g, _| {
        vec![Some(grads.iter().map(|v| *v * g[0]).collect())]
    }))
}

/// `KL(cls) + KL(reg)`; see [`kd_cls_loss`] and [`kd_reg_loss`].
pub fn kd_loss<T: Scalar>(
    teacher_cls: &[T],
    student_cls: &Tensor<T>,
    teacher_reg: &[T],
    student_reg: &Tensor<T>,
    num_classes: usize,
    temperature: f64,
) -> Result<Tensor<T>> {
    let c = kd_cls_loss(student_cls, teacher_cls, num_classes, temperature)?;
    let r = kd_reg_loss(student_reg, teacher_reg, temperature)?;
    crate::tensor::add(&c, &r)
}

/// Distillation weight for epoch `epoch` of `max_epochs`: decays from 1 to
/// 0.01 along a half cosine.
pub fn cosine_alpha(epoch: usize, max_epochs: usize) -> Result<f64> {
    if max_epochs == 0 {
        return Err(Error::InvalidArgument("max_epochs must be positive".into()));
    }
    if epoch > max_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} exceeds max_epochs {max_epochs}"
        )));
    }
    let r = epoch as f64 / max_epochs as f64;
    Ok(-0.99 * ((1.0 - (std::f64::consts::PI * r).cos()) / 2.0) + 1.0)
}

/// `l_det + alpha * l_kd`.
pub fn total_loss<T: Scalar>(l_det: &Tensor<T>, l_kd: Option<&Tensor<T>>, alpha: f64) -> Result<Tensor<T>> {
    match l_kd {
        None => Ok(l_det.clone()),
        Some(kd) => crate::tensor::add(l_det, &crate::tensor::scale(kd, T::lit(alpha))),
    }
}

/// Scalar references used by the tests and the evaluator.
pub mod reference {

    pub fn bernoulli_kl(pt: f64, ps: f64) -> f64 {
        let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
        term(pt, ps) + term(1.0 - pt, 1.0 - ps)
    }

    pub fn bce(p: f64, t: f64) -> f64 {
        -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
    }

    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
}
