//! Label assignment: ATSS for warm-up epochs and the task-aligned assigner.

use std::ops::Range;

use crate::error::{Error, Result};

/// `(x1, y1, x2, y2)` in input pixels.
pub type BoxXyxy = [f64; 4];

/// Anchor points of every head level, level-major and row-major within a
/// level (the order of [`crate::tensor::flatten_levels`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Anchors {
    pub points: Vec<[f64; 2]>,
    pub strides: Vec<f64>,
    /// Square prior box of side `anchor_scale * stride` per point.
    pub boxes: Vec<BoxXyxy>,
    pub level_ranges: Vec<Range<usize>>,
}

impl Anchors {
    pub fn new(grid_sizes: &[(usize, usize)], strides: &[usize], anchor_scale: f64) -> Self {
        let mut a = Anchors {
            points: Vec::new(),
            strides: Vec::new(),
            boxes: Vec::new(),
            level_ranges: Vec::new(),
        };
        for (&(h, w), &s) in grid_sizes.iter().zip(strides) {
            let start = a.points.len();
            let s = s as f64;
            let half = anchor_scale * s / 2.0;
            for i in 0..h {
                for j in 0..w {
                    let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
                    a.points.push([cx, cy]);
                    a.strides.push(s);
                    a.boxes.push([cx - half, cy - half, cx + half, cy + half]);
                }
            }
            a.level_ranges.push(start..a.points.len());
        }
        a
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BoxXyxy>,
    pub class_ids: Vec<usize>,
}

impl GroundTruth {
    pub fn new(boxes: Vec<BoxXyxy>, class_ids: Vec<usize>) -> Self {
        Self { boxes, class_ids }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Data(format!(
                "{} boxes but {} class ids",
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        for (b, &c) in self.boxes.iter().zip(&self.class_ids) {
            if !(b[2] > b[0] && b[3] > b[1]) {
                return Err(Error::Data(format!("degenerate box {b:?}")));
            }
            if c >= num_classes {
                return Err(Error::Data(format!(
                    "class id {c} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub fg_mask: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    /// Soft label for the matched class, in `[0, 1]`; zero on background.
    pub target_scores: Vec<f64>,
    pub target_boxes: Vec<BoxXyxy>,
    pub target_classes: Vec<usize>,
}

impl AssignmentResult {
    pub fn background(num_anchors: usize) -> Self {
        Self {
            fg_mask: vec![false; num_anchors],
            matched_gt: vec![None; num_anchors],
            target_scores: vec![0.0; num_anchors],
            target_boxes: vec![[0.0; 4]; num_anchors],
            target_classes: vec![0; num_anchors],
        }
    }

    pub fn num_fg(&self) -> usize {
        self.fg_mask.iter().filter(|m| **m).count()
    }

    fn set(&mut self, a: usize, g: usize, gts: &GroundTruth, score: f64) {
        self.fg_mask[a] = true;
        self.matched_gt[a] = Some(g);
        self.target_scores[a] = score;
        self.target_boxes[a] = gts.boxes[g];
        self.target_classes[a] = gts.class_ids[g];
    }
}

pub fn box_area(b: &BoxXyxy) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn box_iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Whether a point lies strictly inside a box (margin 1e-9).
pub fn point_in_box(p: &[f64; 2], b: &BoxXyxy) -> bool {
    const EPS: f64 = 1e-9;
    p[0] - b[0] > EPS && p[1] - b[1] > EPS && b[2] - p[0] > EPS && b[3] - p[1] > EPS
}

fn center(b: &BoxXyxy) -> [f64; 2] {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0]
}

/// Sample mean and unbiased standard deviation (zero for one sample).
fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Adaptive training sample selection.
///
/// Per GT and level, the `topk` anchor points closest to the GT center are
/// candidates. A candidate is positive when its prior-box IoU reaches the
/// mean plus standard deviation of all candidate IoUs of that GT and its
/// point lies inside the GT. An anchor claimed by several GTs keeps the one
/// with the highest prior-box IoU (lowest index on ties).
///
/// Target scores are the IoU between the prediction and its GT when
/// `pred_boxes` is given, otherwise 1.
pub fn atss_assign(
    anchors: &Anchors,
    gts: &GroundTruth,
    topk: usize,
    pred_boxes: Option<&[BoxXyxy]>,
) -> AssignmentResult {
    let n = anchors.len();
    let mut out = AssignmentResult::background(n);
    // Best (iou, gt) per anchor over all GTs that select it.
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    for (g, gt) in gts.boxes.iter().enumerate() {
        let c = center(gt);
        let mut candidates = Vec::new();
        for range in &anchors.level_ranges {
            let mut idx: Vec<usize> = range.clone().collect();
            let dist = |a: usize| {
                let p = anchors.points[a];
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
            };
            idx.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            candidates.extend(idx.into_iter().take(topk));
        }
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<f64> = candidates
            .iter()
            .map(|&a| box_iou(&anchors.boxes[a], gt))
            .collect();
        let (mean, std) = mean_std(&ious);
        let threshold = mean + std;
        for (&a, &iou) in candidates.iter().zip(&ious) {
            if iou >= threshold && point_in_box(&anchors.points[a], gt) {
                let better = match best[a] {
                    None => true,
                    Some((b, _)) => iou > b,
                };
                if better {
                    best[a] = Some((iou, g));
                }
            }
        }
    }
    for (a, b) in best.iter().enumerate() {
        if let Some((_, g)) = *b {
            let score = pred_boxes.map_or(1.0, |p| box_iou(&p[a], &gts.boxes[g]));
            out.set(a, g, gts, score);
        }
    }
    out
}

/// Task-aligned assignment.
///
/// `pred_scores` is `[A, num_classes]` row-major (probabilities). The
/// alignment metric of anchor `a` for GT `g` is
/// `score[a, class_g]^alpha * iou(pred_a, g)^beta`. Per GT, the `topk` anchors
/// whose points lie inside the GT are taken in descending metric order (lower
/// index first on ties). An anchor claimed by several GTs keeps the one with
/// the largest metric. Target score = `metric / max_metric_g * max_iou_g`,
/// both maxima over the GT's final positives.
#[allow(clippy::too_many_arguments)]
pub fn tal_assign(
    pred_scores: &[f64],
    num_classes: usize,
    pred_boxes: &[BoxXyxy],
    points: &[[f64; 2]],
    gts: &GroundTruth,
    alpha: f64,
    beta: f64,
    topk: usize,
) -> AssignmentResult {
    let n = points.len();
    let mut out = AssignmentResult::background(n);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    let mut metrics = vec![vec![0.0; n]; gts.len()];
    let mut ious = vec![vec![0.0; n]; gts.len()];
    for (g, gt) in gts.boxes.iter().enumerate() {
        let cls = gts.class_ids[g];
        let mut inside = Vec::new();
        for a in 0..n {
            if point_in_box(&points[a], gt) {
                let iou = box_iou(&pred_boxes[a], gt);
                let s = pred_scores[a * num_classes + cls];
                metrics[g][a] = s.powf(alpha) * iou.powf(beta);
                ious[g][a] = iou;
                inside.push(a);
            }
        }
        let m = &metrics[g];
        inside.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
        for &a in inside.iter().take(topk) {
            let better = match best[a] {
                None => true,
                Some((b, _)) => m[a] > b,
            };
            if better {
                best[a] = Some((m[a], g));
            }
        }
    }
    let mut max_metric = vec![0.0f64; gts.len()];
    let mut max_iou = vec![0.0f64; gts.len()];
    for (a, b) in best.iter().enumerate() {
        if let Some((m, g)) = *b {
            max_metric[g] = max_metric[g].max(m);
            max_iou[g] = max_iou[g].max(ious[g][a]);
        }
    }
    for (a, b) in best.iter().enumerate() {
        if let Some((m, g)) = *b {
            let score = if max_metric[g] > 0.0 {
                m / max_metric[g] * max_iou[g]
            } else {
                0.0
            };
            out.set(a, g, gts, score.min(1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// ATSS read literally: an anchor is a candidate of GT `g` on its level
    /// iff fewer than `topk` anchors of that level are strictly closer (or
    /// equally close with a lower index).
    fn atss_oracle(
        anchors: &Anchors,
        gts: &GroundTruth,
        topk: usize,
    ) -> Vec<Option<usize>> {
        let n = anchors.len();
        let mut claims: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (g, gt) in gts.boxes.iter().enumerate() {
            let c = [(gt[0] + gt[2]) / 2.0, (gt[1] + gt[3]) / 2.0];
            let d = |a: usize| {
                let p = anchors.points[a];
                ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
            };
            let mut cand = Vec::new();
            for r in &anchors.level_ranges {
                for a in r.clone() {
                    let ahead = r
                        .clone()
                        .filter(|&b| d(b) < d(a) || (d(b) == d(a) && b < a))
                        .count();
                    if ahead < topk {
                        cand.push(a);
                    }
                }
            }
            let ious: Vec<f64> = cand.iter().map(|&a| box_iou(&anchors.boxes[a], gt)).collect();
            let m = ious.iter().sum::<f64>() / ious.len() as f64;
            let s = if ious.len() > 1 {
                (ious.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (ious.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            for (&a, &iou) in cand.iter().zip(&ious) {
                let p = anchors.points[a];
                let inside = p[0] > gt[0] + 1e-9 && p[0] < gt[2] - 1e-9 && p[1] > gt[1] + 1e-9 && p[1] < gt[3] - 1e-9;
                if iou >= m + s && inside {
                    claims[a].push((g, iou));
                }
            }
        }
        claims
            .into_iter()
            .map(|c| {
                let mut best: Option<(usize, f64)> = None;
                for (g, iou) in c {
                    if best.map_or(true, |(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                best.map(|b| b.0)
            })
            .collect()
    }

    /// Task-aligned rule read literally, with exhaustive rank counting.
    fn tal_oracle(
        scores: &[f64],
        k_cls: usize,
        pred: &[BoxXyxy],
        points: &[[f64; 2]],
        gts: &GroundTruth,
        alpha: f64,
        beta: f64,
        topk: usize,
    ) -> (Vec<Option<usize>>, Vec<f64>) {
        let n = points.len();
        let g_n = gts.len();
        let inside = |a: usize, g: usize| point_in_box(&points[a], &gts.boxes[g]);
        let metric = |a: usize, g: usize| {
            scores[a * k_cls + gts.class_ids[g]].powf(alpha) * box_iou(&pred[a], &gts.boxes[g]).powf(beta)
        };
        let mut owner = vec![None; n];
        for a in 0..n {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..g_n {
                if !inside(a, g) {
                    continue;
                }
                let ma = metric(a, g);
                let rank = (0..n)
                    .filter(|&b| inside(b, g))
                    .filter(|&b| metric(b, g) > ma || (metric(b, g) == ma && b < a))
                    .count();
                if rank < topk && best.map_or(true, |(_, m)| ma > m) {
                    best = Some((g, ma));
                }
            }
            owner[a] = best.map(|b| b.0);
        }
        let mut scores_out = vec![0.0; n];
        for a in 0..n {
            if let Some(g) = owner[a] {
                let pos: Vec<usize> = (0..n).filter(|&b| owner[b] == Some(g)).collect();
                let mm = pos.iter().map(|&b| metric(b, g)).fold(0.0, f64::max);
                let mi = pos.iter().map(|&b| box_iou(&pred[b], &gts.boxes[g])).fold(0.0, f64::max);
                scores_out[a] = if mm > 0.0 { metric(a, g) / mm * mi } else { 0.0 };
            }
        }
        (owner, scores_out)
    }

    fn random_gts(rng: &mut ChaCha8Rng, size: f64, max_gts: usize, k: usize) -> GroundTruth {
        let n = rng.gen_range(1..=max_gts);
        let mut gts = GroundTruth::default();
        for _ in 0..n {
            let w = rng.gen_range(4.0..size * 0.8);
            let h = rng.gen_range(4.0..size * 0.8);
            let x = rng.gen_range(0.0..size - w);
            let y = rng.gen_range(0.0..size - h);
            gts.boxes.push([x, y, x + w, y + h]);
            gts.class_ids.push(rng.gen_range(0..k));
        }
        gts
    }

    #[test]
    fn single_gt_on_one_cell_with_topk_one() {
        let anchors = Anchors::new(&[(4, 4)], &[8], 1.0);
        // Exactly the prior box of cell (1, 2).
        let gts = GroundTruth::new(vec![[16.0, 8.0, 24.0, 16.0]], vec![0]);
        let r = atss_assign(&anchors, &gts, 1, None);
        assert_eq!(r.num_fg(), 1);
        assert!(r.fg_mask[4 + 2]);
        assert_eq!(r.target_scores[6], 1.0);
    }

    #[test]
    fn no_gts_means_all_background() {
        let anchors = Anchors::new(&[(8, 8), (4, 4)], &[8, 16], 4.0);
        let r = atss_assign(&anchors, &GroundTruth::default(), 9, None);
        assert_eq!(r.num_fg(), 0);
        let r = tal_assign(&[0.5; 80], 1, &[[0.0, 0.0, 1.0, 1.0]; 80], &anchors.points, &GroundTruth::default(), 1.0, 6.0, 13);
        assert_eq!(r.num_fg(), 0);
    }

    #[test]
    fn atss_matches_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for scene in 0..100 {
            let side = rng.gen_range(2..=8usize);
            let anchors = Anchors::new(&[(side, side), (side.div_ceil(2), side.div_ceil(2))], &[8, 16], 4.0);
            let gts = random_gts(&mut rng, side as f64 * 8.0, 3, 2);
            let topk = rng.gen_range(1..=9);
            let r = atss_assign(&anchors, &gts, topk, None);
            assert_eq!(r.matched_gt, atss_oracle(&anchors, &gts, topk), "scene {scene}");
        }
    }

    #[test]
    fn tal_perfect_prediction_scores_one() {
        let anchors = Anchors::new(&[(4, 4)], &[8], 4.0);
        let gt = [8.0, 8.0, 24.0, 24.0];
        let gts = GroundTruth::new(vec![gt], vec![0]);
        let mut pred = vec![[0.0, 0.0, 1.0, 1.0]; 16];
        let mut scores = vec![0.0; 16];
        pred[5] = gt;
        scores[5] = 1.0;
        let r = tal_assign(&scores, 1, &pred, &anchors.points, &gts, 1.0, 6.0, 13);
        assert!(r.fg_mask[5]);
        assert_eq!(r.target_scores[5], 1.0);
    }

    #[test]
    fn tal_zero_exponents_take_first_k_inside() {
        let anchors = Anchors::new(&[(6, 6)], &[8], 4.0);
        let gts = GroundTruth::new(vec![[0.0, 0.0, 48.0, 48.0]], vec![0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..36).map(|_| rng.gen()).collect();
        let pred = vec![[1.0, 1.0, 9.0, 9.0]; 36];
        let r = tal_assign(&scores, 1, &pred, &anchors.points, &gts, 0.0, 0.0, 5);
        let fg: Vec<usize> = (0..36).filter(|&a| r.fg_mask[a]).collect();
        assert_eq!(fg, [0, 1, 2, 3, 4]);
    }

    #[test]
    fn tal_matches_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for scene in 0..100 {
            let side = rng.gen_range(2..=6usize);
            let anchors = Anchors::new(&[(side, side)], &[8], 4.0);
            let n = anchors.len();
            let k = 2;
            let gts = random_gts(&mut rng, side as f64 * 8.0, 3, k);
            let scores: Vec<f64> = (0..n * k).map(|_| rng.gen()).collect();
            let pred: Vec<BoxXyxy> = anchors
                .points
                .iter()
                .map(|p| {
                    let (l, t, r, b): (f64, f64, f64, f64) = (rng.gen_range(1.0..20.0), rng.gen_range(1.0..20.0), rng.gen_range(1.0..20.0), rng.gen_range(1.0..20.0));
                    [p[0] - l, p[1] - t, p[0] + r, p[1] + b]
                })
                .collect();
            let topk = rng.gen_range(1..=13);
            let r = tal_assign(&scores, k, &pred, &anchors.points, &gts, 1.0, 6.0, topk);
            let (owner, ts) = tal_oracle(&scores, k, &pred, &anchors.points, &gts, 1.0, 6.0, topk);
            assert_eq!(r.matched_gt, owner, "scene {scene}");
            for (a, b) in r.target_scores.iter().zip(&ts) {
                assert!((a - b).abs() < 1e-12);
                assert!(*a <= 1.0);
            }
        }
    }

    #[test]
    fn validation_catches_bad_ground_truth() {
        assert!(GroundTruth::new(vec![[2.0, 2.0, 1.0, 5.0]], vec![0]).validate(1).is_err());
        assert!(GroundTruth::new(vec![[0.0, 0.0, 1.0, 1.0]], vec![3]).validate(2).is_err());
        assert!(GroundTruth::new(vec![[0.0, 0.0, 1.0, 1.0]], vec![1]).validate(2).is_ok());
    }
}
