//! Brute-force references for the assignment rules and NMS.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rbdet::objective::{box_iou, point_in_box, Anchors, BoxXyxy, GroundTruth};

fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// ATSS by exhaustive rank counting. A candidate of GT `g` on a level is an
/// anchor with fewer than `topk` anchors of that level strictly closer to the
/// GT center (ties broken by index).
pub fn atss(anchors: &Anchors, gts: &GroundTruth, topk: usize) -> Vec<Option<usize>> {
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
        let ious: Vec<f64> = cand.iter().map(|&a| iou(&anchors.boxes[a], gt)).collect();
        let m = ious.iter().sum::<f64>() / ious.len() as f64;
        let s = if ious.len() > 1 {
            (ious.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (ious.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        for (&a, &v) in cand.iter().zip(&ious) {
            let p = anchors.points[a];
            let inside = p[0] > gt[0] + 1e-9 && p[0] < gt[2] - 1e-9 && p[1] > gt[1] + 1e-9 && p[1] < gt[3] - 1e-9;
            if v >= m + s && inside {
                claims[a].push((g, v));
            }
        }
    }
    claims
        .into_iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (g, v) in c {
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            best.map(|b| b.0)
        })
        .collect()
}

/// Task-aligned assignment by exhaustive rank counting. Returns the owner
/// GT and the normalized target score of every anchor.
#[allow(clippy::too_many_arguments)]
pub fn tal(
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
    let inside = |a: usize, g: usize| point_in_box(&points[a], &gts.boxes[g]);
    let metric = |a: usize, g: usize| {
        scores[a * k_cls + gts.class_ids[g]].powf(alpha) * box_iou(&pred[a], &gts.boxes[g]).powf(beta)
    };
    let mut owner = vec![None; n];
    for (a, slot) in owner.iter_mut().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..gts.len() {
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
        *slot = best.map(|b| b.0);
    }
    let mut out = vec![0.0; n];
    for a in 0..n {
        if let Some(g) = owner[a] {
            let pos: Vec<usize> = (0..n).filter(|&b| owner[b] == Some(g)).collect();
            let mm = pos.iter().map(|&b| metric(b, g)).fold(0.0, f64::max);
            let mi = pos.iter().map(|&b| box_iou(&pred[b], &gts.boxes[g])).fold(0.0, f64::max);
            out[a] = if mm > 0.0 { metric(a, g) / mm * mi } else { 0.0 };
        }
    }
    (owner, out)
}

/// Greedy NMS over best-class candidates: walk in rank order and keep a box
/// unless a kept box of its group overlaps it by more than `iou_thresh`.
pub fn nms(
    boxes: &[BoxXyxy],
    scores: &[f64],
    k: usize,
    conf: f64,
    iou_thresh: f64,
    class_aware: bool,
) -> Vec<(usize, usize)> {
    let mut cand: Vec<(usize, usize, f64)> = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let mut best = (0, f64::NEG_INFINITY);
        for c in 0..k {
            if scores[i * k + c] > best.1 {
                best = (c, scores[i * k + c]);
            }
        }
        if best.1 >= conf && b[2] > b[0] && b[3] > b[1] {
            cand.push((i, best.0, best.1));
        }
    }
    cand.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for &(i, c, _) in &cand {
        let hit = kept
            .iter()
            .any(|&(j, cj)| (!class_aware || cj == c) && iou(&boxes[i], &boxes[j]) > iou_thresh);
        if !hit {
            kept.push((i, c));
        }
    }
    kept
}

pub fn random_gts(rng: &mut ChaCha8Rng, size: f64, max_gts: usize, k: usize) -> GroundTruth {
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
