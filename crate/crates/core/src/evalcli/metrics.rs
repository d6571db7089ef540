//! COCO-style box AP with 101-point interpolation.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::deploy::Detection;
use crate::error::{Error, Result};
use crate::objective::{box_area, box_iou, BoxXyxy};

pub const MAX_DETS: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// IoU thresholds .50:.05:.95, built from integers so that 0.6 is the same
/// double as `60.0 / 100.0`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA,
        }
    }
}

/// AP summary. A metric is `None` when no ground truth falls in its scope
/// (for example the large bucket on 64 px inputs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// AP over .50:.95 per class.
    pub per_class: Vec<Option<f64>>,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
}

impl EvalReport {
    pub fn ap50_or_zero(&self) -> f64 {
        self.ap50.unwrap_or(0.0)
    }
}

struct Det<'a> {
    image: usize,
    bbox: &'a BoxXyxy,
    score: f64,
}

/// Ordering used for every ranking: score descending, then image, then box
/// coordinates, so the result does not depend on input order.
fn rank(a: &Det, b: &Det) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then_with(|| {
            a.bbox
                .iter()
                .zip(b.bbox.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// 101-point interpolated AP from per-detection match flags (already in
/// rank order, ignored detections removed) and the ground-truth count.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let (mut ctp, mut cfp) = (0.0, 0.0);
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for &t in tp {
        if t {
            ctp += 1.0
        } else {
            cfp += 1.0
        }
        recall.push(ctp / num_gt as f64);
        precision.push(ctp / (ctp + cfp));
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP of one class at one threshold and area range, or `None` without
/// in-range ground truth.
fn class_ap(
    dets: &[Det],
    gts: &[Vec<&BoxXyxy>],
    iou_thresh: f64,
    range: AreaRange,
) -> Option<f64> {
    let ignored: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| g.iter().map(|b| !range.contains(box_area(b))).collect())
        .collect();
    let num_gt = ignored.iter().flatten().filter(|i| !**i).count();
    if num_gt == 0 {
        return None;
    }
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        // Best unmatched in-range GT first; an ignored GT only absorbs a
        // detection nothing else claims.
        let mut best: Option<(usize, bool, f64)> = None;
        for (j, g) in gts[d.image].iter().enumerate() {
            if matched[d.image][j] {
                continue;
            }
            let iou = box_iou(d.bbox, g);
            if iou < iou_thresh {
                continue;
            }
            let ign = ignored[d.image][j];
            let better = match best {
                None => true,
                Some((_, bign, biou)) => (bign && !ign) || (bign == ign && iou > biou),
            };
            if better {
                best = Some((j, ign, iou));
            }
        }
        match best {
            Some((j, ign, _)) => {
                matched[d.image][j] = true;
                if !ign {
                    flags.push(true);
                }
            }
            None => {
                if range.contains(box_area(d.bbox)) {
                    flags.push(false);
                }
            }
        }
    }
    Some(interpolated_ap(&flags, num_gt))
}

fn mean(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.flatten().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Evaluates detections keyed by image id against a dataset.
pub fn evaluate_ap(detections: &BTreeMap<u64, Vec<Detection>>, dataset: &Dataset) -> Result<EvalReport> {
    let index: BTreeMap<u64, usize> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id, i))
        .collect();
    if let Some(id) = detections.keys().find(|id| !index.contains_key(id)) {
        return Err(Error::Data(format!("detections reference unknown image id {id}")));
    }
    let k = dataset.num_classes();
    let thresholds = iou_thresholds();
    let mut num_detections = 0;
    // [class][range][threshold]
    let ranges = [AreaRange::All, AreaRange::Small, AreaRange::Medium, AreaRange::Large];
    let mut table = vec![vec![vec![None; thresholds.len()]; ranges.len()]; k];
    for (c, row) in table.iter_mut().enumerate() {
        let gts: Vec<Vec<&BoxXyxy>> = dataset
            .samples
            .iter()
            .map(|s| {
                s.gt.boxes
                    .iter()
                    .zip(&s.gt.class_ids)
                    .filter(|(_, &id)| id == c)
                    .map(|(b, _)| b)
                    .collect()
            })
            .collect();
        let mut dets = Vec::new();
        for (id, list) in detections {
            let mut mine: Vec<Det> = list
                .iter()
                .filter(|d| d.class_id == c)
                .map(|d| Det {
                    image: index[id],
                    bbox: &d.bbox,
                    score: d.score,
                })
                .collect();
            mine.sort_by(rank);
            mine.truncate(MAX_DETS);
            num_detections += mine.len();
            dets.extend(mine);
        }
        dets.sort_by(rank);
        for (r, range) in ranges.iter().enumerate() {
            for (t, &thr) in thresholds.iter().enumerate() {
                row[r][t] = class_ap(&dets, &gts, thr, *range);
            }
        }
    }
    let over_thresholds = |c: usize, r: usize| mean(table[c][r].iter().copied());
    let per_class: Vec<Option<f64>> = (0..k).map(|c| over_thresholds(c, 0)).collect();
    Ok(EvalReport {
        ap: mean(per_class.iter().copied()),
        ap50: mean((0..k).map(|c| table[c][0][0])),
        ap_small: mean((0..k).map(|c| over_thresholds(c, 1))),
        ap_medium: mean((0..k).map(|c| over_thresholds(c, 2))),
        ap_large: mean((0..k).map(|c| over_thresholds(c, 3))),
        per_class,
        num_images: dataset.len(),
        num_gt: dataset.samples.iter().map(|s| s.gt.len()).sum(),
        num_detections,
    })
}
