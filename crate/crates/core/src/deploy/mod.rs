//! Deployment path: whole-model fusion, decoding, NMS, inference and
//! wall-clock benchmarking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalcli::{letterbox, Dataset, Image, LetterboxTransform};
use crate::network::{HeadMode, HeadOutputs, Model};
use crate::objective::{box_iou, decode_dfl, decode_naive, Anchors, BoxXyxy};
use crate::tensor::{no_grad, Scalar, Tensor};
use crate::trainer::Checkpoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `(x1, y1, x2, y2)` in original-image pixels.
    pub bbox: BoxXyxy,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsConfig {
    pub conf_thresh: f64,
    pub iou_thresh: f64,
    pub class_aware: bool,
    pub max_det: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            iou_thresh: 0.65,
            class_aware: true,
            max_det: 300,
        }
    }
}

impl NmsConfig {
    /// Low confidence cut used when scoring AP.
    pub fn for_eval() -> Self {
        Self {
            conf_thresh: 0.001,
            ..Self::default()
        }
    }
}

/// Train-form checkpoint to deploy form: Rep units collapsed, BN folded,
/// auxiliary branches removed.
pub fn fuse_model(ckpt: &Checkpoint) -> Result<Checkpoint> {
    if ckpt.form.fused {
        return Err(Error::State("checkpoint is already in deploy form".into()));
    }
    let mut model = ckpt.to_model::<f32>()?;
    model.fuse()?;
    model.strip_auxiliary();
    let mut out = Checkpoint::from_model(&model, ckpt.epoch);
    out.train_config = ckpt.train_config.clone();
    Ok(out)
}

/// Boxes and class probabilities of one image, in network-input pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub boxes: Vec<BoxXyxy>,
    /// `[A, num_classes]` row-major.
    pub scores: Vec<f64>,
    pub num_classes: usize,
}

/// Decodes every image of a batch. The direct regression branch wins when
/// present (the retained branch after decoupled localization distillation);
/// otherwise boxes come from the DFL expectation.
pub fn decode<T: Scalar>(out: &HeadOutputs<T>, reg_max: usize) -> Result<Vec<Decoded>> {
    let anchors = Anchors::new(&out.grid_sizes(), &out.strides(), 1.0);
    let collect = |f: &dyn Fn(&crate::network::LevelOutputs<T>) -> Option<&Tensor<T>>| {
        out.levels.iter().map(f).collect::<Option<Vec<_>>>()
    };
    let cls = crate::tensor::flatten_levels(&out.levels.iter().map(|l| &l.af_cls).collect::<Vec<_>>())?;
    let boxes = no_grad(|| -> Result<Tensor<T>> {
        if let Some(naive) = collect(&|l| l.af_reg_naive.as_ref()) {
            let reg = crate::tensor::flatten_levels(&naive)?;
            // Distances are non-negative by construction of a box.
            let clamped: Vec<T> = reg.data().iter().map(|v| v.max(T::zero())).collect();
            decode_naive(&Tensor::new(clamped, reg.shape())?, &anchors)
        } else if let Some(dist) = collect(&|l| l.af_reg_dist.as_ref()) {
            let reg = crate::tensor::flatten_levels(&dist)?;
            let bins = reg_max + 1;
            if reg.shape()[2] != 4 * bins {
                return Err(Error::Shape {
                    op: "decode",
                    detail: format!(
                        "regression branch has {} channels, expected 4 * {bins}",
                        reg.shape()[2]
                    ),
                });
            }
            decode_dfl(&reg, &anchors, bins)
        } else {
            Err(Error::Shape {
                op: "decode",
                detail: "outputs carry no anchor-free regression branch".into(),
            })
        }
    })?;
    let (n, a, k) = (cls.shape()[0], cls.shape()[1], cls.shape()[2]);
    let (c, b) = (cls.data(), boxes.data());
    Ok((0..n)
        .map(|i| Decoded {
            boxes: (0..a)
                .map(|j| {
                    let o = (i * a + j) * 4;
                    [0, 1, 2, 3].map(|q| b[o + q].as_f64())
                })
                .collect(),
            scores: c[i * a * k..(i + 1) * a * k]
                .iter()
                .map(|z| crate::objective::loss::reference::sigmoid(z.as_f64()))
                .collect(),
            num_classes: k,
        })
        .collect())
}

fn by_score(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Greedy non-maximum suppression. Each box contributes its best class;
/// candidates below `conf_thresh` or with empty extent are dropped, then
/// boxes are visited in descending score (lower index first on ties) and
/// suppress later boxes (of the same class when `class_aware`) whose IoU
/// exceeds `iou_thresh`.
pub fn nms(boxes: &[BoxXyxy], scores: &[f64], num_classes: usize, cfg: &NmsConfig) -> Vec<Detection> {
    let mut best = Vec::with_capacity(boxes.len());
    let mut cand = Vec::new();
    for (i, b) in boxes.iter().enumerate() {
        let row = &scores[i * num_classes..(i + 1) * num_classes];
        let (c, s) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &s)| if s > acc.1 { (c, s) } else { acc });
        best.push((c, s));
        if s >= cfg.conf_thresh && b[2] > b[0] && b[3] > b[1] {
            cand.push(i);
        }
    }
    let flat: Vec<f64> = best.iter().map(|&(_, s)| s).collect();
    cand.sort_by(by_score(&flat));
    // Bucket by class so a box is only compared within its group.
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &cand {
        let key = if cfg.class_aware { best[i].0 } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    let mut kept = Vec::new();
    for members in groups.values() {
        let mut alive = vec![true; members.len()];
        for p in 0..members.len() {
            if !alive[p] {
                continue;
            }
            kept.push(members[p]);
            let bp = &boxes[members[p]];
            for q in p + 1..members.len() {
                if alive[q] && box_iou(bp, &boxes[members[q]]) > cfg.iou_thresh {
                    alive[q] = false;
                }
            }
        }
    }
    kept.sort_by(by_score(&flat));
    kept.truncate(cfg.max_det);
    kept.into_iter()
        .map(|i| Detection {
            bbox: boxes[i],
            class_id: best[i].0,
            score: best[i].1,
        })
        .collect()
}

/// Letterboxes images of any size to `input_size` and stacks them.
pub fn preprocess(images: &[&Image], input_size: usize) -> Result<(Tensor<f32>, Vec<LetterboxTransform>)> {
    let mut data = Vec::with_capacity(images.len() * 3 * input_size * input_size);
    let mut tfs = Vec::with_capacity(images.len());
    for img in images {
        let (px, tf) = letterbox(img, input_size);
        data.extend(px);
        tfs.push(tf);
    }
    Ok((Tensor::new(data, &[images.len(), 3, input_size, input_size])?, tfs))
}

/// Letterbox, eval-mode forward, decode, NMS, and mapping back to source
/// pixels (clipped to the image).
pub fn infer_batch(
    model: &Model<f32>,
    images: &[&Image],
    input_size: usize,
    cfg: &NmsConfig,
) -> Result<Vec<Vec<Detection>>> {
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let (x, tfs) = preprocess(images, input_size)?;
    let out = no_grad(|| model.forward(&x, false, HeadMode::Deploy))?;
    let decoded = decode(&out, model.config.reg_max)?;
    Ok(decoded
        .iter()
        .zip(&tfs)
        .map(|(d, tf)| {
            nms(&d.boxes, &d.scores, d.num_classes, cfg)
                .into_iter()
                .filter_map(|det| {
                    let b = tf.inverse_clipped(&det.bbox);
                    (b[2] > b[0] && b[3] > b[1]).then_some(Detection { bbox: b, ..det })
                })
                .collect()
        })
        .collect())
}

pub fn infer(model: &Model<f32>, image: &Image, input_size: usize, cfg: &NmsConfig) -> Result<Vec<Detection>> {
    Ok(infer_batch(model, &[image], input_size, cfg)?.remove(0))
}

/// Runs the model over a dataset in chunks, keyed by image id.
pub fn predict_dataset(
    model: &Model<f32>,
    dataset: &Dataset,
    input_size: usize,
    batch: usize,
    cfg: &NmsConfig,
) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let mut out = BTreeMap::new();
    for chunk in dataset.samples.chunks(batch.max(1)) {
        let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        for (s, d) in chunk.iter().zip(infer_batch(model, &imgs, input_size, cfg)?) {
            out.insert(s.id, d);
        }
    }
    Ok(out)
}

/// One COCO results record: `bbox` is `[x, y, w, h]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

pub fn to_coco_results(dets: &BTreeMap<u64, Vec<Detection>>) -> Vec<CocoResult> {
    dets.iter()
        .flat_map(|(&image_id, list)| {
            list.iter().map(move |d| CocoResult {
                image_id,
                category_id: d.class_id,
                bbox: [d.bbox[0], d.bbox[1], d.bbox[2] - d.bbox[0], d.bbox[3] - d.bbox[1]],
                score: d.score,
            })
        })
        .collect()
}

/// Structured-text line for one detection.
pub fn format_detection(d: &Detection) -> String {
    format!(
        "class={} score={:.4} box={:.2},{:.2},{:.2},{:.2}",
        d.class_id, d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub input_size: usize,
    /// Per-iteration wall-clock latency in milliseconds.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Images per second.
    pub throughput: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Times eval-mode forwards of a random batch. `mode` picks the head
/// branches, so a train-form model can be timed with everything it carries
/// (`HeadMode::Train`) against its deploy form.
pub fn benchmark(
    model: &Model<f32>,
    mode: HeadMode,
    input_size: usize,
    batch_size: usize,
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if iterations == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("iterations and batch size must be positive".into()));
    }
    let len = batch_size * 3 * input_size * input_size;
    let x = Tensor::new(
        crate::blocks::Init::new(0).uniform(len, 0.0, 1.0),
        &[batch_size, 3, input_size, input_size],
    )?;
    let run = || no_grad(|| model.forward(&x, false, mode)).map(|_| ());
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(BenchReport {
        batch_size,
        input_size,
        mean_ms: mean,
        p50_ms: percentile(&sorted, 0.5),
        p99_ms: percentile(&sorted, 0.99),
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
        throughput: batch_size as f64 * 1e3 / mean,
        samples_ms: samples,
    })
}
