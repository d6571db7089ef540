//! Label assignment and losses, and their composition into the detection
//! and distillation objectives.

mod assign;
pub mod loss;

use serde::{Deserialize, Serialize};

pub use assign::{
    atss_assign, box_area, box_iou, point_in_box, tal_assign, Anchors, AssignmentResult, BoxXyxy,
    GroundTruth,
};
pub use loss::{
    cosine_alpha, decode_anchor, decode_dfl, decode_naive, dfl_bracket, dfl_expectation, dfl_loss,
    gather_rows, giou, giou_loss, kd_cls_loss, kd_loss, kd_reg_loss, total_loss, vfl_loss,
};

use crate::error::{Error, Result};
use crate::network::{HeadOutputs, ModelConfig};
use crate::tensor::{self, flatten_levels, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub w_cls: f64,
    pub w_iou: f64,
    pub w_dfl: f64,
    /// Weight of the anchor-based auxiliary branch losses.
    pub aux_weight: f64,
    /// Epochs that use ATSS before switching to the task-aligned assigner.
    pub warmup_epochs: usize,
    pub atss_topk: usize,
    pub tal_topk: usize,
    pub tal_alpha: f64,
    pub tal_beta: f64,
    pub kd_temperature: f64,
    /// Regression KD only on anchors that are foreground for the teacher;
    /// otherwise on every anchor.
    pub kd_reg_teacher_fg: bool,
    /// Whether classification KD is applied under decoupled localization
    /// distillation.
    pub kd_cls_under_dld: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_iou: 2.5,
            w_dfl: 0.5,
            aux_weight: 1.0,
            warmup_epochs: 4,
            atss_topk: 9,
            tal_topk: 13,
            tal_alpha: 1.0,
            tal_beta: 6.0,
            kd_temperature: 1.0,
            kd_reg_teacher_fg: true,
            kd_cls_under_dld: true,
        }
    }
}

/// Losses of one prediction branch against its own assignment.
#[derive(Clone)]
pub struct BranchLoss<T: Scalar> {
    pub cls: Tensor<T>,
    pub iou: Tensor<T>,
    pub dfl: Option<Tensor<T>>,
    /// Hard-label IoU loss of the direct regression branch.
    pub naive_iou: Option<Tensor<T>>,
    pub num_fg: usize,
    /// `w_cls * cls + w_iou * (iou + naive_iou) + w_dfl * dfl`.
    pub weighted: Tensor<T>,
}

#[derive(Clone)]
pub struct DetLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub anchor_free: BranchLoss<T>,
    pub anchor_based: Option<BranchLoss<T>>,
    /// Flat row indices (`image * A + anchor`) of anchor-free positives.
    pub fg_rows: Vec<usize>,
}

/// Flattened per-branch predictions of a batch.
pub struct FlatOutputs<T: Scalar> {
    pub anchors: Anchors,
    pub af_cls: Tensor<T>,
    pub af_reg_dist: Option<Tensor<T>>,
    pub af_reg_naive: Option<Tensor<T>>,
    pub ab_cls: Option<Tensor<T>>,
    pub ab_reg: Option<Tensor<T>>,
}

fn flat<T: Scalar>(levels: Option<Vec<&Tensor<T>>>) -> Result<Option<Tensor<T>>> {
    levels.map(|l| flatten_levels(&l)).transpose()
}

impl<T: Scalar> FlatOutputs<T> {
    pub fn new(out: &HeadOutputs<T>, anchor_scale: f64) -> Result<Self> {
        let anchors = Anchors::new(&out.grid_sizes(), &out.strides(), anchor_scale);
        let collect = |f: &dyn Fn(&crate::network::LevelOutputs<T>) -> Option<&Tensor<T>>| {
            out.levels.iter().map(f).collect::<Option<Vec<_>>>()
        };
        Ok(Self {
            af_cls: flatten_levels(&out.levels.iter().map(|l| &l.af_cls).collect::<Vec<_>>())?,
            af_reg_dist: flat(collect(&|l| l.af_reg_dist.as_ref()))?,
            af_reg_naive: flat(collect(&|l| l.af_reg_naive.as_ref()))?,
            ab_cls: flat(collect(&|l| l.ab_cls.as_ref()))?,
            ab_reg: flat(collect(&|l| l.ab_reg.as_ref()))?,
            anchors,
        })
    }

    pub fn batch(&self) -> usize {
        self.af_cls.shape()[0]
    }
}

fn sigmoid_scores<T: Scalar>(cls: &Tensor<T>, image: usize) -> Vec<f64> {
    let (a, k) = (cls.shape()[1], cls.shape()[2]);
    cls.data()[image * a * k..(image + 1) * a * k]
        .iter()
        .map(|z| loss::reference::sigmoid(z.as_f64()))
        .collect()
}

fn boxes_of<T: Scalar>(boxes: &Tensor<T>, image: usize) -> Vec<BoxXyxy> {
    let a = boxes.shape()[1];
    boxes.data()[image * a * 4..(image + 1) * a * 4]
        .chunks(4)
        .map(|b| [0, 1, 2, 3].map(|k| b[k].as_f64()))
        .collect()
}

/// Assigns one image: ATSS during warm-up, task-aligned afterwards.
#[allow(clippy::too_many_arguments)]
pub fn assign_image(
    anchors: &Anchors,
    scores: &[f64],
    num_classes: usize,
    pred_boxes: &[BoxXyxy],
    gts: &GroundTruth,
    epoch: usize,
    cfg: &LossConfig,
) -> AssignmentResult {
    if epoch < cfg.warmup_epochs {
        atss_assign(anchors, gts, cfg.atss_topk, Some(pred_boxes))
    } else {
        tal_assign(
            scores,
            num_classes,
            pred_boxes,
            &anchors.points,
            gts,
            cfg.tal_alpha,
            cfg.tal_beta,
            cfg.tal_topk,
        )
    }
}

/// Assigns every image of a batch against the given class logits and boxes.
pub fn assign_batch<T: Scalar>(
    anchors: &Anchors,
    cls: &Tensor<T>,
    boxes: &Tensor<T>,
    gts: &[GroundTruth],
    epoch: usize,
    cfg: &LossConfig,
) -> Vec<AssignmentResult> {
    let k = cls.shape()[2];
    gts.iter()
        .enumerate()
        .map(|(i, g)| {
            assign_image(anchors, &sigmoid_scores(cls, i), k, &boxes_of(boxes, i), g, epoch, cfg)
        })
        .collect()
}

struct Targets {
    scores: Vec<f64>,
    rows: Vec<usize>,
    boxes: Vec<BoxXyxy>,
    weights: Vec<f64>,
    norm: f64,
}

fn build_targets(assign: &[AssignmentResult], anchors: usize, k: usize) -> Targets {
    let mut t = Targets {
        scores: vec![0.0; assign.len() * anchors * k],
        rows: Vec::new(),
        boxes: Vec::new(),
        weights: Vec::new(),
        norm: 0.0,
    };
    for (i, r) in assign.iter().enumerate() {
        for a in 0..anchors {
            if r.fg_mask[a] {
                let row = i * anchors + a;
                t.scores[row * k + r.target_classes[a]] = r.target_scores[a];
                t.rows.push(row);
                t.boxes.push(r.target_boxes[a]);
                t.weights.push(r.target_scores[a]);
                t.norm += r.target_scores[a];
            }
        }
    }
    t.norm = t.norm.max(1.0);
    t
}

fn weighted_sum<T: Scalar>(terms: &[(&Tensor<T>, f64)]) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for (t, w) in terms {
        let term = tensor::scale(t, T::lit(*w));
        acc = Some(match acc {
            None => term,
            Some(a) => tensor::add(&a, &term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("no loss terms".into()))
}

/// Detection loss of a training batch: the anchor-free branch (plus the
/// direct regression branch when present) and, when `use_aux` is set and
/// the outputs carry them, the anchor-based auxiliary branch against its own
/// assignment. Everything is summed so that a single backward pass reaches
/// all branches.
pub fn det_loss<T: Scalar>(
    out: &HeadOutputs<T>,
    gts: &[GroundTruth],
    model_cfg: &ModelConfig,
    cfg: &LossConfig,
    epoch: usize,
    use_aux: bool,
) -> Result<DetLoss<T>> {
    let f = FlatOutputs::new(out, model_cfg.anchor_scale)?;
    if gts.len() != f.batch() {
        return Err(Error::Mismatch(format!(
            "{} ground-truth sets for a batch of {}",
            gts.len(),
            f.batch()
        )));
    }
    for g in gts {
        g.validate(model_cfg.num_classes)?;
    }
    let (a, k) = (f.anchors.len(), model_cfg.num_classes);
    let bins = model_cfg.dfl_bins();

    let dist_boxes = f
        .af_reg_dist
        .as_ref()
        .map(|r| decode_dfl(r, &f.anchors, bins))
        .transpose()?;
    let naive_boxes = f
        .af_reg_naive
        .as_ref()
        .map(|r| decode_naive(r, &f.anchors))
        .transpose()?;
    // The retained regression branch drives the assignment.
    let assign_boxes = naive_boxes
        .as_ref()
        .or(dist_boxes.as_ref())
        .ok_or_else(|| Error::State("model has no anchor-free regression branch".into()))?;
    let af_assign = assign_batch(&f.anchors, &f.af_cls, assign_boxes, gts, epoch, cfg);
    let t = build_targets(&af_assign, a, k);

    let cls = vfl_loss(&f.af_cls, &t.scores, t.norm)?;
    let mut iou_terms = Vec::new();
    let mut dfl = None;
    if let (Some(boxes), Some(reg)) = (&dist_boxes, &f.af_reg_dist) {
        iou_terms.push(giou_loss(&gather_rows(boxes, &t.rows)?, &t.boxes, &t.weights, t.norm)?);
        let dist_targets: Vec<[f64; 4]> = t
            .rows
            .iter()
            .zip(&t.boxes)
            .map(|(&row, b)| {
                let ai = row % a;
                let (p, s) = (f.anchors.points[ai], f.anchors.strides[ai]);
                [(p[0] - b[0]) / s, (p[1] - b[1]) / s, (b[2] - p[0]) / s, (b[3] - p[1]) / s]
            })
            .collect();
        dfl = Some(dfl_loss(&gather_rows(reg, &t.rows)?, &dist_targets, &t.weights, t.norm)?);
    }
    let naive_iou = match &naive_boxes {
        Some(b) => Some(giou_loss(&gather_rows(b, &t.rows)?, &t.boxes, &t.weights, t.norm)?),
        None => None,
    };
    let iou = match (iou_terms.pop(), &naive_iou) {
        (Some(i), _) => i,
        (None, Some(n)) => n.clone(),
        (None, None) => unreachable!("checked above"),
    };
    let mut terms = vec![(&cls, cfg.w_cls), (&iou, cfg.w_iou)];
    if dist_boxes.is_some() {
        if let Some(n) = &naive_iou {
            terms.push((n, cfg.w_iou));
        }
    }
    if let Some(d) = &dfl {
        terms.push((d, cfg.w_dfl));
    }
    let weighted = weighted_sum(&terms)?;
    let anchor_free = BranchLoss {
        cls: cls.clone(),
        iou: iou.clone(),
        dfl: dfl.clone(),
        naive_iou: naive_iou.clone(),
        num_fg: t.rows.len(),
        weighted,
    };

    let anchor_based = match (&f.ab_cls, &f.ab_reg) {
        (Some(cls), Some(reg)) if use_aux => {
            let boxes = decode_anchor(reg, &f.anchors)?;
            let assign = assign_batch(&f.anchors, cls, &boxes, gts, epoch, cfg);
            let t = build_targets(&assign, a, k);
            let c = vfl_loss(cls, &t.scores, t.norm)?;
            let i = giou_loss(&gather_rows(&boxes, &t.rows)?, &t.boxes, &t.weights, t.norm)?;
            let weighted = weighted_sum(&[(&c, cfg.w_cls), (&i, cfg.w_iou)])?;
            Some(BranchLoss {
                cls: c,
                iou: i,
                dfl: None,
                naive_iou: None,
                num_fg: t.rows.len(),
                weighted,
            })
        }
        _ => None,
    };
    let total = match &anchor_based {
        Some(ab) => tensor::add(
            &anchor_free.weighted,
            &tensor::scale(&ab.weighted, T::lit(cfg.aux_weight)),
        )?,
        None => anchor_free.weighted.clone(),
    };
    Ok(DetLoss {
        total,
        anchor_free,
        anchor_based,
        fg_rows: t.rows,
    })
}

/// Flat row indices of anchor-free positives, assigned the same way as in
/// [`det_loss`] but without building any loss.
pub fn fg_rows<T: Scalar>(
    out: &HeadOutputs<T>,
    gts: &[GroundTruth],
    model_cfg: &ModelConfig,
    cfg: &LossConfig,
    epoch: usize,
) -> Result<Vec<usize>> {
    let f = FlatOutputs::new(out, model_cfg.anchor_scale)?;
    let boxes = match (&f.af_reg_naive, &f.af_reg_dist) {
        (Some(r), _) => decode_naive(r, &f.anchors)?,
        (None, Some(r)) => decode_dfl(r, &f.anchors, model_cfg.dfl_bins())?,
        (None, None) => {
            return Err(Error::State("model has no anchor-free regression branch".into()))
        }
    };
    let assign = assign_batch(&f.anchors, &f.af_cls, &boxes, gts, epoch, cfg);
    Ok(build_targets(&assign, f.anchors.len(), model_cfg.num_classes).rows)
}

/// Distillation term between student outputs and (detached) teacher
/// outputs. Classification KD covers every anchor; regression KD runs on
/// the DFL branch over `reg_rows` (flat `image * A + anchor` indices).
pub fn distill_loss<T: Scalar>(
    student: &HeadOutputs<T>,
    teacher: &HeadOutputs<T>,
    reg_rows: &[usize],
    num_classes: usize,
    temperature: f64,
    include_cls: bool,
) -> Result<Tensor<T>> {
    let s = FlatOutputs::new(student, 1.0)?;
    let t = FlatOutputs::new(teacher, 1.0)?;
    if s.af_cls.shape() != t.af_cls.shape() {
        return Err(Error::Mismatch(format!(
            "student predictions {:?} vs teacher {:?}",
            s.af_cls.shape(),
            t.af_cls.shape()
        )));
    }
    let (Some(s_reg), Some(t_reg)) = (&s.af_reg_dist, &t.af_reg_dist) else {
        return Err(Error::State(
            "distillation needs the DFL regression branch on both teacher and student".into(),
        ));
    };
    let s_rows = gather_rows(s_reg, reg_rows)?;
    let t_rows = gather_rows(&t_reg.detach(), reg_rows)?;
    let reg = kd_reg_loss(&s_rows, t_rows.data(), temperature)?;
    if include_cls {
        let cls = kd_cls_loss(&s.af_cls, t.af_cls.data(), num_classes, temperature)?;
        tensor::add(&cls, &reg)
    } else {
        Ok(reg)
    }
}
