//! Optimization loops: base training with anchor-aided branches,
//! self-distillation with a cosine-decayed weight, decoupled localization
//! distillation, and checkpointing.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    check_same_layout, load_checkpoint, model_layout, save_checkpoint, Checkpoint, Record,
    FORMAT_VERSION, MAGIC,
};
pub use optim::Sgd;

use crate::error::{Error, Result};
use crate::evalcli::{letterbox, Dataset};
use crate::network::{HeadMode, Model, ModelConfig};
use crate::objective::{
    cosine_alpha, det_loss, distill_loss, fg_rows, total_loss, GroundTruth, LossConfig,
};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Off,
    Standard,
    Dld,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    /// Initial learning rate; decays along a half cosine to `lr0 * lrf`.
    pub lr0: f64,
    pub lrf: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs of linear learning-rate warm-up.
    pub warmup_epochs: usize,
    pub seed: u64,
    pub flip_prob: f64,
    /// Adds the anchor-based auxiliary losses when the head has them.
    pub aat_enabled: bool,
    pub distill: DistillMode,
    pub teacher_checkpoint: Option<String>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            input_size: 64,
            lr0: 0.02,
            lrf: 0.01,
            momentum: 0.937,
            weight_decay: 5e-4,
            warmup_epochs: 3,
            seed: 0,
            flip_prob: 0.5,
            aat_enabled: true,
            distill: DistillMode::Off,
            teacher_checkpoint: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "epochs must be positive and batch_size at least 2".into(),
            ));
        }
        if self.input_size == 0 || self.input_size % model.max_stride() != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size,
                model.max_stride()
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob {} is not a probability",
                self.flip_prob
            )));
        }
        if self.distill != DistillMode::Off && self.teacher_checkpoint.is_none() {
            return Err(Error::Config(
                "distillation needs a teacher checkpoint".into(),
            ));
        }
        if self.distill == DistillMode::Dld && !model.head_branches.enhanced_dfl_aux {
            return Err(Error::Config(
                "decoupled localization distillation needs the direct regression branch \
                 (head_branches.enhanced_dfl_aux = true)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Learning rate of a step: linear warm-up, then the epoch's cosine value.
    pub fn learning_rate(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        let r = epoch as f64 / self.epochs as f64;
        let cosine = self.lrf + (1.0 - self.lrf) * (1.0 + (std::f64::consts::PI * r).cos()) / 2.0;
        let lr = self.lr0 * cosine;
        let warm = self.warmup_epochs * steps_per_epoch;
        let it = epoch * steps_per_epoch + step;
        if it < warm {
            lr * (it + 1) as f64 / warm as f64
        } else {
            lr
        }
    }

    /// Distillation weight for an epoch. The horizon is the last epoch index
    /// so the trace starts at exactly 1 and ends at exactly 0.01.
    pub fn alpha(&self, epoch: usize) -> Result<f64> {
        cosine_alpha(epoch, (self.epochs - 1).max(1))
    }
}

/// Letterboxed images and boxes at the training input size.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input_size: usize,
    pub images: Vec<Vec<f32>>,
    pub gts: Vec<GroundTruth>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, input_size: usize) -> Result<Self> {
        dataset.validate()?;
        let mut images = Vec::with_capacity(dataset.len());
        let mut gts = Vec::with_capacity(dataset.len());
        for s in &dataset.samples {
            let (px, tf) = letterbox(&s.image, input_size);
            images.push(px);
            gts.push(GroundTruth::new(
                s.gt.boxes.iter().map(|b| tf.forward(b)).collect(),
                s.gt.class_ids.clone(),
            ));
        }
        Ok(Self {
            input_size,
            images,
            gts,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks `indices`, mirroring the images flagged in `flips`.
    pub fn batch(&self, indices: &[usize], flips: &[bool]) -> Result<(Tensor<f32>, Vec<GroundTruth>)> {
        let s = self.input_size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        let mut gts = Vec::with_capacity(indices.len());
        for (&i, &flip) in indices.iter().zip(flips) {
            let img = &self.images[i];
            if flip {
                for row in img.chunks(s) {
                    data.extend(row.iter().rev());
                }
                let w = s as f64;
                gts.push(GroundTruth::new(
                    self.gts[i].boxes.iter().map(|b| [w - b[2], b[1], w - b[0], b[3]]).collect(),
                    self.gts[i].class_ids.clone(),
                ));
            } else {
                data.extend_from_slice(img);
                gts.push(self.gts[i].clone());
            }
        }
        Ok((Tensor::new(data, &[indices.len(), 3, s, s])?, gts))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Distillation weight (0 without a teacher).
    pub alpha: f64,
    pub loss: f64,
    pub det_loss: f64,
    pub kd_loss: f64,
}

struct Teacher {
    model: Model<f32>,
    config: ModelConfig,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    optimizer: Sgd,
    teacher: Option<Teacher>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: Model<f32>) -> Result<Self> {
        if model.form().fused {
            return Err(Error::State("cannot train a fused model".into()));
        }
        config.validate(&model.config)?;
        Ok(Self {
            optimizer: Sgd::new(config.momentum, config.weight_decay),
            config,
            model,
            teacher: None,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(config, ckpt.to_model()?)?;
        t.optimizer.load_state(&ckpt.optimizer)?;
        t.epoch = ckpt.epoch;
        Ok(t)
    }

    /// Attaches the frozen teacher required by the configured distillation
    /// mode.
    pub fn set_teacher(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let teacher = ckpt.to_model::<f32>()?;
        match self.config.distill {
            DistillMode::Off => {
                return Err(Error::Config("distillation is off; no teacher expected".into()))
            }
            DistillMode::Standard => check_same_layout(&self.model, &teacher)?,
            DistillMode::Dld => {
                let has_dist = model_layout(&teacher)
                    .iter()
                    .any(|(n, _)| n.contains(".af_reg_dist."));
                if !has_dist {
                    return Err(Error::Mismatch(
                        "teacher checkpoint lacks the enhanced (DFL) regression branch".into(),
                    ));
                }
                let (t, s) = (&ckpt.model_config, &self.model.config);
                if t.reg_max != s.reg_max || t.num_classes != s.num_classes || t.strides() != s.strides() {
                    return Err(Error::Mismatch(format!(
                        "teacher head (reg_max {}, {} classes, strides {:?}) does not match the \
                         student (reg_max {}, {} classes, strides {:?})",
                        t.reg_max,
                        t.num_classes,
                        t.strides(),
                        s.reg_max,
                        s.num_classes,
                        s.strides()
                    )));
                }
            }
        }
        self.teacher = Some(Teacher {
            model: teacher,
            config: ckpt.model_config.clone(),
        });
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model, self.epoch);
        c.train_config = Some(self.config.clone());
        c.optimizer = self.optimizer.state();
        c
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Batches of one epoch: a seeded shuffle, split into `batch_size`
    /// chunks; a trailing chunk of one image is dropped (batch statistics
    /// need two).
    fn epoch_plan(&self, epoch: usize, n: usize) -> Vec<(Vec<usize>, Vec<bool>)> {
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = (0..n).map(|_| rng.gen_bool(self.config.flip_prob)).collect();
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(|c| (c.to_vec(), c.iter().map(|&i| flips[i]).collect()))
            .collect()
    }

    /// Loss of one batch; the returned tensors are `(total, det, kd)`.
    pub fn batch_loss(
        &self,
        x: &Tensor<f32>,
        gts: &[GroundTruth],
        epoch: usize,
        alpha: f64,
    ) -> Result<(Tensor<f32>, f64, f64)> {
        let cfg = &self.config;
        let out = self.model.forward(x, true, HeadMode::Train)?;
        let det = det_loss(&out, gts, &self.model.config, &cfg.loss, epoch, cfg.aat_enabled)?;
        let Some(teacher) = &self.teacher else {
            let v = det.total.item() as f64;
            return Ok((det.total, v, 0.0));
        };
        let t_out = no_grad(|| teacher.model.forward(x, false, HeadMode::Train))?;
        let rows = if cfg.loss.kd_reg_teacher_fg {
            fg_rows(&t_out, gts, &teacher.config, &cfg.loss, epoch)?
        } else {
            (0..x.shape()[0] * det_rows(&out)).collect()
        };
        let include_cls = cfg.distill == DistillMode::Standard || cfg.loss.kd_cls_under_dld;
        let kd = distill_loss(
            &out,
            &t_out,
            &rows,
            self.model.config.num_classes,
            cfg.loss.kd_temperature,
            include_cls,
        )?;
        let (d, k) = (det.total.item() as f64, kd.item() as f64);
        Ok((total_loss(&det.total, Some(&kd), alpha)?, d, k))
    }

    pub fn run_epoch(&mut self, data: &Prepared) -> Result<EpochLog> {
        if data.input_size != self.config.input_size {
            return Err(Error::Config(format!(
                "data prepared at {} px, config expects {}",
                data.input_size, self.config.input_size
            )));
        }
        let epoch = self.epoch;
        let plan = self.epoch_plan(epoch, data.len());
        if plan.is_empty() {
            return Err(Error::Data("need at least two training images".into()));
        }
        let alpha = if self.teacher.is_some() {
            self.config.alpha(epoch)?
        } else {
            0.0
        };
        let (mut sum, mut sum_det, mut sum_kd) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for (step, (idx, flips)) in plan.iter().enumerate() {
            let (x, gts) = data.batch(idx, flips)?;
            let (loss, d, k) = self.batch_loss(&x, &gts, epoch, alpha)?;
            let v = loss.item() as f64;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {v} at epoch {epoch}, step {step}"
                )));
            }
            loss.backward()?;
            lr = self.config.learning_rate(epoch, step, plan.len());
            self.optimizer.step(&self.model, lr)?;
            sum += v;
            sum_det += d;
            sum_kd += k;
        }
        let n = plan.len() as f64;
        let log = EpochLog {
            epoch,
            lr,
            alpha,
            loss: sum / n,
            det_loss: sum_det / n,
            kd_loss: sum_kd / n,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (det {:.4}, kd {:.4}, alpha {:.4}) lr {:.5}",
            log.loss,
            log.det_loss,
            log.kd_loss,
            log.alpha,
            log.lr
        );
        self.epoch += 1;
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains up to `config.epochs` completed epochs.
    pub fn fit(&mut self, data: &Prepared) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }
}

fn det_rows(out: &crate::network::HeadOutputs<f32>) -> usize {
    out.grid_sizes().iter().map(|(h, w)| h * w).sum()
}

/// Base training (no teacher). Anchor-aided losses follow
/// `config.aat_enabled`.
pub fn train(config: &TrainConfig, model: Model<f32>, dataset: &Dataset) -> Result<Checkpoint> {
    let mut cfg = config.clone();
    cfg.distill = DistillMode::Off;
    let mut t = Trainer::new(cfg, model)?;
    t.fit(&Prepared::new(dataset, t.config.input_size)?)?;
    Ok(t.checkpoint())
}

fn distill_run(
    config: &TrainConfig,
    mode: DistillMode,
    student: Model<f32>,
    teacher: &Checkpoint,
    dataset: &Dataset,
) -> Result<Trainer> {
    let mut cfg = config.clone();
    cfg.distill = mode;
    if cfg.teacher_checkpoint.is_none() {
        cfg.teacher_checkpoint = Some("<in memory>".into());
    }
    let mut t = Trainer::new(cfg, student)?;
    t.set_teacher(teacher)?;
    t.fit(&Prepared::new(dataset, t.config.input_size)?)?;
    Ok(t)
}

/// Self-distillation from an architecturally identical teacher.
pub fn self_distill(
    config: &TrainConfig,
    student: Model<f32>,
    teacher: &Checkpoint,
    dataset: &Dataset,
) -> Result<Checkpoint> {
    Ok(distill_run(config, DistillMode::Standard, student, teacher, dataset)?.checkpoint())
}

/// Decoupled localization distillation. The DFL branch of the student
/// learns from hard labels and the teacher, the direct branch from hard
/// labels only; the DFL branch is stripped afterwards.
pub fn dld_train(
    config: &TrainConfig,
    student: Model<f32>,
    teacher: &Checkpoint,
    dataset: &Dataset,
) -> Result<Checkpoint> {
    let mut t = distill_run(config, DistillMode::Dld, student, teacher, dataset)?;
    t.model.strip_auxiliary();
    Ok(t.checkpoint())
}

#[cfg(test)]
mod tests;
