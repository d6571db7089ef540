use std::path::{Path, PathBuf};

use rbdet::deploy::{
    benchmark, format_detection, fuse_model, infer as detect, predict_dataset, preprocess,
    to_coco_results, NmsConfig,
};
use rbdet::evalcli::{
    evaluate_ap, gen_synthetic, load_coco_json, load_ppm, Dataset, EvalReport, RunConfig,
    SynthConfig,
};
use rbdet::network::{HeadMode, Model, ModelConfig};
use rbdet::tensor::{io, no_grad};
use rbdet::trainer::{Checkpoint, DistillMode, Prepared, Trainer};
use rbdet::{Error, Result};

use crate::{
    AblateArgs, BenchArgs, ConfigArgs, DataArgs, DistillArg, DistillArgs, DistillKind, EvalArgs,
    FuseArgs, GenDataArgs, InferArgs, SppArg, Switch, TrainArgs,
};

// ------------------------------------------------------------ config

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets a dotted key in the serialized config. The value is read as a TOML
/// literal and falls back to a plain string.
fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not KEY=VALUE")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in path {
        table = table
            .get_mut(*p)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| config_err(format!("unknown config key {key:?}")))?;
    }
    // Optional keys are absent from the serialized defaults.
    let optional = key.trim() == "train.teacher_checkpoint";
    if !table.contains_key(*last) && !optional {
        return Err(config_err(format!("unknown config key {key:?}")));
    }
    table.insert(last.to_string(), value);
    Ok(())
}

pub fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut table: toml::Table = toml::from_str(&base.to_toml()?).map_err(config_err)?;
    let mut sets = Vec::new();
    if let Ok(seed) = std::env::var("RBDET_SEED") {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| config_err(format!("RBDET_SEED={seed:?} is not an unsigned integer")))?;
        sets.push(format!("train.seed={seed}"));
    }
    sets.extend(args.overrides.iter().cloned());
    let flags = [
        ("train.epochs", args.epochs.map(|v| v.to_string())),
        ("train.batch_size", args.batch_size.map(|v| v.to_string())),
        ("train.lr0", args.lr0.map(|v| format!("{v:?}"))),
        ("train.seed", args.seed.map(|v| v.to_string())),
        ("train.input_size", args.input_size.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            sets.push(format!("{key}={v}"));
        }
    }
    for s in &sets {
        apply_override(&mut table, s)?;
    }
    RunConfig::from_toml(&toml::to_string(&table).map_err(config_err)?)
}

// ------------------------------------------------------------ data

fn load_dir(dir: &Path) -> Result<Dataset> {
    load_coco_json(&dir.join("annotations.json"), &dir.join("images"))
}

fn synthetic_val(cfg: &SynthConfig) -> Result<Dataset> {
    gen_synthetic(&SynthConfig {
        seed: cfg.seed.wrapping_add(1),
        num_images: (cfg.num_images / 4).max(1),
        ..cfg.clone()
    })
}

/// Training data and, when one is available, a validation set. Synthetic
/// training data comes with a synthetic validation set drawn with the next
/// seed.
fn datasets(cfg: &RunConfig, args: &DataArgs) -> Result<(Dataset, Option<Dataset>)> {
    let train = match &args.data {
        Some(d) => load_dir(d)?,
        None => gen_synthetic(&cfg.data)?,
    };
    let val = match (&args.val, &args.data) {
        (Some(v), _) => Some(load_dir(v)?),
        (None, None) => Some(synthetic_val(&cfg.data)?),
        (None, Some(_)) => None,
    };
    Ok((train, val))
}

fn match_classes(model: &mut ModelConfig, ds: &Dataset) {
    if ds.num_classes() != model.num_classes {
        log::info!(
            "dataset has {} classes; setting model.num_classes from {}",
            ds.num_classes(),
            model.num_classes
        );
        model.num_classes = ds.num_classes();
    }
}

// ------------------------------------------------------------ training

fn input_size(ckpt: &Checkpoint, cfg: &RunConfig) -> usize {
    ckpt.train_config
        .as_ref()
        .map_or(cfg.train.input_size, |t| t.input_size)
}

fn deploy_model(ckpt: &Checkpoint) -> Result<Model<f32>> {
    if ckpt.form.fused {
        ckpt.to_model()
    } else {
        fuse_model(ckpt)?.to_model()
    }
}

fn eval_nms(cfg: &RunConfig) -> NmsConfig {
    NmsConfig {
        conf_thresh: NmsConfig::for_eval().conf_thresh,
        ..cfg.nms.clone()
    }
}

fn evaluate(ckpt: &Checkpoint, ds: &Dataset, size: usize, nms: &NmsConfig) -> Result<EvalReport> {
    let model = deploy_model(ckpt)?;
    let dets = predict_dataset(&model, ds, size, 32, nms)?;
    evaluate_ap(&dets, ds)
}

fn rank(r: &EvalReport) -> f64 {
    r.ap.unwrap_or(0.0)
}

/// Runs the remaining epochs. With a validation set the model is scored
/// every `interval` epochs and after the last one; the best-AP checkpoint
/// is returned.
fn fit(
    trainer: &mut Trainer,
    train: &Dataset,
    val: Option<(&Dataset, usize, &NmsConfig)>,
) -> Result<Option<(Checkpoint, EvalReport)>> {
    let prep = Prepared::new(train, trainer.config.input_size)?;
    let mut best: Option<(Checkpoint, EvalReport)> = None;
    while trainer.epoch < trainer.config.epochs {
        trainer.run_epoch(&prep)?;
        let Some((ds, interval, nms)) = val else { continue };
        let last = trainer.epoch == trainer.config.epochs;
        if trainer.epoch % interval.max(1) != 0 && !last {
            continue;
        }
        let ckpt = trainer.checkpoint();
        let r = evaluate(&ckpt, ds, trainer.config.input_size, nms)?;
        log::info!(
            "epoch {}: val AP {:.4} AP50 {:.4}",
            trainer.epoch,
            r.ap.unwrap_or(0.0),
            r.ap50_or_zero()
        );
        if best.as_ref().map_or(true, |(_, b)| rank(&r) > rank(b)) {
            best = Some((ckpt, r));
        }
    }
    Ok(best)
}

fn final_loss(t: &Trainer) -> f64 {
    t.history.last().map_or(f64::NAN, |h| h.loss)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = resolve(&a.config)?;
    if cfg.train.distill != DistillMode::Off {
        return Err(config_err("train.distill is set; use `rbdet distill` for distillation"));
    }
    let (train, val) = datasets(&cfg, &a.data)?;
    if a.best.is_some() && val.is_none() {
        return Err(config_err("--best needs a validation set (--val)"));
    }
    match_classes(&mut cfg.model, &train);
    let mut t = Trainer::new(cfg.train.clone(), Model::new(&cfg.model, cfg.train.seed)?)?;
    let nms = eval_nms(&cfg);
    let val = a.best.as_ref().and(val.as_ref()).map(|v| (v, a.eval_interval, &nms));
    let best = fit(&mut t, &train, val)?;
    t.checkpoint().save(&a.out)?;
    println!(
        "trained {} epochs on {} images, final loss {:.4}; wrote {}",
        t.epoch,
        train.len(),
        final_loss(&t),
        a.out.display()
    );
    if let (Some(path), Some((ckpt, r))) = (&a.best, best) {
        ckpt.save(path)?;
        println!(
            "best validation AP {:.4} at epoch {}; wrote {}",
            rank(&r),
            ckpt.epoch,
            path.display()
        );
    }
    Ok(())
}

fn distill_run(
    cfg: &RunConfig,
    mode: DistillMode,
    teacher: &Checkpoint,
    train: &Dataset,
) -> Result<Trainer> {
    if teacher.form.fused || teacher.form.stripped {
        return Err(Error::State(
            "the teacher must be a train-form checkpoint (neither fused nor stripped)".into(),
        ));
    }
    let mut tc = cfg.train.clone();
    tc.distill = mode;
    tc.teacher_checkpoint.get_or_insert_with(|| "<in memory>".into());
    // Students share the teacher's architecture.
    let student = Model::new(&teacher.model_config, tc.seed)?;
    let mut t = Trainer::new(tc, student)?;
    t.set_teacher(teacher)?;
    fit(&mut t, train, None)?;
    if mode == DistillMode::Dld {
        t.model.strip_auxiliary();
    }
    Ok(t)
}

pub fn distill(a: DistillArgs) -> Result<()> {
    let mut cfg = resolve(&a.config)?;
    let mode = match a.mode {
        DistillKind::Standard => DistillMode::Standard,
        DistillKind::Dld => DistillMode::Dld,
    };
    let path = a
        .teacher
        .or_else(|| cfg.train.teacher_checkpoint.as_ref().map(PathBuf::from))
        .ok_or_else(|| config_err("distillation needs a teacher checkpoint (--teacher)"))?;
    let teacher = Checkpoint::load(&path)?;
    cfg.train.teacher_checkpoint = Some(path.display().to_string());
    let (train, _) = datasets(&cfg, &a.data)?;
    if train.num_classes() != teacher.model_config.num_classes {
        return Err(Error::Mismatch(format!(
            "teacher predicts {} classes, the data has {}",
            teacher.model_config.num_classes,
            train.num_classes()
        )));
    }
    let t = distill_run(&cfg, mode, &teacher, &train)?;
    t.checkpoint().save(&a.out)?;
    println!(
        "distilled {} epochs, final loss {:.4}; wrote {}",
        t.epoch,
        final_loss(&t),
        a.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------ deployment

pub fn fuse(a: FuseArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let fused = fuse_model(&ckpt)?;
    fused.save(&a.out)?;
    println!(
        "fused {} -> {} parameters; wrote {}",
        ckpt.num_params(),
        fused.num_params(),
        a.out.display()
    );
    Ok(())
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

fn report_rows(r: &EvalReport) -> [(&'static str, Option<f64>); 5] {
    [
        ("AP", r.ap),
        ("AP50", r.ap50),
        ("AP_small", r.ap_small),
        ("AP_medium", r.ap_medium),
        ("AP_large", r.ap_large),
    ]
}

fn print_report(r: &EvalReport) {
    println!(
        "{} images, {} objects, {} detections",
        r.num_images, r.num_gt, r.num_detections
    );
    for (name, v) in report_rows(r) {
        println!("{name:<10} {}", fmt_metric(v));
    }
    for (c, v) in r.per_class.iter().enumerate() {
        println!("class {c:<4} {}", fmt_metric(*v));
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = resolve(&a.config)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = match &a.data {
        Some(d) => load_dir(d)?,
        None => synthetic_val(&cfg.data)?,
    };
    let r = evaluate(&ckpt, &ds, input_size(&ckpt, &cfg), &eval_nms(&cfg))?;
    if a.json {
        println!("{}", to_json(&r)?);
    } else {
        print_report(&r);
    }
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let cfg = resolve(&a.config)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = deploy_model(&ckpt)?;
    let size = input_size(&ckpt, &cfg);
    let mut nms = cfg.nms.clone();
    if let Some(c) = a.conf {
        nms.conf_thresh = c;
    }
    if let Some(dir) = &a.dump {
        std::fs::create_dir_all(dir)?;
    }
    let mut all = std::collections::BTreeMap::new();
    for (i, path) in a.images.iter().enumerate() {
        let img = load_ppm(path)?;
        let dets = detect(&model, &img, size, &nms)?;
        println!("{}: {} detections", path.display(), dets.len());
        for d in &dets {
            println!("  {}", format_detection(d));
        }
        if let Some(dir) = &a.dump {
            let (x, _) = preprocess(&[&img], size)?;
            let out = no_grad(|| model.forward(&x, false, HeadMode::Deploy))?;
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy());
            for l in &out.levels {
                io::save(&l.af_cls, &dir.join(format!("{stem}_s{}_cls.rbt", l.stride)))?;
                if let Some(r) = l.af_reg_naive.as_ref().or(l.af_reg_dist.as_ref()) {
                    io::save(r, &dir.join(format!("{stem}_s{}_reg.rbt", l.stride)))?;
                }
            }
        }
        all.insert(i as u64, dets);
    }
    if let Some(path) = &a.results {
        std::fs::write(path, to_json(&to_coco_results(&all))?)?;
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (model, mode) = if a.train_form {
        (ckpt.to_model()?, HeadMode::Train)
    } else {
        (deploy_model(&ckpt)?, HeadMode::Deploy)
    };
    let r = benchmark(&model, mode, a.input_size, a.batch_size, a.iterations, a.warmup)?;
    if a.json {
        println!("{}", to_json(&r)?);
    } else {
        println!(
            "batch {} at {} px: mean {:.2} ms, p50 {:.2} ms, p99 {:.2} ms, {:.1} img/s",
            r.batch_size, r.input_size, r.mean_ms, r.p50_ms, r.p99_ms, r.throughput
        );
    }
    Ok(())
}

// ------------------------------------------------------------ ablation

/// Plain (non-distilled) runs by configuration, so a teacher that equals
/// the other arm is trained once.
struct PlainRuns(Vec<(RunConfig, Checkpoint, Checkpoint)>);

impl PlainRuns {
    /// Final and best-AP checkpoints of a plain run of `cfg`.
    fn get(&mut self, cfg: &RunConfig, train: &Dataset, val: &Dataset, interval: usize) -> Result<(Checkpoint, Checkpoint)> {
        let mut key = cfg.clone();
        key.train.distill = DistillMode::Off;
        key.train.teacher_checkpoint = None;
        if let Some((_, last, best)) = self.0.iter().find(|(k, _, _)| *k == key) {
            return Ok((last.clone(), best.clone()));
        }
        let mut t = Trainer::new(key.train.clone(), Model::new(&key.model, key.train.seed)?)?;
        let nms = eval_nms(&key);
        let best = fit(&mut t, train, Some((val, interval, &nms)))?
            .map(|b| b.0)
            .unwrap_or_else(|| t.checkpoint());
        let last = t.checkpoint();
        self.0.push((key, last.clone(), best.clone()));
        Ok((last, best))
    }
}

fn run_arm(
    name: &str,
    cfg: &RunConfig,
    runs: &mut PlainRuns,
    train: &Dataset,
    val: &Dataset,
    interval: usize,
) -> Result<EvalReport> {
    log::info!("ablation arm {name}");
    let (last, best) = runs.get(cfg, train, val, interval)?;
    let ckpt = match cfg.train.distill {
        DistillMode::Off => last,
        mode => distill_run(cfg, mode, &best, train)?.checkpoint(),
    };
    evaluate(&ckpt, val, cfg.train.input_size, &eval_nms(cfg))
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut reference = resolve(&a.config)?;
    let (train, val) = datasets(&reference, &a.data)?;
    let val = val.ok_or_else(|| config_err("ablate needs a validation set (--val)"))?;
    match_classes(&mut reference.model, &train);
    let mut variant = reference.clone();
    if let Some(s) = a.bic {
        variant.model.use_bic = s == Switch::On;
    }
    if let Some(s) = a.spp {
        variant.model.spp_variant = match s {
            SppArg::Simsppf => rbdet::blocks::SppfVariant::SimSppf,
            SppArg::Simcspsppf => rbdet::blocks::SppfVariant::SimCspSppf,
        };
    }
    if let Some(s) = a.aat {
        variant.train.aat_enabled = s == Switch::On;
    }
    if let Some(d) = a.distill {
        variant.train.distill = match d {
            DistillArg::Off => DistillMode::Off,
            DistillArg::Standard => DistillMode::Standard,
            DistillArg::Dld => DistillMode::Dld,
        };
    }
    for cfg in [&mut reference, &mut variant] {
        if cfg.train.distill == DistillMode::Dld {
            cfg.model.head_branches.enhanced_dfl_aux = true;
        }
    }
    let interval = 5;
    let mut runs = PlainRuns(Vec::new());
    let r = run_arm("reference", &reference, &mut runs, &train, &val, interval)?;
    let v = run_arm("variant", &variant, &mut runs, &train, &val, interval)?;
    let rows: Vec<(&str, Option<f64>, Option<f64>, Option<f64>)> = report_rows(&r)
        .iter()
        .zip(report_rows(&v))
        .map(|((name, x), (_, y))| (*name, *x, y, x.zip(y).map(|(x, y)| y - x)))
        .collect();
    if a.json {
        let delta: serde_json::Map<String, serde_json::Value> = rows
            .iter()
            .map(|(name, _, _, d)| (name.to_string(), serde_json::json!(d)))
            .collect();
        let doc = serde_json::json!({ "reference": r, "variant": v, "delta": delta });
        println!("{}", to_json(&doc)?);
    } else {
        println!("{:<10} {:>10} {:>10} {:>10}", "metric", "reference", "variant", "delta");
        for (name, x, y, d) in rows {
            let delta = d.map_or_else(|| "n/a".into(), |d| format!("{d:+.4}"));
            println!("{name:<10} {:>10} {:>10} {delta:>10}", fmt_metric(x), fmt_metric(y));
        }
    }
    Ok(())
}

// ------------------------------------------------------------ data

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = resolve(&a.config)?;
    if let Some(s) = a.config.seed {
        cfg.data.seed = s;
    }
    if let Some(n) = a.num_images {
        cfg.data.num_images = n;
    }
    if let Some(s) = a.image_size {
        cfg.data.image_size = s;
    }
    let ds = gen_synthetic(&cfg.data)?;
    ds.save_coco(&a.out)?;
    let objects: usize = ds.samples.iter().map(|s| s.gt.len()).sum();
    println!(
        "wrote {} images with {} objects of {} classes to {}",
        ds.len(),
        objects,
        ds.num_classes(),
        a.out.display()
    );
    Ok(())
}
