//! Optimization: cosine schedule, AdamW, paired augmentation, and the
//! supervised and distillation training loops.

use std::fs;
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::metrics::{Overlap, THRESHOLD};
use crate::data::{make_batch, Normalization, Sample};
use crate::error::{Error, Result};
use crate::losses::{bce_dice_loss, distill_loss, plain_kl_loss, DistillWeights, LossBreakdown};
use crate::network::Model;
use crate::param::{Module, Param};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine down over `t_max` epochs, then back up, with period `2 * t_max`.
    #[default]
    Cyclic,
    /// Cosine down over `t_max` epochs, then held at `eta_min`.
    Clamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub t_max: usize,
    pub eta_min: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub num_seeds: usize,
    pub image_size: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 50,
            batch_size: 8,
            t_max: 50,
            eta_min: 1e-5,
            schedule: Schedule::Cyclic,
            seed: 0,
            num_seeds: 3,
            image_size: 64,
            hflip: true,
            vflip: true,
            rot90: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr) {
            return Err(Error::Config(format!("eta_min must lie in [0, lr], got {}", self.eta_min)));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::network::DOWNSAMPLE) {
            return Err(Error::Config(format!("image_size {} is not divisible by 32", self.image_size)));
        }
        if self.num_seeds == 0 {
            return Err(Error::Config("num_seeds must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 || !c.is_finite() {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Learning rate at `epoch` under cosine annealing.
pub fn cosine_lr(epoch: usize, base_lr: f64, t_max: usize, eta_min: f64, schedule: Schedule) -> f64 {
    let t_max = t_max.max(1);
    let t = match schedule {
        Schedule::Cyclic => epoch % (2 * t_max),
        Schedule::Clamp => epoch.min(t_max),
    };
    let cos = (std::f64::consts::PI * t as f64 / t_max as f64).cos();
    let lr = eta_min + 0.5 * (base_lr - eta_min) * (1.0 + cos);
    lr.clamp(eta_min.min(base_lr), base_lr.max(eta_min))
}

/// First and second moment estimates for one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update: decoupled decay, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, wd: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "adamw: {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    } else if state.m.len() != params.len() {
        return Err(Error::Contract("adamw: optimizer state size mismatch".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        params[i] *= 1.0 - lr * wd;
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mh = state.m[i] / bc1;
        let vh = state.v[i] / bc2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// AdamW over every parameter tensor of a module, one state per tensor.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub weight_decay: f64,
    states: Vec<AdamState>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            states: Vec::new(),
        }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, lr: f64) -> Result<()> {
        let mut i = 0;
        let mut failure = None;
        let wd = self.weight_decay;
        let states = &mut self.states;
        model.visit_params_mut("", &mut |_, p: &mut Param| {
            if states.len() <= i {
                states.push(AdamState::default());
            }
            let g = p.grad.as_slice().expect("contiguous grad").to_vec();
            if let Err(e) = adamw_step(p.data_mut(), &g, &mut states[i], lr, wd) {
                failure.get_or_insert(e);
            }
            i += 1;
        });
        failure.map_or(Ok(()), Err)
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<M: Module + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params("", &mut |_, p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        model.visit_params_mut("", &mut |_, p| p.grad.mapv_inplace(|g| g * s));
    }
    norm
}

/// A paired flip / quarter-turn transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentOps {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns, 0..4.
    pub rot90: u8,
}

impl AugmentOps {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(cfg: &TrainConfig, square: bool, rng: &mut R) -> Self {
        // Draw every decision so the stream advances identically regardless of flags.
        let h = rng.random_bool(0.5);
        let v = rng.random_bool(0.5);
        let r = rng.random_range(0..4u8);
        Self {
            hflip: cfg.hflip && h,
            vflip: cfg.vflip && v,
            rot90: if cfg.rot90 && square { r } else { 0 },
        }
    }

    /// Applies the transform to a (C, H, W) array.
    pub fn apply(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut v = x.view();
        if self.hflip {
            v.invert_axis(Axis(2));
        }
        if self.vflip {
            v.invert_axis(Axis(1));
        }
        for _ in 0..self.rot90 % 4 {
            // counter-clockwise: transpose, then flip rows
            v.swap_axes(1, 2);
            v.invert_axis(Axis(1));
        }
        v.as_standard_layout().into_owned()
    }
}

/// Applies one random transform identically to an image and its mask.
pub fn augment<R: Rng + ?Sized>(
    image: &Array3<f64>,
    mask: &Array3<f64>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> (Array3<f64>, Array3<f64>) {
    let (_, h, w) = image.dim();
    let ops = AugmentOps::sample(cfg, h == w, rng);
    (ops.apply(image), ops.apply(mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub terms: LossBreakdown,
    pub val_loss: f64,
    pub val_iou: f64,
    pub val_dsc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Parameters from the epoch with the highest validation IoU.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub normalization: Normalization,
}

/// Teacher-side objective for [`distill_train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DistillStrategy {
    /// The four-term hybrid objective.
    Hybrid(DistillWeights),
    /// Hard supervision plus a temperature-softened pixelwise KL to the teacher.
    PlainKl { lambda_h: f64, lambda_kl: f64, tau: f64 },
}

impl Default for DistillStrategy {
    fn default() -> Self {
        DistillStrategy::Hybrid(DistillWeights::default())
    }
}

fn check_terms(br: &LossBreakdown, epoch: usize, step: usize) -> Result<()> {
    for (name, v) in br.terms() {
        if !v.is_finite() {
            return Err(Error::NanLoss {
                term: name.to_string(),
                epoch,
                step,
            });
        }
    }
    Ok(())
}

fn grads_finite<M: Module + ?Sized>(model: &M) -> bool {
    let mut ok = true;
    model.visit_params("", &mut |_, p| ok &= p.grad.iter().all(|g| g.is_finite()));
    ok
}

/// Thresholded global overlap and mean BCE+Dice of `model` (evaluation mode) on `samples`.
pub fn evaluate(model: &Model, samples: &[Sample], norm: &Normalization, batch_size: usize) -> Result<(Overlap, f64)> {
    let mut overlap = Overlap::default();
    let mut loss = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = make_batch(&refs, norm)?;
        let p = model.forward(&x)?;
        overlap = overlap.merge(Overlap::measure(&p, &y, THRESHOLD)?);
        loss += bce_dice_loss(&p, &y)?.value * chunk.len() as f64;
    }
    Ok((overlap, loss / samples.len().max(1) as f64))
}

/// Objective called once per step with the augmented raw batch, the student's probabilities and the masks.
type Objective<'a> = dyn FnMut(&[Sample], &Array4<f64>, &Array4<f64>) -> Result<(LossBreakdown, Array4<f64>)> + 'a;

fn run_loop(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    objective: &mut Objective<'_>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let norm = Normalization::from_samples(train_set);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val_iou = f64::NEG_INFINITY;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.lr, cfg.t_max, cfg.eta_min, cfg.schedule);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut seen = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    let s = &train_set[i];
                    let (image, mask) = augment(&s.image, &s.mask, cfg, &mut rng);
                    Sample {
                        id: s.id.clone(),
                        image,
                        mask,
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, y) = make_batch(&refs, &norm)?;
            let cache = model.forward_train(&x)?;
            let (br, dprobs) = objective(&batch, &cache.probs, &y)?;
            check_terms(&br, epoch, step)?;
            model.zero_grads();
            model.backward_from_probs(&cache, &dprobs);
            if !grads_finite(model) {
                return Err(Error::NanLoss {
                    term: "gradient".into(),
                    epoch,
                    step,
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(model, c);
            }
            opt.step(model, lr)?;
            model.update_running_stats(&cache);
            let n = idx.len() as f64;
            sum.hard += br.hard * n;
            sum.dkd += br.dkd * n;
            sum.attention += br.attention * n;
            sum.gradient += br.gradient * n;
            sum.total += br.total * n;
            seen += idx.len();
        }
        let k = seen as f64;
        let terms = LossBreakdown {
            hard: sum.hard / k,
            dkd: sum.dkd / k,
            attention: sum.attention / k,
            gradient: sum.gradient / k,
            total: sum.total / k,
        };
        let (ov, val_loss) = evaluate(model, val_set, &norm, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: terms.total,
            terms,
            val_loss,
            val_iou: ov.iou(),
            val_dsc: ov.dsc(),
        };
        if rec.val_iou > best_val_iou {
            best_val_iou = rec.val_iou;
            best_epoch = rec.epoch;
            best = model.clone();
        }
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        best_val_iou,
        normalization: norm,
    })
}

/// Supervised training with BCE + Dice.
pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut objective = |_: &[Sample], p: &Array4<f64>, y: &Array4<f64>| {
        let lg = bce_dice_loss(p, y)?;
        Ok((
            LossBreakdown {
                hard: lg.value,
                total: lg.value,
                ..LossBreakdown::default()
            },
            lg.grad,
        ))
    };
    run_loop(model, train_set, val_set, cfg, &mut objective, on_epoch)
}

/// Trains `student` against a frozen `teacher` evaluated in inference mode.
///
/// The teacher sees the same augmented images under its own normalization.
pub fn distill_train(
    student: &mut Model,
    teacher: &Model,
    teacher_norm: &Normalization,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    strategy: &DistillStrategy,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if teacher.config.in_channels != student.config.in_channels
        || teacher.config.out_channels != student.config.out_channels
    {
        return Err(Error::Config("teacher and student disagree on input/output channels".into()));
    }
    match strategy {
        DistillStrategy::Hybrid(w) => w.validate()?,
        DistillStrategy::PlainKl { lambda_h, lambda_kl, tau } => {
            if !(*lambda_h >= 0.0 && *lambda_kl >= 0.0 && *tau > 0.0) {
                return Err(Error::Config("plain-KL weights must be non-negative and tau positive".into()));
            }
        }
    }
    let mut objective = |batch: &[Sample], p: &Array4<f64>, y: &Array4<f64>| {
        let refs: Vec<&Sample> = batch.iter().collect();
        let (xt, _) = make_batch(&refs, teacher_norm)?;
        let t = teacher.forward(&xt)?;
        match strategy {
            DistillStrategy::Hybrid(w) => distill_loss(p, &t, y, w),
            DistillStrategy::PlainKl { lambda_h, lambda_kl, tau } => {
                let hard = bce_dice_loss(p, y)?;
                let kl = plain_kl_loss(p, &t, *tau)?;
                let mut g = hard.grad * *lambda_h;
                g.scaled_add(*lambda_kl, &kl.grad);
                Ok((
                    LossBreakdown {
                        hard: hard.value,
                        dkd: kl.value,
                        total: lambda_h * hard.value + lambda_kl * kl.value,
                        ..LossBreakdown::default()
                    },
                    g,
                ))
            }
        }
    };
    run_loop(student, train_set, val_set, cfg, &mut objective, on_epoch)
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedSummary {
    pub fn new(seeds: Vec<u64>, values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { seeds, values, mean, std }
    }
}

/// Runs `f` once per seed and summarizes the returned scores.
pub fn over_seeds(seeds: &[u64], mut f: impl FnMut(u64) -> Result<f64>) -> Result<SeedSummary> {
    let values = seeds.iter().map(|&s| f(s)).collect::<Result<Vec<_>>>()?;
    Ok(SeedSummary::new(seeds.to_vec(), values))
}

pub const HISTORY_HEADER: [&str; 10] = [
    "epoch",
    "lr",
    "train_loss",
    "hard",
    "dkd",
    "attention",
    "gradient",
    "val_loss",
    "val_iou",
    "val_dsc",
];

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.terms.hard.to_string(),
            r.terms.dkd.to_string(),
            r.terms.attention.to_string(),
            r.terms.gradient.to_string(),
            r.val_loss.to_string(),
            r.val_iou.to_string(),
            r.val_dsc.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Serialize)]
pub struct HistorySummary<'a> {
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub epochs: usize,
    pub history: &'a [EpochRecord],
}

pub fn write_history_json(path: &Path, outcome: &TrainOutcome) -> Result<()> {
    let s = HistorySummary {
        best_epoch: outcome.best_epoch,
        best_val_iou: outcome.best_val_iou,
        epochs: outcome.history.len(),
        history: &outcome.history,
    };
    fs::write(path, serde_json::to_string_pretty(&s)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::network::ModelConfig;

    #[test]
    fn cosine_examples() {
        let (b, e) = (1e-3, 1e-5);
        assert_eq!(cosine_lr(0, b, 50, e, Schedule::Cyclic), b);
        assert!((cosine_lr(50, b, 50, e, Schedule::Cyclic) - e).abs() < 1e-18);
        assert!((cosine_lr(25, b, 50, e, Schedule::Cyclic) - (b + e) / 2.0).abs() < 1e-15);
        // mirrored ascent, then repeat
        assert!((cosine_lr(75, b, 50, e, Schedule::Cyclic) - (b + e) / 2.0).abs() < 1e-15);
        assert_eq!(cosine_lr(100, b, 50, e, Schedule::Cyclic), b);
        assert_eq!(cosine_lr(75, b, 50, e, Schedule::Clamp), cosine_lr(50, b, 50, e, Schedule::Clamp));
        for ep in 0..400 {
            let lr = cosine_lr(ep, b, 50, e, Schedule::Cyclic);
            assert!((e..=b).contains(&lr));
        }
    }

    #[test]
    fn adamw_examples() {
        let mut st = AdamState::default();
        let mut p = [1.0, -2.0];
        adamw_step(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        let mut st = AdamState::default();
        let mut x = [1.0];
        adamw_step(&mut x, &[2.0], &mut st, 0.1, 0.0).unwrap();
        assert!((x[0] - 0.9).abs() < 1e-8);
        let mut st = AdamState::default();
        let mut p = [3.0];
        adamw_step(&mut p, &[0.0], &mut st, 1e-3, 0.01).unwrap();
        assert_eq!(p[0], 3.0 * (1.0 - 1e-5));
        assert!(adamw_step(&mut p, &[0.0, 1.0], &mut st, 1e-3, 0.0).is_err());
    }

    #[test]
    fn augmentation_is_paired_and_label_preserving() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, i, j)| (c * 16 + i * 4 + j) as f64);
        let mask = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| ((i + 2 * j) % 3 == 0) as u8 as f64);
        assert_eq!(AugmentOps::identity().apply(&img), img);
        let h = AugmentOps {
            hflip: true,
            ..AugmentOps::identity()
        };
        assert_eq!(h.apply(&h.apply(&img)), img);
        assert_eq!(h.apply(&img)[[0, 0, 0]], img[[0, 0, 3]]);
        let r = AugmentOps {
            rot90: 1,
            ..AugmentOps::identity()
        };
        let mut once = img.clone();
        for _ in 0..4 {
            once = r.apply(&once);
        }
        assert_eq!(once, img);
        // quarter turn counter-clockwise: top-right corner moves to top-left
        assert_eq!(r.apply(&img)[[0, 0, 0]], img[[0, 0, 3]]);
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let (i2, m2) = augment(&img, &mask, &cfg, &mut rng);
            assert!(m2.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(m2.sum(), mask.sum());
            // the mask moves with the image: pixel values are tied to positions
            let ops_img = i2.index_axis(Axis(0), 0).to_owned();
            assert_eq!(ops_img.len(), 16);
        }
    }

    #[test]
    fn smoke_and_determinism() {
        let data = generate_synthetic(&SynthSpec {
            count: 10,
            size: 32,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            image_size: 32,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = Model::new(&ModelConfig::tiny(), 0).unwrap();
            train(&mut m, &data[..8], &data[8..], &cfg, |_| {}).unwrap()
        };
        let a = run();
        assert_eq!(a.history.len(), 2);
        assert!(a.history.iter().all(|r| r.train_loss.is_finite()));
        assert_eq!(a.history, run().history);
        assert!(train(&mut Model::new(&ModelConfig::tiny(), 0).unwrap(), &[], &data, &cfg, |_| {}).is_err());
    }

    #[test]
    fn hard_only_distillation_matches_training() {
        let data = generate_synthetic(&SynthSpec {
            count: 6,
            size: 32,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            image_size: 32,
            ..TrainConfig::default()
        };
        let teacher = Model::new(&ModelConfig::full(), 9).unwrap();
        let before = crate::checkpoint::fingerprint(&teacher);
        let mut s1 = Model::new(&ModelConfig::tiny(), 1).unwrap();
        let mut s2 = s1.clone();
        let a = train(&mut s1, &data[..4], &data[4..], &cfg, |_| {}).unwrap();
        let strategy = DistillStrategy::Hybrid(DistillWeights::hard_only());
        let b = distill_train(&mut s2, &teacher, &Normalization::default(), &data[..4], &data[4..], &cfg, &strategy, |_| {})
            .unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(crate::checkpoint::fingerprint(&s1), crate::checkpoint::fingerprint(&s2));
        assert_eq!(crate::checkpoint::fingerprint(&teacher), before);
    }

    #[test]
    fn nan_abort_names_term() {
        let data = generate_synthetic(&SynthSpec {
            count: 4,
            size: 32,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            image_size: 32,
            ..TrainConfig::default()
        };
        let mut m = Model::new(&ModelConfig::tiny(), 0).unwrap();
        let mut objective = |_: &[Sample], p: &Array4<f64>, _: &Array4<f64>| {
            Ok((
                LossBreakdown {
                    attention: f64::NAN,
                    ..LossBreakdown::default()
                },
                Array4::zeros(p.dim()),
            ))
        };
        let err = run_loop(&mut m, &data[..2], &data[2..], &cfg, &mut objective, |_| {}).unwrap_err();
        assert!(matches!(err, Error::NanLoss { ref term, .. } if term == "attention"), "{err}");
    }
}
