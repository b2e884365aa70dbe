//! SGD with linear warmup and a half-cosine schedule, clip/video
//! evaluation, and run histories.

use std::f64::consts::PI;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, sample_eval_clips, stack, SampleSpec, VideoClip};
use crate::error::{Error, Result};
use crate::ops::{argmax_rows, softmax, softmax_xent, Mode};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor5};
use crate::zoo::{checkpoint, ArchSpec, Model, TensorRole};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub iters_per_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate on the held-out set every this many iterations (0: only at
    /// the end).
    pub eval_every: usize,
    pub eval_clips: usize,
    /// Write a checkpoint every this many iterations (0: never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Abort when `|loss|` exceeds this.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            warmup_epochs: 2,
            total_epochs: 30,
            iters_per_epoch: 50,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
            eval_clips: 10,
            checkpoint_every: 0,
            checkpoint_dir: None,
            max_loss: 50.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.iters_per_epoch == 0 || self.batch_size == 0 || self.eval_clips == 0 {
            return Err(Error::param("epochs, iterations, batch size and eval clips must be positive"));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::param(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::param("need base_lr > 0, 0 <= momentum < 1, weight_decay >= 0"));
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return Err(Error::param("checkpoint_every needs checkpoint_dir"));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.total_epochs * self.iters_per_epoch
    }

    pub fn warmup_iters(&self) -> usize {
        self.warmup_epochs * self.iters_per_epoch
    }
}

/// Learning rate for iteration `iter` (zero-based): `base·(i+1)/W` for the
/// `W` warmup iterations, then `base·½(1 + cos πp)` with
/// `p = (i − W) / (total − W)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let (w, total) = (cfg.warmup_iters(), cfg.total_iters());
    if iter < w {
        return cfg.base_lr * (iter + 1) as f64 / w as f64;
    }
    let p = ((iter - w) as f64 / (total - w) as f64).min(1.0);
    cfg.base_lr * 0.5 * (1.0 + (PI * p).cos())
}

/// One momentum SGD update of every parameter:
/// `v ← m·v + g + wd·p`, `p ← p − lr·v`. Weight decay only applies to
/// roles for which [`TensorRole::decays`] holds.
pub fn sgd_step<T: Scalar>(
    params: &mut [(String, TensorRole, &mut Tensor5<T>)],
    grads: &[Tensor5<T>],
    velocity: &mut [Tensor5<T>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((name, role, p), (g, v)) in params.iter_mut().zip(grads.iter().zip(velocity.iter_mut())) {
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape(format!("sgd: `{name}` is {}, grad {}", p.shape(), g.shape())).in_layer(name));
        }
        let wd = if role.decays() { T::of(weight_decay) } else { T::zero() };
        let (m, lr) = (T::of(momentum), T::of(lr));
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = m * *vv + gv + wd * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub clip_at1: f64,
    pub video_at1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub iters: Vec<IterRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunHistory {
    /// `iter,lr,loss,train_err`, one line per iteration.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.iters {
            w.serialize(r).map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn final_eval(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Mean training error over consecutive windows of `window` iterations.
    pub fn smoothed_train_err(&self, window: usize) -> Vec<f64> {
        self.iters
            .chunks(window.max(1))
            .map(|c| c.iter().map(|r| r.train_err).sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Pick `n` distinct video indices (all of them, repeated, if `n` exceeds
/// the dataset).
fn pick(rng: &mut Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.below(i as u64 + 1) as usize);
        }
        out.extend(idx.iter().take(n - out.len()));
    }
    out
}

/// Everything one iteration did, for callers that want more than the
/// history line.
pub struct StepOutcome {
    pub record: IterRecord,
    pub clips_used: usize,
}

/// One SGD iteration on a batch drawn with the iteration's own seed.
pub fn train_step(
    model: &mut Model<f32>,
    velocity: &mut [Tensor5<f32>],
    videos: &[VideoClip],
    sample: &SampleSpec,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<StepOutcome> {
    let mut rng = Rng::stream(cfg.seed, iter as u64);
    let chosen: Vec<&VideoClip> = pick(&mut rng, videos.len(), cfg.batch_size).into_iter().map(|i| &videos[i]).collect();
    let (x, labels) = sample_batch(&chosen, sample, rng.next_u64())?;

    let (logits, cache) = model.forward(&x, Mode::Train)?;
    let out = softmax_xent(&logits, &labels)?;
    if !out.loss.is_finite() {
        let layer = cache
            .first_non_finite(model)
            .or_else(|| model.first_non_finite())
            .unwrap_or_else(|| "fc".to_string());
        return Err(Error::NonFinite { iter, layer });
    }
    if out.loss.abs() > cfg.max_loss {
        return Err(Error::Diverged { iter, loss: out.loss });
    }
    let wrong = argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p != l).count();
    let grads = model.backward(&cache, &out.grad, false)?;
    model.update_running_stats(&cache);
    let lr = lr_at(iter, cfg);
    sgd_step(&mut model.params_mut(), &grads.params, velocity, lr, cfg.momentum, cfg.weight_decay)?;
    if let Some(layer) = model.first_non_finite() {
        return Err(Error::NonFinite { iter, layer });
    }
    Ok(StepOutcome {
        record: IterRecord {
            iter,
            lr,
            loss: out.loss,
            train_err: wrong as f64 / labels.len() as f64,
        },
        clips_used: labels.len(),
    })
}

pub fn zero_velocity(model: &Model<f32>) -> Vec<Tensor5<f32>> {
    model.params().iter().map(|p| Tensor5::zeros(*p.2.shape())).collect()
}

/// Train for `cfg.total_iters()` iterations. When `held_out` is given the
/// model is evaluated every `eval_every` iterations and once at the end.
pub fn train(
    model: &mut Model<f32>,
    videos: &[VideoClip],
    held_out: Option<&[VideoClip]>,
    sample: &SampleSpec,
    cfg: &TrainConfig,
) -> Result<RunHistory> {
    train_with(model, videos, held_out, sample, cfg, |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_with(
    model: &mut Model<f32>,
    videos: &[VideoClip],
    held_out: Option<&[VideoClip]>,
    sample: &SampleSpec,
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<RunHistory> {
    cfg.validate()?;
    sample.validate()?;
    if videos.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let mut velocity = zero_velocity(model);
    let mut history = RunHistory::default();
    let total = cfg.total_iters();
    for iter in 0..total {
        let step = train_step(model, &mut velocity, videos, sample, cfg, iter)?;
        on_iter(&step.record);
        history.iters.push(step.record);
        let done = iter + 1;
        if let Some(held) = held_out {
            if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == total {
                let (clip_at1, video_at1) = evaluate(model, held, sample, cfg.eval_clips)?;
                history.evals.push(EvalRecord {
                    iter,
                    clip_at1,
                    video_at1,
                });
            }
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            let dir = cfg.checkpoint_dir.as_ref().expect("validated");
            std::fs::create_dir_all(dir)?;
            checkpoint::save(model, dir.join(format!("iter_{done:06}.csnw")))?;
        }
    }
    Ok(history)
}

/// One training run of a paired comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRun {
    pub arch: String,
    pub params: usize,
    pub history: RunHistory,
}

/// Train each architecture from the same init seed on the same data and
/// batch sequence, for side-by-side train/test error curves.
pub fn paired_curves(
    archs: &[ArchSpec],
    videos: &[VideoClip],
    held_out: Option<&[VideoClip]>,
    sample: &SampleSpec,
    cfg: &TrainConfig,
) -> Result<Vec<CurveRun>> {
    archs
        .iter()
        .map(|arch| {
            let mut model = Model::<f32>::new(arch, cfg.seed)?;
            let history = train(&mut model, videos, held_out, sample, cfg)?;
            Ok(CurveRun {
                arch: arch.name.clone(),
                params: model.param_count(),
                history,
            })
        })
        .collect()
}

/// `arch,window_end,train_err,test_err`: smoothed train error per window
/// and, where an evaluation fell inside the window, `1 − video@1`.
pub fn write_curves_csv<W: Write>(runs: &[CurveRun], window: usize, out: W) -> Result<()> {
    let window = window.max(1);
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["arch", "window_end", "train_err", "test_err"]).map_err(err)?;
    for run in runs {
        for (i, e) in run.history.smoothed_train_err(window).iter().enumerate() {
            let end = ((i + 1) * window).min(run.history.iters.len()) - 1;
            let test = run
                .history
                .evals
                .iter()
                .rev()
                .find(|r| r.iter <= end && r.iter + window > end)
                .map(|r| format!("{:.6}", 1.0 - r.video_at1))
                .unwrap_or_default();
            w.write_record([run.arch.clone(), end.to_string(), format!("{e:.6}"), test]).map_err(err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// True when every window mean is no larger than the one before.
pub fn is_non_increasing(curve: &[f64]) -> bool {
    curve.windows(2).all(|w| w[1] <= w[0])
}

/// Clip and video top-1 from per-clip class probabilities of each video.
pub fn accuracy_from_probs(per_video: &[(Vec<Vec<f64>>, usize)]) -> Result<(f64, f64)> {
    if per_video.is_empty() {
        return Err(Error::param("cannot evaluate an empty dataset"));
    }
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
            .0
    };
    let (mut clips, mut clip_hits, mut video_hits) = (0usize, 0usize, 0usize);
    for (probs, label) in per_video {
        let k = probs.first().map(|p| p.len()).unwrap_or(0);
        let mut mean = vec![0.0; k];
        for p in probs {
            clips += 1;
            clip_hits += (argmax(p) == *label) as usize;
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / probs.len() as f64;
            }
        }
        video_hits += (argmax(&mean) == *label) as usize;
    }
    Ok((clip_hits as f64 / clips as f64, video_hits as f64 / per_video.len() as f64))
}

/// `(clip@1, video@1)` over `n_clips` centre-cropped clips per video; the
/// video prediction averages the clip softmaxes.
pub fn evaluate(model: &Model<f32>, videos: &[VideoClip], sample: &SampleSpec, n_clips: usize) -> Result<(f64, f64)> {
    if videos.is_empty() {
        return Err(Error::param("cannot evaluate an empty dataset"));
    }
    let mut per_video = Vec::with_capacity(videos.len());
    for v in videos {
        let x = stack(&sample_eval_clips(v, sample, n_clips)?)?;
        let probs = softmax(&model.predict(&x)?);
        let k = probs.shape().c();
        let rows = probs.data().chunks(k).map(|r| r.iter().map(|&p| p as f64).collect()).collect();
        per_video.push((rows, v.label));
    }
    accuracy_from_probs(&per_video)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        let cfg = TrainConfig {
            base_lr: 0.4,
            warmup_epochs: 2,
            total_epochs: 12,
            iters_per_epoch: 10,
            ..Default::default()
        };
        assert!((lr_at(19, &cfg) - 0.4).abs() < 1e-12);
        assert!((lr_at(20, &cfg) - 0.4).abs() < 1e-12);
        assert!((lr_at(70, &cfg) - 0.2).abs() < 1e-12);
        assert!(lr_at(120, &cfg).abs() < 1e-12);
        assert!((lr_at(0, &cfg) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn picks_are_distinct_within_a_pass() {
        let mut rng = Rng::new(3);
        let mut p = pick(&mut rng, 10, 8);
        p.sort_unstable();
        p.dedup();
        assert_eq!(p.len(), 8);
        assert_eq!(pick(&mut rng, 3, 7).len(), 7);
    }
}
