//! Frame sampling, augmentation and the Adam training loop.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng as _;

use crate::embed::VideoClip;
use crate::model::{cross_entropy, forward, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, Scalar, Tape, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Indices `floor(i·S/T)`.
    Uniform,
    /// Random stride, then random phase, so the `T` indices stay inside the source.
    RandomInterval,
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SampleMode::Uniform),
            "random-interval" => Ok(SampleMode::RandomInterval),
            _ => Err(Error::Invalid(format!("unknown sample mode {s:?}"))),
        }
    }
}

impl SampleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleMode::Uniform => "uniform",
            SampleMode::RandomInterval => "random-interval",
        }
    }
}

pub fn sample_indices(source_len: usize, t: usize, mode: SampleMode, rng: &mut Rng) -> Result<Vec<usize>> {
    if t == 0 || source_len < t {
        return Err(Error::Invalid(format!(
            "cannot sample {t} frames from a {source_len}-frame source"
        )));
    }
    Ok(match mode {
        SampleMode::Uniform => (0..t).map(|i| i * source_len / t).collect(),
        SampleMode::RandomInterval => {
            let max_stride = if t == 1 { 1 } else { (source_len - 1) / (t - 1) };
            let stride = rng.random_range(1..=max_stride);
            let span = stride * (t - 1);
            let phase = rng.random_range(0..source_len - span);
            (0..t).map(|i| phase + i * stride).collect()
        }
    })
}

/// Picks `t` frames of `source` (a `S×3×H×W` video).
pub fn sample_frames<S: Scalar>(
    source: &VideoClip<S>,
    t: usize,
    mode: SampleMode,
    rng: &mut Rng,
) -> Result<VideoClip<S>> {
    let idx = sample_indices(source.num_frames(), t, mode, rng)?;
    let per = source.frames.numel() / source.num_frames();
    let mut data = Vec::with_capacity(per * t);
    for i in idx {
        data.extend_from_slice(&source.frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = source.frames.shape().to_vec();
    shape[0] = t;
    VideoClip::new(Tensor::new(shape, data)?, source.label, source.clip_id.clone())
}

/// Label-preserving, clip-consistent augmentation: horizontal flip with probability 1/2 and a
/// per-clip brightness/contrast jitter, then clamped to `[0,1]`.
pub fn augment<S: Scalar>(clip: &VideoClip<S>, rng: &mut Rng) -> VideoClip<S> {
    let flip = rng.random_bool(0.5);
    let brightness: f64 = rng.random_range(-0.1..=0.1);
    let contrast: f64 = rng.random_range(0.9..=1.1);
    let w = clip.width();
    let src = clip.frames.data();
    let frames = Tensor::from_fn(clip.frames.shape(), |i| {
        let x = i % w;
        let j = if flip { i - x + (w - 1 - x) } else { i };
        let v = (src[j].as_f64() - 0.5) * contrast + 0.5 + brightness;
        S::from_f64(v.clamp(0.0, 1.0))
    });
    VideoClip {
        frames,
        label: clip.label,
        clip_id: clip.clip_id.clone(),
    }
}

/// Constant `base` after a linear warmup over the first `warmup_frac` of `total` steps.
pub fn lr_at(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total as f64).ceil() as usize;
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub adam: AdamConfig,
    pub warmup_frac: f64,
    pub sample_mode: SampleMode,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 3e-3,
            adam: AdamConfig::default(),
            warmup_frac: 0.05,
            sample_mode: SampleMode::RandomInterval,
            augment: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// `step,loss,lr` with LF line endings. Floats use Rust's shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.step, r.loss, r.lr).expect("write to string");
        }
        s
    }
}

/// Owns parameters and optimizer state for one run.
pub struct Trainer<S> {
    pub cfg: ModelConfig,
    pub params: ModelParams<S>,
    opt: Adam<S>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(cfg: ModelConfig, params: ModelParams<S>, adam: AdamConfig) -> Self {
        let opt = Adam::new(&params.tensors(), adam);
        Self { cfg, params, opt }
    }

    /// Mean cross-entropy over the batch, one Adam update. The tape (and with it every
    /// gradient) is dropped before returning.
    pub fn train_step(&mut self, batch: &[VideoClip<S>], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let mut total = None;
        for clip in batch {
            let frames = tape.constant(clip.frames.clone());
            let out = forward(&mut tape, frames, &bound, &self.cfg, false)?;
            let loss = cross_entropy(&mut tape, out.logits, clip.label)?;
            total = Some(match total {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let total = total.expect("non-empty batch");
        let loss = tape.scale(total, S::one() / S::from_f64(batch.len() as f64));
        tape.backward(loss)?;
        let grads: Vec<Tensor<S>> = bound
            .vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_refs: Vec<&Tensor<S>> = grads.iter().collect();
        let value = tape.value(loss).data()[0].as_f64();
        self.opt.step(&mut self.params.tensors_mut(), &grad_refs, lr);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Label;
    use crate::rng;
    use crate::verify::random_tensor;

    #[test]
    fn uniform_indices() {
        let mut r = rng::stream(0, "t");
        assert_eq!(sample_indices(8, 8, SampleMode::Uniform, &mut r).unwrap(), (0..8).collect::<Vec<_>>());
        assert_eq!(sample_indices(8, 2, SampleMode::Uniform, &mut r).unwrap(), vec![0, 4]);
        assert_eq!(sample_indices(16, 8, SampleMode::Uniform, &mut r).unwrap()[1], 2);
        assert!(sample_indices(4, 8, SampleMode::Uniform, &mut r).is_err());
    }

    #[test]
    fn random_interval_is_seeded_and_in_range() {
        let draw = |seed| {
            let mut r = rng::stream(seed, "sampling");
            (0..20)
                .map(|_| sample_indices(16, 5, SampleMode::RandomInterval, &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        for idx in draw(5) {
            assert!(idx.iter().all(|&i| i < 16));
            let stride = idx[1] - idx[0];
            assert!(stride >= 1);
            assert!(idx.windows(2).all(|w| w[1] - w[0] == stride));
        }
        let mut r = rng::stream(1, "s");
        let one = sample_indices(3, 1, SampleMode::RandomInterval, &mut r).unwrap();
        assert!(one.len() == 1 && one[0] < 3);
    }

    #[test]
    fn sample_frames_copies_selected_frames() {
        let src = VideoClip::new(random_tensor(&[8, 3, 2, 2], 1, 1.0), Label::Attack, "a").unwrap();
        let mut r = rng::stream(0, "t");
        let c = sample_frames(&src, 2, SampleMode::Uniform, &mut r).unwrap();
        assert_eq!(c.frames.shape(), &[2, 3, 2, 2]);
        assert_eq!(&c.frames.data()[12..], &src.frames.data()[48..60]);
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(0, 100, 1.0, 0.05), 0.2);
        assert_eq!(lr_at(4, 100, 1.0, 0.05), 1.0);
        assert_eq!(lr_at(50, 100, 1.0, 0.05), 1.0);
        assert_eq!(lr_at(0, 100, 1.0, 0.0), 1.0);
    }

    #[test]
    fn augmentation_keeps_range_and_label() {
        let src = VideoClip::new(random_tensor(&[2, 3, 4, 4], 2, 0.5), Label::BonaFide, "b").unwrap();
        let mut r = rng::stream(0, "aug");
        for _ in 0..10 {
            let a = augment(&src, &mut r);
            assert_eq!(a.label, Label::BonaFide);
            assert!(a.frames.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 2,
            height: 16,
            width: 16,
            cte_stride: 8,
            channels: 6,
            scales: vec![1, 2],
            depth: 1,
            ffn_ratio: 2,
            seed: 1,
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let cfg = tiny();
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let mut tr = Trainer::new(cfg.clone(), params.clone(), AdamConfig::default());
        let clip = VideoClip::new(random_tensor(&[2, 3, 16, 16], 3, 0.5).cast(), Label::Attack, "x").unwrap();
        tr.train_step(&[clip], 0.0).unwrap();
        assert_eq!(tr.params, params);
        assert!(tr.train_step(&[], 0.1).is_err());
    }

    #[test]
    fn overfits_a_single_clip() {
        let cfg = tiny();
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let mut tr = Trainer::new(cfg, params, AdamConfig::default());
        let clip = VideoClip::new(random_tensor(&[2, 3, 16, 16], 4, 0.5).cast(), Label::BonaFide, "x").unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            losses.push(tr.train_step(std::slice::from_ref(&clip), 1e-3).unwrap());
        }
        assert!(losses[..20].windows(2).all(|w| w[1] < w[0]), "{:?}", &losses[..20]);
        assert!(*losses.last().unwrap() < 0.01, "{}", losses.last().unwrap());
    }
}
