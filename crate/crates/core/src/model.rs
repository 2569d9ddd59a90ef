//! The end-to-end classifier.
//!
//! ```text
//! X   = CTE(clip)
//! per layer:  Q,K,V = CP(X);  Y = MsMHSA(Q,K,V) + X;  X = FFN(Norm(Y)) + Y
//! Z   = Linear(mean over T, H_A, W_A of X)       // two logits, no class token
//! ```

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::embed::{
    conv_ffn, conv_project, conv_token_embed, ConvParams, FfnParams, Label, ProjectionParams,
    VideoClip,
};
use crate::msmhsa::{msmhsa_forward, AttentionWeights, ScaleConfig};
use crate::rng;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

pub const NUM_CLASSES: usize = 2;
pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cte_stride: usize,
    pub channels: usize,
    pub scales: Vec<usize>,
    pub depth: usize,
    pub ffn_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            cte_stride: 8,
            channels: 12,
            scales: vec![1, 2],
            depth: 2,
            ffn_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn token_height(&self) -> usize {
        self.height / self.cte_stride
    }

    pub fn token_width(&self) -> usize {
        self.width / self.cte_stride
    }

    pub fn scale_config(&self) -> Result<ScaleConfig> {
        ScaleConfig::new(self.scales.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("cte_stride", self.cte_stride),
            ("channels", self.channels),
            ("ffn_ratio", self.ffn_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        for extent in [self.height, self.width] {
            if extent % self.cte_stride != 0 {
                return Err(Error::Indivisible {
                    op: "model config",
                    extent,
                    divisor: self.cte_stride,
                });
            }
        }
        self.scale_config()?
            .validate(self.channels, self.token_height(), self.token_width())
    }

    /// Names and shapes of every parameter, in inventory order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, s, hidden) = (self.channels, self.cte_stride, self.channels * self.ffn_ratio);
        let mut out = vec![
            ("cte.weight".to_string(), vec![c, 3, s, s]),
            ("cte.bias".to_string(), vec![c]),
        ];
        for i in 0..self.depth {
            for p in ["q", "k", "v"] {
                out.push((format!("layers.{i}.{p}.weight"), vec![c, c, 3, 3]));
                out.push((format!("layers.{i}.{p}.bias"), vec![c]));
            }
            out.push((format!("layers.{i}.norm.gamma"), vec![c]));
            out.push((format!("layers.{i}.norm.beta"), vec![c]));
            out.push((format!("layers.{i}.ffn.fc1.weight"), vec![hidden, c, 1, 1]));
            out.push((format!("layers.{i}.ffn.fc1.bias"), vec![hidden]));
            out.push((format!("layers.{i}.ffn.fc2.weight"), vec![c, hidden, 1, 1]));
            out.push((format!("layers.{i}.ffn.fc2.bias"), vec![c]));
        }
        out.push(("head.weight".to_string(), vec![c, NUM_CLASSES]));
        out.push(("head.bias".to_string(), vec![NUM_CLASSES]));
        out
    }
}

/// Named parameter tensors. Order and names are a pure function of the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ModelParams<S> {
    /// Truncated normal (σ = 0.02, cut at 2σ) for weights, zeros for biases, ones/zeros for
    /// the norm affine. Draws from the `init` stream of `cfg.seed`.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let entries = cfg
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gamma") {
                    Tensor::ones(&shape)
                } else if name.ends_with(".bias") || name.ends_with(".beta") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| loop {
                        let v: f64 = normal.sample(&mut r);
                        if v.abs() <= 2.0 * INIT_STD {
                            break S::from_f64(v);
                        }
                    })
                };
                (name, t)
            })
            .collect();
        Ok(Self { entries })
    }

    /// Builds from named tensors, checking names and shapes against `cfg`.
    pub fn from_entries(cfg: &ModelConfig, entries: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let expected = cfg.parameter_shapes();
        if expected.len() != entries.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name {
                return Err(Error::Invalid(format!("expected parameter {name}, got {got_name}")));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load parameter",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor<S>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Puts every parameter on `tape`; as leaves when `trainable`, else as constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams::from_vars(vars)
    }
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub projection: ProjectionParams,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub ffn: FfnParams,
}

/// Tape handles for one bound copy of [`ModelParams`], in inventory order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
    pub cte: ConvParams,
    pub layers: Vec<LayerParams>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl BoundParams {
    /// Groups handles given in [`ModelConfig::parameter_shapes`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("inventory order");
        let mut conv = || ConvParams {
            weight: next(),
            bias: next(),
        };
        let cte = conv();
        let depth = (vars.len() - 4) / 12;
        let layers = (0..depth)
            .map(|_| {
                let projection = ProjectionParams {
                    q: conv(),
                    k: conv(),
                    v: conv(),
                };
                let (norm_gamma, norm_beta) = {
                    let g = conv();
                    (g.weight, g.bias)
                };
                let ffn = FfnParams {
                    fc1: conv(),
                    fc2: conv(),
                };
                LayerParams {
                    projection,
                    norm_gamma,
                    norm_beta,
                    ffn,
                }
            })
            .collect();
        let head = conv();
        Self {
            vars,
            cte,
            layers,
            head_weight: head.weight,
            head_bias: head.bias,
        }
    }
}

pub struct ForwardOutput<S> {
    /// `[2]` logits: index 0 attack, index 1 bona fide.
    pub logits: Var,
    /// `[layer][head]` weights when recording was requested.
    pub attention: Vec<Vec<AttentionWeights<S>>>,
}

impl<S> fmt::Debug for ForwardOutput<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardOutput")
            .field("logits", &self.logits)
            .field("attention_layers", &self.attention.len())
            .finish()
    }
}

pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    frames: Var,
    params: &BoundParams,
    cfg: &ModelConfig,
    record_attention: bool,
) -> Result<ForwardOutput<S>> {
    let expected = [cfg.frames, 3, cfg.height, cfg.width];
    if tape.shape(frames) != expected {
        return Err(Error::ShapeMismatch {
            op: "forward",
            lhs: expected.to_vec(),
            rhs: tape.shape(frames).to_vec(),
        });
    }
    let scales = cfg.scale_config()?;
    let mut x = conv_token_embed(tape, frames, params.cte, cfg.cte_stride)?;
    let mut attention = Vec::new();
    for layer in &params.layers {
        let qkv = conv_project(tape, x, &layer.projection)?;
        let h = msmhsa_forward(tape, &qkv, &scales, record_attention)?;
        let y = tape.add(h.out, x.map)?;
        let normed = tape.layer_norm(y, layer.norm_gamma, layer.norm_beta, 1, S::from_f64(NORM_EPS))?;
        let f = conv_ffn(tape, normed, &layer.ffn)?;
        x.map = tape.add(f, y)?;
        if record_attention {
            attention.push(h.attention);
        }
    }
    let pooled = tape.mean(x.map, &[0, 2, 3])?;
    let pooled = tape.reshape(pooled, &[1, cfg.channels])?;
    let z = tape.matmul(pooled, params.head_weight)?;
    let z = tape.reshape(z, &[NUM_CLASSES])?;
    let logits = tape.add_bias(z, params.head_bias, 0)?;
    Ok(ForwardOutput { logits, attention })
}

/// Softmax cross-entropy of `label` under `logits`.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, label: Label) -> Result<Var> {
    tape.cross_entropy(logits, label.index())
}

/// Logits (and optionally attention weights) for one clip without recording gradients.
pub fn infer<S: Scalar>(
    clip: &VideoClip<S>,
    params: &ModelParams<S>,
    cfg: &ModelConfig,
    record_attention: bool,
) -> Result<(Tensor<S>, Vec<Vec<AttentionWeights<S>>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let frames = tape.constant(clip.frames.clone());
    let out = forward(&mut tape, frames, &bound, cfg, record_attention)?;
    Ok((tape.value(out.logits).clone(), out.attention))
}

/// Probabilities `[attack, bona fide]` from two logits.
pub fn class_probabilities<S: Scalar>(logits: &Tensor<S>) -> [f64; 2] {
    let d = logits.data();
    let (a, b) = (d[0].as_f64(), d[1].as_f64());
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

/// Probability of the bona fide class.
pub fn predict_score<S: Scalar>(clip: &VideoClip<S>, params: &ModelParams<S>, cfg: &ModelConfig) -> Result<f64> {
    let (logits, _) = infer(clip, params, cfg, false)?;
    Ok(class_probabilities(&logits)[1])
}

/// Replaces every parameter with uniform values in `[-scale, scale]` (gradient-check setup).
pub fn randomize_params<S: Scalar>(params: &mut ModelParams<S>, seed: u64, scale: f64) {
    let mut r = rng::stream(seed, "randomize");
    for t in params.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = S::from_f64(r.random_range(-scale..=scale)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_tensor;

    fn small() -> ModelConfig {
        ModelConfig {
            frames: 2,
            height: 16,
            width: 16,
            cte_stride: 8,
            channels: 6,
            scales: vec![1, 2],
            depth: 1,
            ffn_ratio: 4,
            seed: 3,
        }
    }

    fn clip(cfg: &ModelConfig, seed: u64) -> VideoClip<f64> {
        let frames = random_tensor(&[cfg.frames, 3, cfg.height, cfg.width], seed, 0.5);
        VideoClip::new(frames, Label::BonaFide, "c").unwrap()
    }

    #[test]
    fn inventory_is_stable_and_position_free() {
        let cfg = small();
        let a = ModelParams::<f32>::init(&cfg).unwrap();
        let b = ModelParams::<f32>::init(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.entries().iter().all(|(n, _)| !n.contains("pos")));
        let expected: usize = cfg
            .parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(a.count(), expected);
        assert!(a
            .entries()
            .iter()
            .filter(|(n, _)| n.ends_with("weight"))
            .all(|(_, t)| t.data().iter().all(|v| v.abs() <= 0.04)));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let cfg = small();
        let mut p = ModelParams::<f64>::init(&cfg).unwrap();
        p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let (logits, _) = infer(&clip(&cfg, 1), &p, &cfg, false).unwrap();
        assert_eq!(logits.data(), &[0.0, 0.0]);
        assert_eq!(predict_score(&clip(&cfg, 2), &p, &cfg).unwrap(), 0.5);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = class_probabilities(&Tensor::<f64>::from_f64(&[2], &[-20.0, 20.0]).unwrap());
        assert!(p[1] > 1.0 - 1e-15);
        let cfg = small();
        let mut params = ModelParams::<f32>::init(&cfg).unwrap();
        randomize_params(&mut params, 4, 0.3);
        let c = VideoClip::new(clip(&cfg, 5).frames.cast::<f32>(), Label::Attack, "c").unwrap();
        let (logits, _) = infer(&c, &params, &cfg, false).unwrap();
        let pr = class_probabilities(&logits);
        assert!((pr[0] + pr[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rejects_wrong_clip_shape() {
        let cfg = small();
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let bad = VideoClip::new(Tensor::zeros(&[3, 3, 16, 16]), Label::Attack, "x").unwrap();
        assert!(infer(&bad, &p, &cfg, false).is_err());
    }

    #[test]
    fn records_attention_per_layer_and_head() {
        let mut cfg = small();
        cfg.depth = 2;
        let p = ModelParams::<f64>::init(&cfg).unwrap();
        let (_, att) = infer(&clip(&cfg, 6), &p, &cfg, true).unwrap();
        assert_eq!(att.len(), 2);
        assert_eq!(att[0].len(), 2);
        assert_eq!(att[1][1].alpha.shape(), &[8, 8]);
        let (_, none) = infer(&clip(&cfg, 6), &p, &cfg, false).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn from_entries_validates_shapes() {
        let cfg = small();
        let p = ModelParams::<f32>::init(&cfg).unwrap();
        assert!(ModelParams::from_entries(&cfg, p.entries().to_vec()).is_ok());
        let mut wrong = p.entries().to_vec();
        wrong[0].1 = Tensor::zeros(&[1]);
        assert!(ModelParams::from_entries(&cfg, wrong).is_err());
        let mut other = cfg.clone();
        other.channels = 4;
        assert!(ModelParams::from_entries(&other, p.entries().to_vec()).is_err());
    }
}
