//! Multi-scale multi-head self-attention.
//!
//! Q/K/V are split equally on the channel axis, one slice per head. Head `i` cuts every
//! frame of its slice into an `l_i × l_i` grid; each grid cell is flattened into one token
//! and the tokens of all `T` frames are stacked, giving `N = T·l_i²` tokens of dimension
//! `D = C_h·(H_A/l_i)·(W_A/l_i)`. A single `N×N` softmax over those tokens mixes cells of
//! the same frame (short-range) and cells of other frames (long-range). Each query cell's
//! output is written back to its own grid position and the heads are concatenated.

use crate::embed::QkvMaps;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Per-head grid divisors; the head count is `scales.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleConfig {
    pub scales: Vec<usize>,
}

impl ScaleConfig {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Invalid("scale set must not be empty".into()));
        }
        if scales.contains(&0) {
            return Err(Error::Invalid("scale divisor must be >= 1".into()));
        }
        Ok(Self { scales })
    }

    pub fn head_count(&self) -> usize {
        self.scales.len()
    }

    /// Checks the divisibility constraints against a `C_A×H_A×W_A` map.
    pub fn validate(&self, channels: usize, height: usize, width: usize) -> Result<()> {
        if channels % self.head_count() != 0 {
            return Err(Error::Indivisible {
                op: "msmhsa channels",
                extent: channels,
                divisor: self.head_count(),
            });
        }
        for &l in &self.scales {
            for extent in [height, width] {
                if extent % l != 0 {
                    return Err(Error::Indivisible {
                        op: "msmhsa scale",
                        extent,
                        divisor: l,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Whether a (query, key) pair stays within one frame or crosses frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionRange {
    Short,
    Long,
}

/// Flattened patch tokens `[N, D]` of one head at grid scale `l`, with their geometry.
///
/// Token `m` comes from frame `m / l²` and grid cell `(m % l²) / l, m % l`.
#[derive(Clone, Copy, Debug)]
pub struct HeadPatchSet {
    pub tokens: Var,
    pub frames: usize,
    pub scale: usize,
    pub channels: usize,
    pub cell_h: usize,
    pub cell_w: usize,
}

impl HeadPatchSet {
    pub fn len(&self) -> usize {
        self.frames * self.scale * self.scale
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.channels * self.cell_h * self.cell_w
    }

    pub fn frame_of(&self, m: usize) -> usize {
        m / (self.scale * self.scale)
    }

    pub fn cell_of(&self, m: usize) -> (usize, usize) {
        let c = m % (self.scale * self.scale);
        (c / self.scale, c % self.scale)
    }

    pub fn range(&self, m: usize, n: usize) -> AttentionRange {
        if self.frame_of(m) == self.frame_of(n) {
            AttentionRange::Short
        } else {
            AttentionRange::Long
        }
    }

    fn same_geometry(&self, other: &HeadPatchSet) -> bool {
        self.frames == other.frames
            && self.scale == other.scale
            && self.channels == other.channels
            && self.cell_h == other.cell_h
            && self.cell_w == other.cell_w
    }
}

/// Row-stochastic `N×N` weights of one head, kept when attention recording is on.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<S> {
    pub alpha: Tensor<S>,
    pub frames: usize,
    pub scale: usize,
}

pub struct MsmhsaOutput<S> {
    /// `T×C_A×H_A×W_A`
    pub out: Var,
    /// One entry per head when recording was requested, otherwise empty.
    pub attention: Vec<AttentionWeights<S>>,
}

/// Cuts each frame of `f: [T, C_h, H_A, W_A]` into an `l×l` grid and stacks the flattened
/// cells of all frames into `[T·l², C_h·(H_A/l)·(W_A/l)]`.
pub fn partition_patches<S: Scalar>(tape: &mut Tape<S>, f: Var, l: usize) -> Result<HeadPatchSet> {
    let shape = tape.shape(f).to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("expected T×C×H×W map, got {shape:?}")));
    }
    let (t, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    for extent in [h, w] {
        if l == 0 || extent % l != 0 {
            return Err(Error::Indivisible {
                op: "partition_patches",
                extent,
                divisor: l,
            });
        }
    }
    let (ch, cw) = (h / l, w / l);
    let x = tape.reshape(f, &[t, c, l, ch, l, cw])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let tokens = tape.reshape(x, &[t * l * l, c * ch * cw])?;
    Ok(HeadPatchSet {
        tokens,
        frames: t,
        scale: l,
        channels: c,
        cell_h: ch,
        cell_w: cw,
    })
}

/// Inverse of [`partition_patches`]: puts every cell back at its grid position.
pub fn unpartition<S: Scalar>(tape: &mut Tape<S>, p: &HeadPatchSet) -> Result<Var> {
    let (t, l, c) = (p.frames, p.scale, p.channels);
    let x = tape.reshape(p.tokens, &[t, l, l, c, p.cell_h, p.cell_w])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[t, c, l * p.cell_h, l * p.cell_w])
}

/// Scaled dot-product attention between whole patch tokens: `softmax(q·kᵀ/√D)·v`.
///
/// Returns the attended tokens (same geometry as `vp`) and the `N×N` weights.
pub fn head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    qp: &HeadPatchSet,
    kp: &HeadPatchSet,
    vp: &HeadPatchSet,
) -> Result<(HeadPatchSet, Var)> {
    if !qp.same_geometry(kp) || !qp.same_geometry(vp) {
        return Err(Error::ShapeMismatch {
            op: "head_attention",
            lhs: tape.shape(qp.tokens).to_vec(),
            rhs: tape.shape(kp.tokens).to_vec(),
        });
    }
    let kt = tape.transpose(kp.tokens)?;
    let scores = tape.matmul(qp.tokens, kt)?;
    let scale = S::one() / S::from_f64(qp.token_dim() as f64).sqrt();
    let scores = tape.scale(scores, scale);
    let alpha = tape.softmax(scores, 1)?;
    let tokens = tape.matmul(alpha, vp.tokens)?;
    Ok((HeadPatchSet { tokens, ..*vp }, alpha))
}

/// Restores every head to `T×C_h×H_A×W_A` and concatenates the heads on channels.
pub fn reassemble_and_concat<S: Scalar>(tape: &mut Tape<S>, heads: &[HeadPatchSet]) -> Result<Var> {
    let first = heads
        .first()
        .ok_or_else(|| Error::Invalid("no heads to reassemble".into()))?;
    let (t, c, h, w) = (
        first.frames,
        first.channels,
        first.scale * first.cell_h,
        first.scale * first.cell_w,
    );
    let mut maps = Vec::with_capacity(heads.len());
    for head in heads {
        if head.frames != t
            || head.channels != c
            || head.scale * head.cell_h != h
            || head.scale * head.cell_w != w
        {
            return Err(Error::ShapeMismatch {
                op: "reassemble_and_concat",
                lhs: vec![t, c, h, w],
                rhs: vec![
                    head.frames,
                    head.channels,
                    head.scale * head.cell_h,
                    head.scale * head.cell_w,
                ],
            });
        }
        maps.push(unpartition(tape, head)?);
    }
    if maps.len() == 1 {
        return Ok(maps[0]);
    }
    tape.concat(&maps, 1)
}

pub fn msmhsa_forward<S: Scalar>(
    tape: &mut Tape<S>,
    qkv: &QkvMaps,
    cfg: &ScaleConfig,
    record_attention: bool,
) -> Result<MsmhsaOutput<S>> {
    let shape = tape.shape(qkv.q).to_vec();
    for v in [qkv.k, qkv.v] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "msmhsa_forward",
                lhs: shape,
                rhs: tape.shape(v).to_vec(),
            });
        }
    }
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("expected T×C×H×W maps, got {shape:?}")));
    }
    cfg.validate(shape[1], shape[2], shape[3])?;
    let heads = cfg.head_count();
    let (qs, ks, vs) = if heads == 1 {
        (vec![qkv.q], vec![qkv.k], vec![qkv.v])
    } else {
        (
            tape.split(qkv.q, 1, heads)?,
            tape.split(qkv.k, 1, heads)?,
            tape.split(qkv.v, 1, heads)?,
        )
    };
    let mut outputs = Vec::with_capacity(heads);
    let mut attention = Vec::new();
    for (i, &l) in cfg.scales.iter().enumerate() {
        let qp = partition_patches(tape, qs[i], l)?;
        let kp = partition_patches(tape, ks[i], l)?;
        let vp = partition_patches(tape, vs[i], l)?;
        let (out, alpha) = head_attention(tape, &qp, &kp, &vp)?;
        if record_attention {
            attention.push(AttentionWeights {
                alpha: tape.value(alpha).clone(),
                frames: qp.frames,
                scale: l,
            });
        }
        outputs.push(out);
    }
    let out = reassemble_and_concat(tape, &outputs)?;
    Ok(MsmhsaOutput { out, attention })
}

/// Mean attention mass each key cell of `frame` receives over all queries, laid out on the
/// `height × width` token grid (each grid cell covers a `height/l × width/l` block).
pub fn attention_rollout<S: Scalar>(
    weights: &AttentionWeights<S>,
    frame: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<f64>> {
    let (t, l) = (weights.frames, weights.scale);
    if frame >= t {
        return Err(Error::OutOfRange {
            what: "frame",
            index: frame,
            limit: t,
        });
    }
    if height % l != 0 || width % l != 0 {
        return Err(Error::Indivisible {
            op: "attention_rollout",
            extent: height,
            divisor: l,
        });
    }
    let n = t * l * l;
    if weights.alpha.shape() != [n, n] {
        return Err(Error::ShapeMismatch {
            op: "attention_rollout",
            lhs: weights.alpha.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let a = weights.alpha.data();
    let mut cells = vec![0.0f64; l * l];
    for (c, cell) in cells.iter_mut().enumerate() {
        let key = frame * l * l + c;
        *cell = (0..n).map(|m| a[m * n + key].as_f64()).sum::<f64>() / n as f64;
    }
    let (bh, bw) = (height / l, width / l);
    Ok(Tensor::from_fn(&[height, width], |i| {
        let (y, x) = (i / width, i % width);
        cells[(y / bh) * l + x / bw]
    }))
}

/// Nearest-neighbour upsampling of a 2-D map by integer factors.
pub fn upsample_nearest(map: &Tensor<f64>, height: usize, width: usize) -> Result<Tensor<f64>> {
    let s = map.shape();
    if s.len() != 2 || height % s[0] != 0 || width % s[1] != 0 {
        return Err(Error::ShapeMismatch {
            op: "upsample_nearest",
            lhs: s.to_vec(),
            rhs: vec![height, width],
        });
    }
    let (fy, fx) = (height / s[0], width / s[1]);
    Ok(Tensor::from_fn(&[height, width], |i| {
        map.get(&[(i / width) / fy, (i % width) / fx])
    }))
}

/// Binary 8-bit PGM (`P5`) with linear min-max scaling; a flat map encodes as all zeros.
pub fn to_pgm(map: &Tensor<f64>) -> Result<Vec<u8>> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("PGM needs a 2-D map, got {s:?}")));
    }
    let (min, max) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = max - min;
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if span > 0.0 {
            ((v - min) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// Intensity-weighted centroid `(row, col)` of a non-negative 2-D map.
pub fn centroid(map: &Tensor<f64>) -> (f64, f64) {
    let w = map.shape()[1];
    let total: f64 = map.data().iter().sum();
    if total <= 0.0 {
        let s = map.shape();
        return ((s[0] as f64 - 1.0) / 2.0, (s[1] as f64 - 1.0) / 2.0);
    }
    let (mut r, mut c) = (0.0, 0.0);
    for (i, &v) in map.data().iter().enumerate() {
        r += v * (i / w) as f64;
        c += v * (i % w) as f64;
    }
    (r / total, c / total)
}

/// Variance of map centroids across frames (sum of row and column variances).
pub fn centroid_variance(maps: &[Tensor<f64>]) -> f64 {
    if maps.is_empty() {
        return 0.0;
    }
    let cs: Vec<(f64, f64)> = maps.iter().map(centroid).collect();
    let n = cs.len() as f64;
    let (mr, mc) = cs.iter().fold((0.0, 0.0), |(a, b), &(r, c)| (a + r / n, b + c / n));
    cs.iter()
        .map(|&(r, c)| (r - mr).powi(2) + (c - mc).powi(2))
        .sum::<f64>()
        / n
}
