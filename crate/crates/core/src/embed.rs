//! Convolutional token embedding, convolutional Q/K/V projection and the convolutional
//! feed-forward block. No linear projections and no positional parameters anywhere.

use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

/// Class of a clip. Scores are probabilities of [`Label::BonaFide`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Attack = 0,
    BonaFide = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Attack),
            1 => Some(Label::BonaFide),
            _ => None,
        }
    }
}

/// `T×3×H×W` frames in `[0,1]` with a label.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<S> {
    pub frames: Tensor<S>,
    pub label: Label,
    pub clip_id: String,
}

impl<S: Scalar> VideoClip<S> {
    pub fn new(frames: Tensor<S>, label: Label, clip_id: impl Into<String>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Invalid(format!(
                "clip frames must be T×3×H×W, got {s:?}"
            )));
        }
        Ok(Self {
            frames,
            label,
            clip_id: clip_id.into(),
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }
}

/// `T×C_m×H_m×W_m` token map.
#[derive(Clone, Copy, Debug)]
pub struct TokenMap {
    pub map: Var,
}

/// Query, key and value maps, each `T×C_A×H_A×W_A`.
#[derive(Clone, Copy, Debug)]
pub struct QkvMaps {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionParams {
    pub q: ConvParams,
    pub k: ConvParams,
    pub v: ConvParams,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub fc1: ConvParams,
    pub fc2: ConvParams,
}

/// Tokenizes every frame with one non-overlapping convolution (kernel = stride).
pub fn conv_token_embed<S: Scalar>(
    tape: &mut Tape<S>,
    frames: Var,
    params: ConvParams,
    stride: usize,
) -> Result<TokenMap> {
    let shape = tape.shape(frames).to_vec();
    if shape.len() != 4 {
        return Err(Error::Invalid(format!("expected T×3×H×W frames, got {shape:?}")));
    }
    for &extent in &shape[2..] {
        if stride == 0 || extent % stride != 0 {
            return Err(Error::Indivisible {
                op: "conv_token_embed",
                extent,
                divisor: stride,
            });
        }
    }
    let w = tape.shape(params.weight);
    if w.len() != 4 || w[2] != stride || w[3] != stride {
        return Err(Error::Invalid(format!(
            "token embedding kernel must be {stride}×{stride}, got {w:?}"
        )));
    }
    let map = tape.conv2d(frames, params.weight, Some(params.bias), stride, 0)?;
    Ok(TokenMap { map })
}

/// Three independent 3×3, stride-1, pad-1 convolutions.
pub fn conv_project<S: Scalar>(
    tape: &mut Tape<S>,
    x: TokenMap,
    params: &ProjectionParams,
) -> Result<QkvMaps> {
    let mut proj = |p: ConvParams| tape.conv2d(x.map, p.weight, Some(p.bias), 1, 1);
    let q = proj(params.q)?;
    let k = proj(params.k)?;
    let v = proj(params.v)?;
    Ok(QkvMaps { q, k, v })
}

/// 1×1 conv → GELU → 1×1 conv.
pub fn conv_ffn<S: Scalar>(tape: &mut Tape<S>, y: Var, params: &FfnParams) -> Result<Var> {
    let h = tape.conv2d(y, params.fc1.weight, Some(params.fc1.bias), 1, 0)?;
    let h = tape.gelu(h);
    tape.conv2d(h, params.fc2.weight, Some(params.fc2.bias), 1, 0)
}
