//! Deterministic synthetic spoof videos.
//!
//! Every clip starts from a smooth "face" image (low-frequency background plus a soft blob).
//! Bona fide clips add a global intensity oscillation over time and a small per-frame head
//! translation; attack clips add a high-frequency stripe grid and stay static. Both get
//! Gaussian pixel noise. The `i`-th bona fide and attack clip of a split share the same base
//! image, so with all cue amplitudes at zero the two classes are bitwise identical.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::embed::{Label, VideoClip};
use crate::rng::{self, Rng};
use crate::tensor::{io, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub source_frames: usize,
    /// Amplitude of the attack stripe grid.
    pub texture_amp: f64,
    /// Grid period in pixels.
    pub grid_period: usize,
    /// Amplitude of the bona fide intensity oscillation.
    pub pulse_amp: f64,
    /// Oscillation frequency range, cycles per source frame.
    pub pulse_freq_min: f64,
    pub pulse_freq_max: f64,
    /// Maximum per-frame head translation of bona fide clips, pixels.
    pub jitter_px: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_dev: 100,
            n_test: 100,
            height: 32,
            width: 32,
            source_frames: 16,
            texture_amp: 0.08,
            grid_period: 4,
            pulse_amp: 0.06,
            pulse_freq_min: 0.08,
            pulse_freq_max: 0.2,
            jitter_px: 1.0,
            noise_sigma: 0.04,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Only the temporal cues differ between classes.
    pub fn temporal_only(mut self) -> Self {
        self.texture_amp = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let amps = [
            ("texture_amp", self.texture_amp),
            ("pulse_amp", self.pulse_amp),
            ("jitter_px", self.jitter_px),
            ("noise_sigma", self.noise_sigma),
            ("pulse_freq_min", self.pulse_freq_min),
        ];
        for (name, v) in amps {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be a finite value >= 0")));
            }
        }
        if self.pulse_freq_max < self.pulse_freq_min {
            return Err(Error::Invalid("pulse_freq_max < pulse_freq_min".into()));
        }
        if self.height == 0 || self.width == 0 || self.source_frames == 0 || self.grid_period == 0 {
            return Err(Error::Invalid("extents and grid period must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?}"))),
        }
    }
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Attack => "attack",
        Label::BonaFide => "bonafide",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredClip {
    pub split: Split,
    /// Full-length source video, `source_frames×3×H×W`.
    pub clip: VideoClip<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipStore {
    pub clips: Vec<StoredClip>,
}

impl ClipStore {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoClip<f32>> {
        self.clips.iter().filter(move |c| c.split == split).map(|c| &c.clip)
    }

    pub fn split_vec(&self, split: Split) -> Vec<&VideoClip<f32>> {
        self.split(split).collect()
    }

    /// Writes `manifest.csv` (`clip_id,path,label,split`) and one `VPT1` file per clip.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("clips"))?;
        let mut manifest = String::from("clip_id,path,label,split\n");
        for c in &self.clips {
            let rel = format!("clips/{}.vpt", c.clip.clip_id);
            io::save(&c.clip.frames, dir.join(&rel))?;
            writeln!(
                manifest,
                "{},{},{},{}",
                c.clip.clip_id,
                rel,
                c.clip.label.index(),
                c.split.as_str()
            )
            .expect("write to string");
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("manifest.csv"))?;
        let mut lines = text.lines();
        if lines.next() != Some("clip_id,path,label,split") {
            return Err(Error::Format("manifest.csv: bad header".into()));
        }
        let mut clips = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("manifest.csv line {}: expected 4 fields", i + 2)));
            }
            let label = f[2]
                .parse::<usize>()
                .ok()
                .and_then(Label::from_index)
                .ok_or_else(|| Error::Format(format!("manifest.csv line {}: bad label", i + 2)))?;
            let frames = io::load::<f32>(dir.join(f[1]))?;
            clips.push(StoredClip {
                split: f[3].parse()?,
                clip: VideoClip::new(frames, label, f[0])?,
            });
        }
        Ok(Self { clips })
    }
}

/// Per-clip appearance shared by the bona fide and attack clip of one index.
struct Base {
    brightness: f64,
    gains: [f64; 3],
    waves: Vec<(f64, f64, f64, f64)>, // amplitude, fy, fx, phase
    blob: (f64, f64, f64, f64),       // amplitude, cy, cx, sigma
}

impl Base {
    fn draw(r: &mut Rng, h: usize, w: usize) -> Self {
        let brightness = r.random_range(0.3..0.6);
        let gains = [
            r.random_range(0.85..1.15),
            r.random_range(0.85..1.15),
            r.random_range(0.85..1.15),
        ];
        let waves = (0..3)
            .map(|_| {
                (
                    r.random_range(0.02..0.08),
                    r.random_range(0..=2) as f64 / h as f64,
                    r.random_range(0..=2) as f64 / w as f64,
                    r.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let blob = (
            r.random_range(0.15..0.3),
            h as f64 / 2.0 + r.random_range(-3.0..3.0),
            w as f64 / 2.0 + r.random_range(-3.0..3.0),
            r.random_range(0.18..0.26) * w.min(h) as f64,
        );
        Self {
            brightness,
            gains,
            waves,
            blob,
        }
    }

    fn at(&self, y: f64, x: f64) -> f64 {
        let mut v = self.brightness;
        for &(a, fy, fx, ph) in &self.waves {
            v += a * (2.0 * PI * (fy * y + fx * x) + ph).cos();
        }
        let (a, cy, cx, s) = self.blob;
        v + a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()
    }
}

fn render(
    spec: &SynthSpec,
    base: &Base,
    label: Label,
    r: &mut Rng,
) -> Tensor<f32> {
    let (s, h, w) = (spec.source_frames, spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let freq = if spec.pulse_freq_max > spec.pulse_freq_min {
        r.random_range(spec.pulse_freq_min..spec.pulse_freq_max)
    } else {
        spec.pulse_freq_min
    };
    let pulse_phase = r.random_range(0.0..2.0 * PI);
    let grid_phase = (r.random_range(0.0..2.0 * PI), r.random_range(0.0..2.0 * PI));
    let p = 2.0 * PI / spec.grid_period as f64;
    let grid: Vec<f64> = match label {
        Label::Attack => (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                spec.texture_amp * 0.5 * ((p * x + grid_phase.0).cos() + (p * y + grid_phase.1).cos())
            })
            .collect(),
        Label::BonaFide => vec![0.0; h * w],
    };
    let image = |dy: f64, dx: f64| -> Vec<f64> {
        (0..h * w)
            .map(|i| base.at((i / w) as f64 - dy, (i % w) as f64 - dx))
            .collect()
    };
    let still = image(0.0, 0.0);
    let mut data = Vec::with_capacity(s * 3 * h * w);
    for f in 0..s {
        let (moved, pulse) = match label {
            Label::BonaFide => {
                let dy = spec.jitter_px * r.random_range(-1.0..=1.0);
                let dx = spec.jitter_px * r.random_range(-1.0..=1.0);
                let pulse = spec.pulse_amp * (2.0 * PI * freq * f as f64 + pulse_phase).sin();
                (Some(image(dy, dx)), pulse)
            }
            Label::Attack => (None, 0.0),
        };
        let img = moved.as_deref().unwrap_or(&still);
        for gain in base.gains {
            for (&b, &g) in img.iter().zip(&grid) {
                let mut v = gain * b + pulse + g;
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(r);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::new(vec![s, 3, h, w], data).expect("consistent extents")
}

/// Generates all splits; a pure function of `spec`.
pub fn generate_dataset(spec: &SynthSpec) -> Result<ClipStore> {
    spec.validate()?;
    let mut clips = Vec::new();
    for split in Split::ALL {
        let n = match split {
            Split::Train => spec.n_train,
            Split::Dev => spec.n_dev,
            Split::Test => spec.n_test,
        };
        for i in 0..n {
            let mut base_rng = rng::indexed(spec.seed, &format!("data/{}/base", split.as_str()), i as u64);
            let base = Base::draw(&mut base_rng, spec.height, spec.width);
            for label in [Label::BonaFide, Label::Attack] {
                let stream = format!("data/{}/{}", split.as_str(), label_name(label));
                let mut r = rng::indexed(spec.seed, &stream, i as u64);
                let frames = render(spec, &base, label, &mut r);
                let id = format!("{}-{}-{:04}", split.as_str(), label_name(label), i);
                clips.push(StoredClip {
                    split,
                    clip: VideoClip::new(frames, label, id)?,
                });
            }
        }
    }
    Ok(ClipStore { clips })
}
