//! Flat `key=value` run configuration. Blank lines and `#` comments are ignored; unknown or
//! repeated keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use vidpad::data::SynthSpec;
use vidpad::model::ModelConfig;
use vidpad::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SynthSpec,
    pub train: TrainConfig,
    /// Existing dataset store; empty means generate from the data keys.
    pub data_dir: String,
    pub out_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: SynthSpec::default(),
            train: TrainConfig::default(),
            data_dir: String::new(),
            out_dir: String::new(),
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "frames",
    "height",
    "width",
    "cte_stride",
    "channels",
    "scales",
    "depth",
    "ffn_ratio",
    "n_train",
    "n_dev",
    "n_test",
    "source_frames",
    "texture_amp",
    "grid_period",
    "pulse_amp",
    "pulse_freq_min",
    "pulse_freq_max",
    "jitter_px",
    "noise_sigma",
    "steps",
    "batch",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "warmup_frac",
    "sample_mode",
    "augment",
    "data_dir",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("invalid value {value:?} for key {key}"))
}

pub fn parse_scales(value: &str, sep: char) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        bail!("empty scale set");
    }
    value
        .split(sep)
        .map(|s| parse::<usize>("scales", s.trim()))
        .collect()
}

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (m, d, t) = (&mut self.model, &mut self.data, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, value)?,
            "frames" => m.frames = parse(key, value)?,
            "height" => m.height = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "cte_stride" => m.cte_stride = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "scales" => m.scales = parse_scales(value, ',')?,
            "depth" => m.depth = parse(key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse(key, value)?,
            "n_train" => d.n_train = parse(key, value)?,
            "n_dev" => d.n_dev = parse(key, value)?,
            "n_test" => d.n_test = parse(key, value)?,
            "source_frames" => d.source_frames = parse(key, value)?,
            "texture_amp" => d.texture_amp = parse(key, value)?,
            "grid_period" => d.grid_period = parse(key, value)?,
            "pulse_amp" => d.pulse_amp = parse(key, value)?,
            "pulse_freq_min" => d.pulse_freq_min = parse(key, value)?,
            "pulse_freq_max" => d.pulse_freq_max = parse(key, value)?,
            "jitter_px" => d.jitter_px = parse(key, value)?,
            "noise_sigma" => d.noise_sigma = parse(key, value)?,
            "steps" => t.steps = parse(key, value)?,
            "batch" => t.batch = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "warmup_frac" => t.warmup_frac = parse(key, value)?,
            "sample_mode" => t.sample_mode = value.parse().map_err(|e| anyhow!("{e}"))?,
            "augment" => t.augment = parse(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        Some(match key {
            "seed" => self.seed.to_string(),
            "frames" => m.frames.to_string(),
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "cte_stride" => m.cte_stride.to_string(),
            "channels" => m.channels.to_string(),
            "scales" => join(&m.scales, ","),
            "depth" => m.depth.to_string(),
            "ffn_ratio" => m.ffn_ratio.to_string(),
            "n_train" => d.n_train.to_string(),
            "n_dev" => d.n_dev.to_string(),
            "n_test" => d.n_test.to_string(),
            "source_frames" => d.source_frames.to_string(),
            "texture_amp" => d.texture_amp.to_string(),
            "grid_period" => d.grid_period.to_string(),
            "pulse_amp" => d.pulse_amp.to_string(),
            "pulse_freq_min" => d.pulse_freq_min.to_string(),
            "pulse_freq_max" => d.pulse_freq_max.to_string(),
            "jitter_px" => d.jitter_px.to_string(),
            "noise_sigma" => d.noise_sigma.to_string(),
            "steps" => t.steps.to_string(),
            "batch" => t.batch.to_string(),
            "lr" => t.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "warmup_frac" => t.warmup_frac.to_string(),
            "sample_mode" => t.sample_mode.as_str().to_string(),
            "augment" => t.augment.to_string(),
            "data_dir" => self.data_dir.clone(),
            "out_dir" => self.out_dir.clone(),
            _ => return None,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {lineno}: expected key=value"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                bail!("config line {lineno}: duplicate key {key:?}");
            }
            cfg.set(key, value.trim())
                .with_context(|| format!("config line {lineno}"))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse_str(&text).with_context(|| path.display().to_string())
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for &key in KEYS {
            match key {
                "seed" => s.push_str("# run\n"),
                "frames" => s.push_str("# model\n"),
                "n_train" => s.push_str("# synthetic data\n"),
                "steps" => s.push_str("# optimization\n"),
                "data_dir" => s.push_str("# paths (empty data_dir generates the data in memory)\n"),
                _ => {}
            }
            writeln!(s, "{key}={}", self.get(key).expect("listed key")).expect("write to string");
        }
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }

    /// Data frames match the model's frame size.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            height: self.model.height,
            width: self.model.width,
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        if self.out_dir.is_empty() {
            bail!("missing required key out_dir");
        }
        Ok(Path::new(&self.out_dir))
    }
}

impl FromStr for RunConfig {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.000123456789").unwrap();
        cfg.set("scales", "1,2,4").unwrap();
        cfg.set("out_dir", "/tmp/x y").unwrap();
        cfg.set("augment", "false").unwrap();
        let back = RunConfig::parse_str(&cfg.dump()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse_str(&RunConfig::default().dump()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_settable_and_dumped() {
        let cfg = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            let mut c = RunConfig::default();
            c.set(key, &v).unwrap();
            assert!(cfg.dump().contains(&format!("\n{key}=")));
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::parse_str("# c\nframes=8\nbogus=1\n").unwrap_err();
        assert_eq!(format!("{err:#}"), "config line 3: unknown key \"bogus\"");
        let err = RunConfig::parse_str("frames=eight").unwrap_err();
        assert!(format!("{err:#}").starts_with("config line 1: invalid value"));
        let err = RunConfig::parse_str("\n\nframes 8").unwrap_err();
        assert!(format!("{err:#}").starts_with("config line 3"));
        assert!(RunConfig::parse_str("seed=1\nseed=2").is_err());
    }

    #[test]
    fn empty_scale_set_is_rejected() {
        assert!(RunConfig::parse_str("scales=").is_err());
        assert!(RunConfig::parse_str("scales=1,,2").is_err());
    }

    #[test]
    fn missing_out_dir_names_the_key() {
        let err = RunConfig::default().require_out_dir().unwrap_err();
        assert!(err.to_string().contains("out_dir"));
    }
}
