//! Quick invariant suite behind the `selftest` command. Each check is small enough to run in
//! well under a second.

use std::fmt;

use crate::ablation::{train_model, Experiment};
use crate::cost::count_cost;
use crate::data::{generate_dataset, Split, SynthSpec};
use crate::embed::{Label, VideoClip};
use crate::metrics::{compute_metrics, Scored};
use crate::model::{infer, randomize_params, ModelConfig, ModelParams};
use crate::msmhsa::{partition_patches, unpartition};
use crate::tensor::{Tape, Tensor};
use crate::train::TrainConfig;
use crate::verify::{check_gradients, random_tensor};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Invalid(msg.into()))
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        frames: 3,
        height: 16,
        width: 16,
        channels: 6,
        depth: 1,
        ffn_ratio: 2,
        seed: 5,
        ..ModelConfig::default()
    }
}

fn softmax_rows() -> Result<String> {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(random_tensor(&[16, 33], 1, 30.0));
    let y = tape.softmax(x, 1)?;
    let worst = tape
        .value(y)
        .data()
        .chunks(33)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-8, format!("row sum off by {worst:e}"))?;
    Ok(format!("max |row sum - 1| = {worst:e}"))
}

fn partition_round_trip() -> Result<String> {
    for (t, l) in [(1, 1), (2, 2), (4, 4), (3, 2)] {
        let mut tape = Tape::<f64>::new();
        let src = random_tensor(&[t, 6, 8, 8], 2, 1.0);
        let x = tape.constant(src.clone());
        let p = partition_patches(&mut tape, x, l)?;
        ensure(p.len() == t * l * l, format!("N = {} for T={t}, l={l}", p.len()))?;
        let back = unpartition(&mut tape, &p)?;
        ensure(tape.value(back) == &src, format!("round trip differs for T={t}, l={l}"))?;
    }
    Ok("bitwise identical, N = T·l²".into())
}

fn permutation_invariance() -> Result<String> {
    let cfg = tiny_model();
    let mut params = ModelParams::<f64>::init(&cfg)?;
    randomize_params(&mut params, 3, 0.3);
    let frames = random_tensor(&[3, 3, 16, 16], 4, 1.0);
    let per = frames.numel() / 3;
    let mut permuted = Vec::with_capacity(frames.numel());
    for f in [2, 0, 1] {
        permuted.extend_from_slice(&frames.data()[f * per..(f + 1) * per]);
    }
    let a = VideoClip::new(frames.clone(), Label::Attack, "a")?;
    let b = VideoClip::new(Tensor::new(frames.shape().to_vec(), permuted)?, Label::Attack, "b")?;
    let (la, _) = infer(&a, &params, &cfg, false)?;
    let (lb, _) = infer(&b, &params, &cfg, false)?;
    let d = la.max_abs_diff(&lb);
    ensure(d <= 1e-6, format!("logits moved by {d:e}"))?;
    Ok(format!("max logit change {d:e}"))
}

fn gradient_spot_check() -> Result<String> {
    let inputs = [
        random_tensor(&[2, 3, 4], 5, 1.0),
        random_tensor(&[4, 5], 6, 1.0),
        random_tensor(&[2, 3, 5], 7, 1.0),
    ];
    let report = check_gradients(&inputs, |tape, v| {
        let m = tape.matmul(v[0], v[1])?;
        let s = tape.softmax(m, 2)?;
        let g = tape.gelu(s);
        let w = tape.mul(g, v[2])?;
        Ok(tape.sum(w))
    })?;
    ensure(report.max_rel_err < 1e-4, format!("rel err {:e}", report.max_rel_err))?;
    Ok(format!("{} entries, max rel err {:e}", report.checked, report.max_rel_err))
}

fn deterministic_training() -> Result<String> {
    let spec = SynthSpec {
        n_train: 3,
        n_dev: 1,
        n_test: 1,
        height: 16,
        width: 16,
        source_frames: 4,
        ..SynthSpec::default()
    };
    let exp = Experiment {
        model: tiny_model(),
        train: TrainConfig {
            steps: 3,
            batch: 2,
            ..TrainConfig::default()
        },
    };
    let run = || -> Result<String> {
        let store = generate_dataset(&spec)?;
        let (_, log) = train_model(&exp, &store.split_vec(Split::Train), |_| {})?;
        Ok(log.to_csv())
    };
    ensure(run()? == run()?, "training logs differ")?;
    Ok("identical logs from identical seeds".into())
}

fn metric_arithmetic() -> Result<String> {
    let acer = crate::metrics::acer(1.98, 0.40);
    ensure(format!("{acer:.2}") == "1.19", format!("acer {acer}"))?;
    let scores: Vec<Scored> = [(0.1, Label::Attack), (0.9, Label::BonaFide)]
        .into_iter()
        .map(|(s, l)| Scored::new(s, l))
        .collect();
    let r = compute_metrics(&scores, 0.5)?;
    ensure(r.acer == 0.0, "separated scores misclassified")?;
    Ok("ACER(1.98, 0.40) = 1.19".into())
}

fn cost_accounting() -> Result<String> {
    let cfg = ModelConfig {
        scales: vec![1],
        ..ModelConfig::default()
    };
    let a = count_cost(&cfg)?;
    let b = count_cost(&ModelConfig {
        frames: cfg.frames * 2,
        ..cfg.clone()
    })?;
    ensure(
        b.attention_flops() == 4 * a.attention_flops(),
        "attention cost does not quadruple",
    )?;
    let inventory = ModelParams::<f32>::init(&cfg)?.count() as u64;
    ensure(a.total_params() == inventory, "params differ from inventory")?;
    Ok(format!("{inventory} params, attention x4 when T doubles"))
}

pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<String>); 7] = [
        ("softmax-rows", softmax_rows),
        ("partition-round-trip", partition_round_trip),
        ("frame-permutation", permutation_invariance),
        ("gradients", gradient_spot_check),
        ("determinism", deterministic_training),
        ("metrics", metric_arithmetic),
        ("cost", cost_accounting),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(detail) => CheckResult {
                name,
                passed: true,
                detail,
            },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{c}");
        }
    }
}
