//! Seeded train/evaluate runs and the two ablation grids (scale subsets, clip length).
//!
//! One seed drives everything through named streams: `init` for parameters, `batches` for
//! minibatch selection, `sampling` for frame indices and `augment` for photometric jitter.
//! Grid cells share the seed, so only the ablated factor changes between rows.

use crate::data::{ClipStore, Split};
use crate::embed::VideoClip;
use crate::metrics::{compute_metrics, report_csv, select_threshold, MetricReport, Scored};
use crate::model::{predict_score, ModelConfig, ModelParams};
use crate::rng;
use crate::train::{augment, lr_at, sample_frames, LogRow, SampleMode, TrainConfig, TrainLog, Trainer};
use crate::{Error, Result};

use rand::Rng as _;

/// The seven scale subsets of `{1, 2, 4}`, singles first.
pub const SCALE_SUBSETS: [&[usize]; 7] = [&[1], &[2], &[4], &[1, 2], &[1, 4], &[2, 4], &[1, 2, 4]];

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    /// `model.seed` is the master seed of the run.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub dev_threshold: f64,
    pub report: MetricReport,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub params: ModelParams<f32>,
    pub log: TrainLog,
    pub eval: Evaluation,
}

/// Trains from the `init` stream on `clips` (full-length sources).
pub fn train_model(
    exp: &Experiment,
    clips: &[&VideoClip<f32>],
    mut on_step: impl FnMut(&LogRow),
) -> Result<(ModelParams<f32>, TrainLog)> {
    exp.model.validate()?;
    if clips.is_empty() && exp.train.steps > 0 {
        return Err(Error::Invalid("no training clips".into()));
    }
    let seed = exp.model.seed;
    let params = ModelParams::init(&exp.model)?;
    let mut trainer = Trainer::new(exp.model.clone(), params, exp.train.adam);
    let mut batches = rng::stream(seed, "batches");
    let mut sampling = rng::stream(seed, "sampling");
    let mut aug = rng::stream(seed, "augment");
    let mut log = TrainLog::default();
    for step in 0..exp.train.steps {
        let mut batch = Vec::with_capacity(exp.train.batch);
        for _ in 0..exp.train.batch {
            let src = clips[batches.random_range(0..clips.len())];
            let clip = sample_frames(src, exp.model.frames, exp.train.sample_mode, &mut sampling)?;
            batch.push(if exp.train.augment { augment(&clip, &mut aug) } else { clip });
        }
        let lr = lr_at(step, exp.train.steps, exp.train.lr, exp.train.warmup_frac);
        let loss = trainer.train_step(&batch, lr)?;
        let row = LogRow { step, loss, lr };
        on_step(&row);
        log.rows.push(row);
    }
    Ok((trainer.params, log))
}

/// Bona fide probabilities of uniformly sampled clips.
pub fn score_clips<'a>(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    clips: impl IntoIterator<Item = &'a VideoClip<f32>>,
) -> Result<Vec<Scored>> {
    // uniform sampling never draws from the stream
    let mut unused = rng::stream(cfg.seed, "eval");
    clips
        .into_iter()
        .map(|c| {
            let clip = sample_frames(c, cfg.frames, SampleMode::Uniform, &mut unused)?;
            Ok(Scored::new(predict_score(&clip, params, cfg)?, c.label))
        })
        .collect()
}

/// Threshold on `dev`, report on `test`.
pub fn evaluate_split(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    store: &ClipStore,
    dev: Split,
    test: Split,
) -> Result<Evaluation> {
    let dev_scores = score_clips(params, cfg, store.split(dev))?;
    let dev_threshold = select_threshold(&dev_scores)?;
    let test_scores = score_clips(params, cfg, store.split(test))?;
    Ok(Evaluation {
        dev_threshold,
        report: compute_metrics(&test_scores, dev_threshold)?,
    })
}

pub fn run_experiment(exp: &Experiment, store: &ClipStore) -> Result<ExperimentResult> {
    let train = store.split_vec(Split::Train);
    let (params, log) = train_model(exp, &train, |_| {})?;
    let eval = evaluate_split(&params, &exp.model, store, Split::Dev, Split::Test)?;
    Ok(ExperimentResult { params, log, eval })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub run_id: String,
    pub report: MetricReport,
}

pub fn scales_id(scales: &[usize]) -> String {
    let parts: Vec<String> = scales.iter().map(|l| l.to_string()).collect();
    format!("scales={}", parts.join("+"))
}

pub fn ablation_scales(base: &Experiment, store: &ClipStore, subsets: &[Vec<usize>]) -> Result<Vec<AblationRow>> {
    subsets
        .iter()
        .map(|scales| {
            let mut exp = base.clone();
            exp.model.scales = scales.clone();
            let r = run_experiment(&exp, store)?;
            Ok(AblationRow {
                run_id: scales_id(scales),
                report: r.eval.report,
            })
        })
        .collect()
}

pub fn ablation_clip_length(base: &Experiment, store: &ClipStore, grid: &[usize]) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&t| {
            let mut exp = base.clone();
            exp.model.frames = t;
            let r = run_experiment(&exp, store)?;
            Ok(AblationRow {
                run_id: format!("frames={t}"),
                report: r.eval.report,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    report_csv(rows.iter().map(|r| (r.run_id.as_str(), &r.report)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthSpec};

    fn toy() -> (Experiment, ClipStore) {
        let spec = SynthSpec {
            n_train: 4,
            n_dev: 3,
            n_test: 3,
            height: 16,
            width: 16,
            source_frames: 4,
            ..SynthSpec::default()
        };
        let exp = Experiment {
            model: ModelConfig {
                frames: 2,
                height: 16,
                width: 16,
                channels: 6,
                depth: 1,
                ffn_ratio: 2,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 3,
                batch: 2,
                ..TrainConfig::default()
            },
        };
        (exp, generate_dataset(&spec).unwrap())
    }

    #[test]
    fn runs_are_reproducible() {
        let (exp, store) = toy();
        let a = run_experiment(&exp, &store).unwrap();
        let b = run_experiment(&exp, &store).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.params, b.params);
        assert_eq!(a.log.rows.len(), 3);
        let r = &a.eval.report;
        assert_eq!(r.acer, (r.apcer + r.bpcer) / 2.0);
    }

    #[test]
    fn grids_emit_one_row_per_cell() {
        let (mut exp, store) = toy();
        exp.train.steps = 1;
        let rows = ablation_clip_length(&exp, &store, &[1, 2, 4]).unwrap();
        let ids: Vec<&str> = rows.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, ["frames=1", "frames=2", "frames=4"]);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 4);

        let subsets: Vec<Vec<usize>> = vec![vec![1], vec![1, 2]];
        let rows = ablation_scales(&exp, &store, &subsets).unwrap();
        assert_eq!(rows[1].run_id, "scales=1+2");
        assert!(ablation_scales(&exp, &store, &[vec![]]).is_err());
    }
}
