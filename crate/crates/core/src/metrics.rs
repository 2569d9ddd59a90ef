//! Presentation-attack detection error rates and dev-set threshold selection.
//!
//! A sample is accepted as bona fide iff its score is at or above the threshold. All rates
//! are reported in percent.

use std::fmt::Write as _;

use crate::embed::Label;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub label: Label,
}

impl Scored {
    pub fn new(score: f64, label: Label) -> Self {
        Self { score, label }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub attack_accepted: usize,
    pub attack_rejected: usize,
    pub bonafide_accepted: usize,
    pub bonafide_rejected: usize,
}

impl Confusion {
    pub fn attacks(&self) -> usize {
        self.attack_accepted + self.attack_rejected
    }

    pub fn bonafide(&self) -> usize {
        self.bonafide_accepted + self.bonafide_rejected
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub threshold: f64,
    pub counts: Confusion,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    /// Half total error: mean of false-accept and false-reject rates. With attacks as the
    /// impostor class this coincides with ACER at the same threshold.
    pub hter: f64,
}

pub fn acer(apcer: f64, bpcer: f64) -> f64 {
    (apcer + bpcer) / 2.0
}

fn confusion(samples: &[Scored], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for s in samples {
        let accepted = s.score >= threshold;
        match (s.label, accepted) {
            (Label::Attack, true) => c.attack_accepted += 1,
            (Label::Attack, false) => c.attack_rejected += 1,
            (Label::BonaFide, true) => c.bonafide_accepted += 1,
            (Label::BonaFide, false) => c.bonafide_rejected += 1,
        }
    }
    c
}

fn check_classes(samples: &[Scored]) -> Result<()> {
    let has = |l| samples.iter().any(|s| s.label == l);
    if has(Label::Attack) && has(Label::BonaFide) {
        Ok(())
    } else {
        Err(Error::SingleClass)
    }
}

pub fn compute_metrics(samples: &[Scored], threshold: f64) -> Result<MetricReport> {
    check_classes(samples)?;
    let counts = confusion(samples, threshold);
    let apcer = 100.0 * counts.attack_accepted as f64 / counts.attacks() as f64;
    let bpcer = 100.0 * counts.bonafide_rejected as f64 / counts.bonafide() as f64;
    Ok(MetricReport {
        threshold,
        counts,
        apcer,
        bpcer,
        acer: acer(apcer, bpcer),
        hter: (apcer + bpcer) / 2.0,
    })
}

/// Equal-error-rate threshold: among midpoints of consecutive distinct scores, the one that
/// minimizes `|APCER − BPCER|`; ties go to the lower threshold. With a single distinct score,
/// that score.
pub fn select_threshold(dev: &[Scored]) -> Result<f64> {
    check_classes(dev)?;
    if dev.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Invalid("non-finite score".into()));
    }
    let mut scores: Vec<f64> = dev.iter().map(|s| s.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    scores.dedup();
    if scores.len() == 1 {
        return Ok(scores[0]);
    }
    let n_attack = dev.iter().filter(|s| s.label == Label::Attack).count();
    let n_bona = dev.len() - n_attack;

    // Sweep: going up, each distinct score moves from accepted to rejected.
    let mut sorted: Vec<&Scored> = dev.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite"));
    let (mut attack_below, mut bona_below) = (0usize, 0usize);
    let mut j = 0;
    // |APCER − BPCER| scaled by n_attack·n_bona, so ties are exact
    let mut best: Option<(usize, f64)> = None;
    for w in scores.windows(2) {
        while j < sorted.len() && sorted[j].score <= w[0] {
            match sorted[j].label {
                Label::Attack => attack_below += 1,
                Label::BonaFide => bona_below += 1,
            }
            j += 1;
        }
        let gap = ((n_attack - attack_below) * n_bona).abs_diff(bona_below * n_attack);
        let t = w[0] + (w[1] - w[0]) / 2.0;
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, t));
        }
    }
    Ok(best.expect("at least two distinct scores").1)
}

/// `run_id,threshold,apcer,bpcer,acer,hter`, floats in shortest round-trip form.
pub fn report_csv<'a>(rows: impl IntoIterator<Item = (&'a str, &'a MetricReport)>) -> String {
    let mut s = String::from("run_id,threshold,apcer,bpcer,acer,hter\n");
    for (id, r) in rows {
        writeln!(s, "{id},{},{},{},{},{}", r.threshold, r.apcer, r.bpcer, r.acer, r.hter)
            .expect("write to string");
    }
    s
}
