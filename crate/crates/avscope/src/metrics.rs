//! Evaluation metrics: scale-invariant SNR, off-screen suppression,
//! power-weighted ranking AUC, the best-assignment oracle SI-SNR, and
//! dataset-level aggregation into reports.
//!
//! All dB values are capped to ±60 so degenerate cases stay finite and
//! comparable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ExampleKind;
use crate::separation::AssignmentMatrix;

pub const DB_CAP: f64 = 60.0;

fn power(w: &[f64]) -> f64 {
    w.iter().map(|v| v * v).sum()
}

fn cap_db(v: f64) -> f64 {
    v.clamp(-DB_CAP, DB_CAP)
}

/// Scale-invariant SNR in dB, capped to ±60. The estimate is first
/// projected onto the reference (α = ⟨est,ref⟩/‖ref‖²), so any rescaling
/// of the estimate cancels. Returns the value and a degeneracy flag set
/// for an all-zero estimate.
pub fn si_snr(reference: &[f64], estimate: &[f64]) -> Result<(f64, bool)> {
    if reference.len() != estimate.len() {
        return Err(Error::shape(format!(
            "si_snr lengths differ: {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_pow = power(reference);
    if ref_pow == 0.0 {
        return Err(Error::Data("si_snr reference is silent".to_string()));
    }
    let est_pow = power(estimate);
    if est_pow == 0.0 {
        return Ok((-DB_CAP, true));
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / ref_pow;
    let target_pow = alpha * alpha * ref_pow;
    let err_pow: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| {
            let d = alpha * r - e;
            d * d
        })
        .sum();
    let db = if err_pow == 0.0 {
        DB_CAP
    } else if target_pow == 0.0 {
        -DB_CAP
    } else {
        cap_db(10.0 * (target_pow / err_pow).log10())
    };
    Ok((db, false))
}

/// Off-screen suppression ratio in dB: how much quieter the on-screen
/// estimate is than the input mixture. Capped to ±60.
pub fn osr(input: &[f64], on_estimate: &[f64]) -> Result<f64> {
    if input.len() != on_estimate.len() {
        return Err(Error::shape(format!(
            "osr lengths differ: {} vs {}",
            input.len(),
            on_estimate.len()
        )));
    }
    let in_pow = power(input);
    if in_pow == 0.0 {
        return Err(Error::Data("osr input is silent".to_string()));
    }
    let est_pow = power(on_estimate).max(in_pow * 1e-6);
    Ok(cap_db(10.0 * (in_pow / est_pow).log10()))
}

/// Probability that a random positive outranks a random negative, with
/// each example weighted by `powers`; tied scores count one half. `None`
/// when either class is missing.
pub fn power_weighted_auc(scores: &[f64], labels: &[f64], powers: &[f64]) -> Result<Option<f64>> {
    let n = scores.len();
    if labels.len() != n || powers.len() != n {
        return Err(Error::shape("auc inputs must have equal lengths".to_string()));
    }
    if powers.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Data("auc powers must be positive".to_string()));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Data("auc labels must be binary".to_string()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let total_pos: f64 = order.iter().filter(|&&i| labels[i] == 1.0).map(|&i| powers[i]).sum();
    let total_neg: f64 = order.iter().filter(|&&i| labels[i] == 0.0).map(|&i| powers[i]).sum();
    if total_pos == 0.0 || total_neg == 0.0 {
        return Ok(None);
    }
    // One pass over tie groups in ascending score order: every positive in
    // a group beats all negatives strictly below and half-ties the group's.
    let mut numer = 0.0;
    let mut neg_below = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        let mut group_pos = 0.0;
        let mut group_neg = 0.0;
        while j < n && scores[order[j]] == scores[order[i]] {
            let idx = order[j];
            if labels[idx] == 1.0 {
                group_pos += powers[idx];
            } else {
                group_neg += powers[idx];
            }
            j += 1;
        }
        numer += group_pos * (neg_below + 0.5 * group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(Some(numer / (total_pos * total_neg)))
}

/// Oracle SI-SNR: reconstruct the on-screen audio from the best
/// assignment's on-screen row and score it against the reference. An upper
/// bound that ignores the classifier.
pub fn mixit_star(
    estimates: &[Vec<f64>],
    on_reference: &[f64],
    assignment: &AssignmentMatrix,
) -> Result<f64> {
    if estimates.len() != assignment.sources() {
        return Err(Error::shape(format!(
            "{} estimates vs {}-source assignment",
            estimates.len(),
            assignment.sources()
        )));
    }
    let mut recon = vec![0.0; on_reference.len()];
    for (m, est) in estimates.iter().enumerate() {
        if assignment.is_on_screen(m) {
            for (r, &v) in recon.iter_mut().zip(est) {
                *r += v;
            }
        }
    }
    Ok(si_snr(on_reference, &recon)?.0)
}

/// Mean squared error between probabilities and binary labels.
pub fn brier_score(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::shape("brier inputs must be non-empty and equal length".to_string()));
    }
    Ok(scores.iter().zip(labels).map(|(s, l)| (s - l) * (s - l)).sum::<f64>() / scores.len() as f64)
}

// ── aggregation ──────────────────────────────────────────────────────────────

/// Per-example measurements collected during evaluation. Fields are `None`
/// where the metric does not apply to the example's kind.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub kind: ExampleKind,
    pub scores: Vec<f64>,
    pub labels: Vec<f64>,
    pub powers: Vec<f64>,
    pub on_si_snr: Option<f64>,
    pub osr: Option<f64>,
    pub mixit_star: Option<f64>,
    pub input_si_snr: Option<f64>,
}

/// Value list with its median and mean.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Summary {
    pub values: Vec<f64>,
    pub median: Option<f64>,
    pub mean: Option<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        let mean = values.iter().sum::<f64>() / n as f64;
        Self { values, median: Some(median), mean: Some(mean) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub examples: usize,
    pub auc: Option<f64>,
    pub on_si_snr_db: Summary,
    pub osr_db: Summary,
    pub mixit_star_db: Summary,
    pub input_si_snr_db: Summary,
}

impl ConditionReport {
    fn build(examples: &[&ExampleMetrics]) -> Result<Self> {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut powers = Vec::new();
        for ex in examples {
            scores.extend_from_slice(&ex.scores);
            labels.extend_from_slice(&ex.labels);
            powers.extend_from_slice(&ex.powers);
        }
        let auc = if scores.is_empty() { None } else { power_weighted_auc(&scores, &labels, &powers)? };
        let collect = |f: &dyn Fn(&ExampleMetrics) -> Option<f64>| -> Summary {
            Summary::of(examples.iter().filter_map(|e| f(e)).collect())
        };
        Ok(Self {
            examples: examples.len(),
            auc,
            on_si_snr_db: collect(&|e| e.on_si_snr),
            osr_db: collect(&|e| e.osr),
            mixit_star_db: collect(&|e| e.mixit_star),
            input_si_snr_db: collect(&|e| e.input_si_snr),
        })
    }
}

/// Dataset-level report, split into the MoM and single-mixture conditions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mom: ConditionReport,
    pub single: ConditionReport,
}

impl MetricsReport {
    pub fn aggregate(examples: &[ExampleMetrics]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("evaluation over an empty dataset".to_string()));
        }
        let mom: Vec<&ExampleMetrics> = examples.iter().filter(|e| e.kind.is_mom()).collect();
        let single: Vec<&ExampleMetrics> = examples.iter().filter(|e| !e.kind.is_mom()).collect();
        Ok(Self { mom: ConditionReport::build(&mom)?, single: ConditionReport::build(&single)? })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("cannot parse metrics report: {e}")))
    }

    /// Aligned table, one row per condition.
    pub fn to_table(&self) -> String {
        fn fmt_auc(v: Option<f64>) -> String {
            v.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"))
        }
        fn fmt_db(s: &Summary) -> String {
            s.median.map_or_else(|| "-".to_string(), |m| format!("{m:.1} dB"))
        }
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>6} {:>12} {:>10} {:>10} {:>14}\n",
            "condition", "examples", "AUC", "On SI-SNR", "Off OSR", "MixIT*", "input SI-SNR"
        ));
        for (name, c) in [("mom", &self.mom), ("single", &self.single)] {
            out.push_str(&format!(
                "{:<10} {:>8} {:>6} {:>12} {:>10} {:>10} {:>14}\n",
                name,
                c.examples,
                fmt_auc(c.auc),
                fmt_db(&c.on_si_snr_db),
                fmt_db(&c.osr_db),
                fmt_db(&c.mixit_star_db),
                fmt_db(&c.input_si_snr_db),
            ));
        }
        out
    }
}
