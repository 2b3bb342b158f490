//! Isotonic calibration of on-screen probabilities.
//!
//! A small labeled set turns raw classifier scores into calibrated
//! probabilities via weighted pool-adjacent-violators, stored as a monotone
//! piecewise-linear map. Calibration is a monotone transform, so it can
//! never change how sources rank against each other.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::ExampleKind;

/// One labeled calibration point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationExample {
    /// Raw on-screen probability in [0, 1].
    pub score: f64,
    /// 1.0 for on-screen, 0.0 otherwise.
    pub label: f64,
    pub weight: f64,
}

impl CalibrationExample {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) || !self.score.is_finite() {
            return Err(Error::Data(format!("calibration score {} outside [0, 1]", self.score)));
        }
        if self.label != 0.0 && self.label != 1.0 {
            return Err(Error::Data(format!("calibration label {} is not binary", self.label)));
        }
        if !(self.weight > 0.0) {
            return Err(Error::Data(format!("calibration weight {} must be positive", self.weight)));
        }
        Ok(())
    }
}

/// Monotone map from raw scores to calibrated probabilities: linear
/// interpolation between fitted points, clamped outside the score range.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationMap {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl CalibrationMap {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::Data("calibration map needs matching, non-empty tables".to_string()));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("calibration breakpoints must strictly increase".to_string()));
        }
        if values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("calibration values must be non-decreasing".to_string()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("calibration values must stay in [0, 1]".to_string()));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Calibrate one score.
    pub fn apply(&self, score: f64) -> f64 {
        let b = &self.breakpoints;
        let v = &self.values;
        if score <= b[0] {
            return v[0];
        }
        if score >= b[b.len() - 1] {
            return v[v.len() - 1];
        }
        let hi = b.partition_point(|&x| x < score);
        let lo = hi - 1;
        if b[hi] == score {
            return v[hi];
        }
        // v[lo] + λ·Δ with the result pinned to [v[lo], v[hi]]: every step
        // is monotone in floating point, so the map never regresses by an
        // ulp the way the usual two-product blend can.
        let lambda = ((score - b[lo]) / (b[hi] - b[lo])).clamp(0.0, 1.0);
        (v[lo] + lambda * (v[hi] - v[lo])).clamp(v[lo], v[hi])
    }

    /// Calibrate a score list elementwise.
    pub fn apply_all(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply(s)).collect()
    }

    // Text format: a header line, then one "score value" pair per line.
    // Numbers print in Rust's shortest round-trip form, so a parse-write
    // cycle is byte-identical.

    pub const HEADER: &'static str = "# avscope-calibration v1";

    pub fn to_text(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for (b, v) in self.breakpoints.iter().zip(&self.values) {
            out.push_str(&format!("{b} {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header.trim() != Self::HEADER {
            return Err(Error::Data(format!("unexpected calibration header '{header}'")));
        }
        let mut breakpoints = Vec::new();
        let mut values = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad calibration row {}: '{line}'", i + 2)))
            };
            breakpoints.push(parse(parts.next())?);
            values.push(parse(parts.next())?);
        }
        Self::new(breakpoints, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}

/// Pool examples sharing a score into one point (weighted mean label) and
/// sort by score. PAVA and the test oracle both start from this.
fn pooled_points(examples: &[CalibrationExample]) -> Result<Vec<CalibrationExample>> {
    if examples.len() < 2 {
        return Err(Error::Data(format!(
            "isotonic fit needs at least 2 examples, got {}",
            examples.len()
        )));
    }
    for e in examples {
        e.validate()?;
    }
    let mut sorted = examples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut points: Vec<CalibrationExample> = Vec::new();
    for e in sorted {
        match points.last_mut() {
            Some(p) if p.score == e.score => {
                let w = p.weight + e.weight;
                p.label = (p.label * p.weight + e.label * e.weight) / w;
                p.weight = w;
            }
            _ => points.push(e),
        }
    }
    Ok(points)
}

/// Weighted isotonic least-squares via pool-adjacent-violators. Identical
/// scores are pooled first, so even conflicting labels at a single score
/// produce a valid (single-value) map.
pub fn pava_isotonic_fit(examples: &[CalibrationExample]) -> Result<CalibrationMap> {
    let points = pooled_points(examples)?;
    struct Block {
        value: f64,
        weight: f64,
        count: usize,
    }
    let mut blocks: Vec<Block> = Vec::with_capacity(points.len());
    for p in &points {
        blocks.push(Block { value: p.label, weight: p.weight, count: 1 });
        while blocks.len() >= 2 {
            let last = blocks.len() - 1;
            if blocks[last - 1].value <= blocks[last].value {
                break;
            }
            let b = blocks.pop().unwrap();
            let a = blocks.last_mut().unwrap();
            let w = a.weight + b.weight;
            a.value = (a.value * a.weight + b.value * b.weight) / w;
            a.weight = w;
            a.count += b.count;
        }
    }
    let mut breakpoints = Vec::with_capacity(points.len());
    let mut values = Vec::with_capacity(points.len());
    let mut i = 0;
    for b in &blocks {
        for _ in 0..b.count {
            breakpoints.push(points[i].score);
            // Means of [0,1] labels can drift out of range by an ulp.
            values.push(b.value.clamp(0.0, 1.0));
            i += 1;
        }
    }
    CalibrationMap::new(breakpoints, values)
}

/// Fitted value per pooled point, in score order. Exposed for tests that
/// compare against an independent oracle.
pub fn pava_fitted_values(examples: &[CalibrationExample]) -> Result<(Vec<CalibrationExample>, Vec<f64>)> {
    let points = pooled_points(examples)?;
    let map = pava_isotonic_fit(examples)?;
    let fitted = points.iter().map(|p| map.apply(p.score)).collect();
    Ok((points, fitted))
}

// ── dataset construction ─────────────────────────────────────────────────────

/// Model outputs for one example, ready for labeling.
#[derive(Clone, Debug)]
pub struct ScoredExample {
    pub kind: ExampleKind,
    /// Raw on-screen probability per separated source.
    pub scores: Vec<f64>,
    /// Linear power of each estimated source.
    pub powers: Vec<f64>,
    /// Best-assignment on-screen row; consulted for on-screen MoMs only.
    pub assignment_labels: Vec<f64>,
}

/// Label scored examples: single on-screen clips are all 1, anything with
/// no on-screen sources is all 0, and on-screen MoMs take their labels from
/// the best assignment. With `power_weighted`, each point is weighted by
/// its source's estimated power (normalized to mean 1); otherwise weights
/// are 1.
pub fn build_calibration_dataset(
    scored: &[ScoredExample],
    power_weighted: bool,
) -> Result<Vec<CalibrationExample>> {
    let mut out = Vec::new();
    for ex in scored {
        if ex.scores.is_empty() || ex.scores.len() != ex.powers.len() {
            return Err(Error::Data("scored example with mismatched score/power lists".to_string()));
        }
        for (m, &score) in ex.scores.iter().enumerate() {
            let label = match ex.kind {
                ExampleKind::SingleOnScreen => 1.0,
                ExampleKind::SingleOffScreen | ExampleKind::MomOffScreen => 0.0,
                ExampleKind::MomOnScreen => {
                    *ex.assignment_labels.get(m).ok_or_else(|| {
                        Error::Data("on-screen MoM is missing assignment labels".to_string())
                    })?
                }
            };
            out.push(CalibrationExample { score, label, weight: ex.powers[m].max(0.0) });
        }
    }
    if out.is_empty() {
        return Err(Error::Data("empty calibration label pool".to_string()));
    }
    if power_weighted {
        let mean = out.iter().map(|e| e.weight).sum::<f64>() / out.len() as f64;
        if mean <= 0.0 {
            return Err(Error::Data("all calibration weights are zero".to_string()));
        }
        for e in &mut out {
            // Keep a floor so silent estimates still count a little.
            e.weight = (e.weight / mean).max(1e-3);
        }
    } else {
        for e in &mut out {
            e.weight = 1.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::rng_stream;
    use rand::Rng;

    fn ex(score: f64, label: f64) -> CalibrationExample {
        CalibrationExample { score, label, weight: 1.0 }
    }

    #[test]
    fn worked_three_point_example() {
        let map =
            pava_isotonic_fit(&[ex(0.1, 0.0), ex(0.2, 1.0), ex(0.3, 0.0)]).unwrap();
        assert_eq!(map.breakpoints(), &[0.1, 0.2, 0.3]);
        let v = map.values();
        assert!(v[0].abs() < 1e-12, "first point stays 0");
        assert!((v[1] - 0.5).abs() < 1e-12, "violating pair pools to 0.5");
        assert!((v[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn monotone_labels_fit_exactly() {
        let map = pava_isotonic_fit(&[
            ex(0.1, 0.0),
            ex(0.3, 0.0),
            ex(0.6, 1.0),
            ex(0.9, 1.0),
        ])
        .unwrap();
        assert_eq!(map.values(), &[0.0, 0.0, 1.0, 1.0], "no violators means no pooling");
    }

    #[test]
    fn fit_is_order_invariant() {
        let examples = [ex(0.5, 1.0), ex(0.1, 0.0), ex(0.9, 0.0), ex(0.3, 1.0)];
        let a = pava_isotonic_fit(&examples).unwrap();
        let mut shuffled = examples;
        shuffled.swap(0, 3);
        shuffled.swap(1, 2);
        let b = pava_isotonic_fit(&shuffled).unwrap();
        assert_eq!(a, b, "fit must not depend on example order");
    }

    #[test]
    fn conflicting_labels_at_one_score_give_single_value_map() {
        let map = pava_isotonic_fit(&[
            CalibrationExample { score: 0.4, label: 1.0, weight: 1.0 },
            CalibrationExample { score: 0.4, label: 0.0, weight: 3.0 },
        ])
        .unwrap();
        assert_eq!(map.breakpoints().len(), 1);
        assert!((map.values()[0] - 0.25).abs() < 1e-12, "weighted mean 1/4");
        assert_eq!(map.apply(0.0), map.apply(1.0), "single-point map is constant");
    }

    /// Exhaustive monotone least-squares: enumerate every partition of the
    /// pooled points into consecutive blocks, keep those whose block means
    /// are non-decreasing, and take the minimum weighted squared error.
    fn oracle_fit(points: &[CalibrationExample]) -> Vec<f64> {
        let n = points.len();
        assert!(n <= 12, "oracle is exponential");
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..1 << (n - 1) {
            let mut fitted = Vec::with_capacity(n);
            let mut means = Vec::new();
            let mut start = 0;
            for end in 0..n {
                let boundary = end == n - 1 || mask >> end & 1 == 1;
                if boundary {
                    let block = &points[start..=end];
                    let w: f64 = block.iter().map(|p| p.weight).sum();
                    let mean = block.iter().map(|p| p.label * p.weight).sum::<f64>() / w;
                    means.push(mean);
                    fitted.extend(std::iter::repeat(mean).take(end - start + 1));
                    start = end + 1;
                }
            }
            if means.windows(2).any(|m| m[0] > m[1] + 1e-12) {
                continue;
            }
            let sse: f64 = points
                .iter()
                .zip(&fitted)
                .map(|(p, f)| p.weight * (p.label - f) * (p.label - f))
                .sum();
            if best.as_ref().map_or(true, |(b, _)| sse < *b - 0.0) {
                best = Some((sse, fitted));
            }
        }
        best.expect("the single-block partition is always feasible").1
    }

    #[test]
    fn pava_matches_exhaustive_oracle() {
        let mut rng = rng_stream(21, "pava_oracle");
        for case in 0..1000 {
            let n = rng.random_range(2..=10);
            let examples: Vec<CalibrationExample> = (0..n)
                .map(|_| CalibrationExample {
                    // Coarse scores provoke ties.
                    score: (rng.random_range(0..=20) as f64) / 20.0,
                    label: if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 },
                    weight: rng.random_range(0.1..2.0),
                })
                .collect();
            let (points, fitted) = pava_fitted_values(&examples).unwrap();
            let want = oracle_fit(&points);
            for (i, (got, want)) in fitted.iter().zip(&want).enumerate() {
                assert!(
                    (got - want).abs() < 1e-8,
                    "case {case} point {i}: pava {got} vs oracle {want}"
                );
            }
            assert!(
                fitted.windows(2).all(|w| w[0] <= w[1] + 1e-12),
                "case {case}: fitted values must be non-decreasing"
            );
        }
    }

    #[test]
    fn fit_beats_the_best_constant() {
        let mut rng = rng_stream(22, "const");
        for _ in 0..200 {
            let n = rng.random_range(2..=12);
            let examples: Vec<CalibrationExample> = (0..n)
                .map(|i| CalibrationExample {
                    score: i as f64 / n as f64,
                    label: if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 },
                    weight: rng.random_range(0.5..1.5),
                })
                .collect();
            let (points, fitted) = pava_fitted_values(&examples).unwrap();
            let w_total: f64 = points.iter().map(|p| p.weight).sum();
            let mean = points.iter().map(|p| p.label * p.weight).sum::<f64>() / w_total;
            let sse = |f: &dyn Fn(usize) -> f64| -> f64 {
                points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p.weight * (p.label - f(i)) * (p.label - f(i)))
                    .sum()
            };
            assert!(
                sse(&|i| fitted[i]) <= sse(&|_| mean) + 1e-12,
                "isotonic fit can never lose to the best constant"
            );
        }
    }

    #[test]
    fn apply_preserves_order_and_clamps() {
        let mut rng = rng_stream(23, "apply");
        for case in 0..100 {
            // Larger fits on later cases: dense breakpoint tables are where
            // interpolation arithmetic can wobble by an ulp.
            let n = if case < 50 { rng.random_range(2..=8) } else { rng.random_range(50..=400) };
            let examples: Vec<CalibrationExample> = (0..n)
                .map(|_| CalibrationExample {
                    score: rng.random_range(0.05..0.95),
                    label: if rng.random_range(0.0..1.0) < 0.5 { 1.0 } else { 0.0 },
                    weight: 1.0,
                })
                .collect();
            let map = match pava_isotonic_fit(&examples) {
                Ok(m) => m,
                Err(_) => continue,
            };
            // Sweep a fine grid plus the breakpoints themselves and their
            // immediate float neighbors; monotone must hold exactly.
            let mut probes: Vec<f64> = (0..=2000).map(|i| i as f64 / 2000.0).collect();
            for &b in map.breakpoints() {
                probes.extend([b, next_down(b), next_up(b)]);
            }
            probes.sort_by(f64::total_cmp);
            let mut last = f64::NEG_INFINITY;
            for &s in &probes {
                let v = map.apply(s);
                assert!(v >= last, "map must be monotone: map({s}) = {v} < {last}");
                assert!((0.0..=1.0).contains(&v), "calibrated value {v} outside [0, 1]");
                last = v;
            }
            let lo = map.breakpoints()[0];
            assert_eq!(map.apply(lo - 0.5), map.apply(lo), "extrapolation clamps below");
        }
    }

    fn next_up(x: f64) -> f64 {
        f64::from_bits(x.to_bits() + 1)
    }

    fn next_down(x: f64) -> f64 {
        f64::from_bits(x.to_bits() - 1)
    }

    #[test]
    fn text_round_trip_is_identical() {
        let map = pava_isotonic_fit(&[
            ex(0.1, 0.0),
            ex(0.25, 1.0),
            ex(1.0 / 3.0, 0.0),
            ex(0.9, 1.0),
        ])
        .unwrap();
        let text = map.to_text();
        assert!(text.starts_with(CalibrationMap::HEADER));
        let back = CalibrationMap::from_text(&text).unwrap();
        assert_eq!(back, map, "parse must invert print exactly");
        assert_eq!(back.to_text(), text, "print must invert parse exactly");
        assert!(CalibrationMap::from_text("# wrong header\n0 0\n").is_err());
        assert!(CalibrationMap::from_text(&format!("{}\n0.5 junk\n", CalibrationMap::HEADER)).is_err());
    }

    #[test]
    fn labeling_rules_per_example_kind() {
        let scored = vec![
            ScoredExample {
                kind: ExampleKind::SingleOffScreen,
                scores: vec![0.9, 0.8, 0.2, 0.1],
                powers: vec![1.0; 4],
                assignment_labels: vec![],
            },
            ScoredExample {
                kind: ExampleKind::SingleOnScreen,
                scores: vec![0.6, 0.4],
                powers: vec![1.0; 2],
                assignment_labels: vec![],
            },
            ScoredExample {
                kind: ExampleKind::MomOnScreen,
                scores: vec![0.7, 0.6, 0.3, 0.2],
                powers: vec![1.0; 4],
                assignment_labels: vec![1.0, 1.0, 0.0, 0.0],
            },
            ScoredExample {
                kind: ExampleKind::MomOffScreen,
                scores: vec![0.5, 0.5],
                powers: vec![1.0; 2],
                assignment_labels: vec![],
            },
        ];
        let examples = build_calibration_dataset(&scored, false).unwrap();
        let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
        assert_eq!(
            labels,
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            "labels must follow the per-kind rules"
        );
        assert!(examples.iter().all(|e| e.weight == 1.0), "unweighted mode pins weights at 1");
        assert!(build_calibration_dataset(&[], false).is_err(), "empty pool is an error");
    }

    #[test]
    fn power_weighting_normalizes_to_mean_one() {
        let scored = vec![ScoredExample {
            kind: ExampleKind::SingleOnScreen,
            scores: vec![0.5, 0.5],
            powers: vec![3.0, 1.0],
            assignment_labels: vec![],
        }];
        let examples = build_calibration_dataset(&scored, true).unwrap();
        assert!((examples[0].weight - 1.5).abs() < 1e-12);
        assert!((examples[1].weight - 0.5).abs() < 1e-12);
    }
}
