//! Isotonic score calibration.
//!
//! The on-screen classifier's raw sigmoid outputs are ranked well before
//! they are trustworthy as probabilities. A pool-adjacent-violators fit on
//! a small labeled set produces the best monotone map to calibrated
//! probabilities; between fitted points the map interpolates linearly and
//! clamps outside.
//!
//!     cargo run --example calibration_fit

use avscope::calibration::{pava_isotonic_fit, CalibrationExample, CalibrationMap};
use avscope::params::rng_stream;
use rand::Rng;

fn main() -> avscope::Result<()> {
    // Scores from an over-confident classifier: labels follow the score
    // rank, but the raw values crowd the top of the unit interval.
    let mut rng = rng_stream(21, "calibration_demo");
    let mut examples = Vec::new();
    for _ in 0..400 {
        let truth = rng.random_range(0.0..1.0f64);
        let label = f64::from(rng.random_range(0.0..1.0) < truth);
        let score = (0.55 + 0.45 * truth + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        examples.push(CalibrationExample { score, label, weight: 1.0 });
    }

    let map = pava_isotonic_fit(&examples)?;
    println!("fitted {} monotone points", map.breakpoints().len());
    println!("raw -> calibrated:");
    for raw in [0.3, 0.6, 0.7, 0.8, 0.9, 0.99] {
        println!("  {raw:.2} -> {:.3}", map.apply(raw));
    }

    // Monotone by construction, clamped outside the fitted range.
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=1000 {
        let v = map.apply(i as f64 / 1000.0);
        assert!(v >= prev, "calibrated scores must be non-decreasing");
        prev = v;
    }
    println!("monotone over a 1000-point sweep, range [{:.3}, {:.3}]", map.apply(0.0), map.apply(1.0));

    // The map round-trips through its text format exactly.
    let text = map.to_text();
    let back = CalibrationMap::from_text(&text)?;
    assert_eq!(back, map, "text round trip must be lossless");
    println!("\nmap file is plain text ({} lines):", text.lines().count());
    for line in text.lines().take(4) {
        println!("  {line}");
    }
    println!("  ...");

    // Calibration squeezes the squared error against the labels: the
    // Brier score never gets worse on the fit set.
    let brier = |f: &dyn Fn(f64) -> f64| {
        examples.iter().map(|e| (f(e.score) - e.label).powi(2)).sum::<f64>() / examples.len() as f64
    };
    let raw = brier(&|s| s);
    let calibrated = brier(&|s| map.apply(s));
    println!("\nBrier score: raw {raw:.4} -> calibrated {calibrated:.4}");
    assert!(calibrated <= raw + 1e-12, "calibration must not hurt the Brier score on the fit set");
    Ok(())
}
