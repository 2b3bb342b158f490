//! The evaluation metrics and their identities.
//!
//! SI-SNR ignores scale, OSR measures how much of the input survives into
//! the on-screen estimate on examples with nothing on screen, the AUC is
//! power-weighted so loud sources count for more, and MixIT* is the
//! assignment-oracle ceiling a classifier-weighted remix is judged
//! against.
//!
//!     cargo run --example metrics_tour

use avscope::metrics::{brier_score, mixit_star, osr, power_weighted_auc, si_snr, DB_CAP};
use avscope::params::rng_stream;
use avscope::separation::mixit_best_assignment;
use rand::Rng;

fn main() -> avscope::Result<()> {
    let mut rng = rng_stream(4, "metrics_demo");
    let reference: Vec<f64> = (0..4000).map(|_| rng.random_range(-0.5..0.5)).collect();

    // SI-SNR is invariant to rescaling the estimate and capped at +-60 dB.
    let (exact, _) = si_snr(&reference, &reference)?;
    let doubled: Vec<f64> = reference.iter().map(|v| v * 2.0).collect();
    let (scaled, _) = si_snr(&reference, &doubled)?;
    println!("SI-SNR: perfect {exact:.1} dB, doubled estimate {scaled:.1} dB (cap {DB_CAP})");

    let noisy: Vec<f64> = reference.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
    println!("noisy estimate: {:.1} dB", si_snr(&reference, &noisy)?.0);

    // OSR identities: an estimate equal to the input suppresses 0 dB; one
    // at 1/sqrt(10) of its power suppresses exactly 10 dB.
    let input = reference.clone();
    let tenth: Vec<f64> = input.iter().map(|v| v / 10f64.sqrt()).collect();
    println!("OSR: self {:.2} dB, 1/sqrt(10) scale {:.2} dB", osr(&input, &input)?, osr(&input, &tenth)?);

    // Power-weighted AUC: the worked example where the loud missed
    // positive drags the score down to 0.2.
    let auc = power_weighted_auc(&[0.9, 0.8, 0.1], &[1.0, 0.0, 1.0], &[1.0, 1.0, 4.0])?;
    println!("weighted AUC on the worked example: {:?}", auc);

    // With random scores the AUC hovers at chance.
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let labels: Vec<f64> = (0..10_000).map(|i| f64::from(i % 2 == 0)).collect();
    let powers = vec![1.0; 10_000];
    println!("random scores, balanced labels: AUC {:.3}", power_weighted_auc(&scores, &labels, &powers)?.unwrap());

    // MixIT*: recompose the on-screen reference from the best assignment's
    // on-screen row and score it, ignoring the classifier entirely.
    let n = 4000;
    let src: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..n).map(|_| rng.random_range(-0.3..0.3)).collect())
        .collect();
    let on_ref: Vec<f64> = (0..n).map(|i| src[0][i] + src[1][i]).collect();
    let off_ref: Vec<f64> = (0..n).map(|i| src[2][i] + src[3][i]).collect();
    let estimates: Vec<Vec<f64>> = src
        .iter()
        .map(|s| s.iter().map(|v| v + rng.random_range(-0.01..0.01)).collect())
        .collect();
    let (assignment, _) = mixit_best_assignment(&estimates, &on_ref, &off_ref, 30.0)?;
    let star = mixit_star(&estimates, &on_ref, &assignment)?;
    println!("MixIT* on a planted partition: {star:.1} dB");

    // Brier score of probabilities against binary labels.
    let p = [0.9, 0.2, 0.7, 0.1];
    let y = [1.0, 0.0, 1.0, 1.0];
    println!("Brier score: {:.3}", brier_score(&p, &y)?);
    Ok(())
}
