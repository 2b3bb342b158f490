//! The four audio-visual encoders and their attention footprints.
//!
//! Joint variants attend over (positions x time) at once and pay a score
//! tensor quadratic in both; separable variants split time and position
//! passes. The meter below measures real peak element counts and checks
//! them against the closed forms, including the headline full-scale cell
//! where separable self-attention is 16x smaller than joint.
//!
//!     cargo run --release --example encoder_memory

use avscope::attention::{meter, AttentionConfig};
use avscope::axis::AxisRole::{Depth, Source, Space, Time};
use avscope::encoders::{encode, EncoderConfig, EncoderVariant};
use avscope::harness::attention_peak_elements;
use avscope::params::{rng_stream, ParameterStore};
use avscope::tape::Tape;
use avscope::tensor::AxisTaggedTensor;
use rand::Rng;

const VARIANTS: [EncoderVariant; 4] = [
    EncoderVariant::JointSa,
    EncoderVariant::SeparableSa,
    EncoderVariant::JointCma,
    EncoderVariant::SeparableCma,
];

fn random(axes: &[(avscope::AxisRole, usize)], seed: u64) -> AxisTaggedTensor {
    let mut rng = rng_stream(seed, "encoder_memory");
    let n: usize = axes.iter().map(|&(_, e)| e).product();
    AxisTaggedTensor::from_vec(axes, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("valid shape")
}

fn measured_peak(variant: EncoderVariant, m: usize, g: usize, t: usize, h: usize, d: usize) -> usize {
    let audio = random(&[(Source, m), (Time, t), (Depth, d)], 1);
    let video = random(&[(Space, g), (Time, t), (Depth, d)], 2);
    let cfg = EncoderConfig::new(variant, 1, AttentionConfig::new(d, h, &[Time]));
    let mut store = ParameterStore::new(5);
    let mut tape = Tape::new();
    let a = tape.constant(audio);
    let v = tape.constant(video);
    let mut rng = rng_stream(5, "enc");
    meter::reset();
    encode(&mut tape, &mut store, &cfg, a, v, &mut rng, false).expect("encoder runs");
    let report = meter::report();
    meter::reset();
    // The final pooling stage attends a single query per source; the
    // footprint of interest is the per-block peak.
    report
        .stages
        .iter()
        .filter(|(label, _)| label != "pool")
        .map(|&(_, n)| n)
        .max()
        .unwrap_or(0)
}

fn main() {
    // Full-scale shape: 4 sources, an 8x8 video grid, 16 frames, 4 heads.
    let (m, g, t, h, d) = (4, 64, 16, 4, 16);
    println!("peak attention elements at M={m} G={g} T={t} H={h}:");
    for variant in VARIANTS {
        let closed = attention_peak_elements(variant, m, g, t, h);
        let measured = measured_peak(variant, m, g, t, h, d);
        assert_eq!(measured, closed, "{variant:?} must match its closed form");
        println!("  {variant:?}: {measured} (closed form {closed})");
    }
    let joint = attention_peak_elements(EncoderVariant::JointSa, m, g, t, h);
    let separable = attention_peak_elements(EncoderVariant::SeparableSa, m, g, t, h);
    println!(
        "joint/separable self-attention ratio: {:.1}x ({joint} vs {separable})",
        joint as f64 / separable as f64
    );

    // The gap widens with the time and position extents; a small sweep.
    println!("\njoint vs separable SA peaks over (T, M+G):");
    for t in [4usize, 8, 16] {
        for (m, g) in [(2usize, 6usize), (4, 28), (4, 64)] {
            let j = attention_peak_elements(EncoderVariant::JointSa, m, g, t, h);
            let s = attention_peak_elements(EncoderVariant::SeparableSa, m, g, t, h);
            println!("  T={t:>2} M+G={:>2}: joint {j:>9} separable {s:>8} ({:.1}x)", m + g, j as f64 / s as f64);
        }
    }
}
