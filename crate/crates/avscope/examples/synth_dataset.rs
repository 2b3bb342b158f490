//! The synthetic audio-visual world and its feature extractors.
//!
//! Each clip is a few amplitude-modulated components; on-screen components
//! drive the brightness of one video grid cell with their per-frame RMS
//! ("perfect" correlation), or with an unrelated envelope ("null"). The
//! extractor turns audio into log-mel frame features and video into pooled
//! patch features on a shared time axis.
//!
//!     cargo run --example synth_dataset

use avscope::axis::AxisRole::{Depth, Source, Space, Time};
use avscope::features::{
    synthesize, BackgroundCondition, CorrelationMode, ExampleKind, FeatureExtractor, SynthConfig,
};
use avscope::params::rng_stream;

fn main() -> avscope::Result<()> {
    let cfg = SynthConfig {
        on_sources: 2,
        off_sources: 2,
        samples: 8000,
        sample_rate: 8000,
        frames: 16,
        frame_rate: 16,
        video_height: 32,
        video_width: 32,
        correlation: CorrelationMode::Perfect,
        background: BackgroundCondition::Offscreen,
    };

    let mut rng = rng_stream(31, "synth_demo");
    let ex = synthesize(&cfg, ExampleKind::MomOnScreen, &mut rng)?;
    println!("example kind: {:?}", ex.kind);
    println!("components: {} ({} on-screen)", ex.truth.components.len(),
        ex.truth.on_screen.iter().filter(|&&b| b).count());
    println!("on/off mixture samples: {} / {}", ex.on_audio.len(), ex.off_audio.len());
    println!("video: {} frames of {}x{}", ex.clip.frames.len(), cfg.video_height, cfg.video_width);

    // The synthesis invariant: components sum exactly to the two mixtures.
    let sum_err = (0..cfg.samples)
        .map(|i| {
            let total: f64 = ex.truth.components.iter().map(|c| c[i]).sum();
            (total - ex.on_audio[i] - ex.off_audio[i]).abs()
        })
        .fold(0.0f64, f64::max);
    println!("component sum error vs mixtures: {sum_err:.2e}");

    // Feature extraction: audio rows to log-mel projections, video to
    // pooled grid patches, both on the clip's 16-frame time axis.
    let extractor = FeatureExtractor::new(31, cfg.samples, cfg.frames, 24, 32, cfg.sample_rate, 4, 4)?;
    let rows = [ex.on_audio.clone(), ex.off_audio.clone()];
    let audio = extractor.audio_features(&rows)?;
    println!("\naudio features: {:?}", audio.axes());
    assert_eq!(audio.extent(Source)?, 2);
    assert_eq!(audio.extent(Time)?, cfg.frames);

    let patches = extractor.pool_patches(&ex.clip)?;
    println!("pooled patches: {:?}", patches.axes());
    let video = extractor.project_patches(&patches)?;
    println!("projected video features: {:?}", video.axes());
    assert_eq!(video.extent(Space)?, 16);
    assert_eq!(video.extent(Depth)?, audio.extent(Depth)?);

    // Perfect correlation in action: the driven cell's brightness tracks
    // each on-screen component's frame RMS exactly (up to peak scaling).
    let frame_len = cfg.samples / cfg.frames;
    let comp = &ex.truth.components[0];
    let rms: Vec<f64> = (0..cfg.frames)
        .map(|f| {
            let w = &comp[f * frame_len..(f + 1) * frame_len];
            (w.iter().map(|v| v * v).sum::<f64>() / frame_len as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().cloned().fold(0.0f64, f64::max);
    println!("\nfirst on-screen component, frame RMS vs its cell's brightness:");
    // Two cells are driven (one per on-screen component); pick the one
    // whose brightness tracks this component's RMS.
    let cell = best_matching_cell(&ex.clip.frames, &rms);
    for f in [0usize, 5, 10, 15] {
        println!(
            "  frame {f:>2}: rms/peak {:.3}  brightness/0.9 {:.3}",
            rms[f] / peak,
            ex.clip.frames[f][cell] / 0.9
        );
    }

    // Null mode draws an unrelated envelope for the cell instead.
    let cfg_null = SynthConfig { correlation: CorrelationMode::Null, ..cfg };
    let mut rng = rng_stream(31, "synth_demo_null");
    let null = synthesize(&cfg_null, ExampleKind::MomOnScreen, &mut rng)?;
    println!("\nnull mode makes the same shapes: {} frames, {} components",
        null.clip.frames.len(), null.truth.components.len());
    Ok(())
}

/// Pixel whose brightness series lines up best with `series` (by dot
/// product of the normalized sequences).
fn best_matching_cell(frames: &[Vec<f64>], series: &[f64]) -> usize {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let sn = norm(series);
    let mut best = (0usize, f64::NEG_INFINITY);
    for px in 0..frames[0].len() {
        let b: Vec<f64> = frames.iter().map(|f| f[px]).collect();
        let score = b.iter().zip(series).map(|(x, y)| x * y).sum::<f64>() / (norm(&b) * sn);
        if score > best.1 {
            best = (px, score);
        }
    }
    best.0
}
