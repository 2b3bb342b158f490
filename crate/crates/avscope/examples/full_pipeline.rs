//! The whole pipeline, miniature edition.
//!
//! Synthesizes a dataset, pretrains the separator, joint-trains with the
//! audio-visual classifier, fits calibration and evaluates, all through
//! the same entry points the `avscope` binary uses. Sizes are cut down so
//! the run finishes in well under a minute; see the binary for the
//! full-scale flow.
//!
//!     cargo run --release --example full_pipeline

use avscope::config::ExperimentConfig;
use avscope::harness::{self, TrainOptions};
use avscope::separation::TrainMode;

fn main() -> avscope::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 12;
    cfg.model.sources = 2;
    cfg.model.depth = 16;
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.model.dropout = 0.0;
    cfg.separator.win = 40;
    cfg.separator.basis = 16;
    cfg.separator.dilations = vec![1, 2];
    cfg.data.sample_rate = 2000;
    cfg.data.samples = 2000;
    cfg.data.frames = 8;
    cfg.data.frame_rate = 8;
    cfg.data.mel_bands = 12;
    cfg.data.grid_h = 2;
    cfg.data.grid_w = 2;
    cfg.data.video_height = 8;
    cfg.data.video_width = 8;
    cfg.data.on_sources = 1;
    cfg.data.off_sources = 1;
    cfg.train.learning_rate = 2e-3;
    cfg.train.batch_size = 4;
    cfg.dataset.train_examples = 16;
    cfg.dataset.validation_examples = 8;
    cfg.dataset.test_examples = 16;
    cfg.validate()?;

    let dir = tempfile::tempdir().expect("temp dir");
    let data = dir.path().join("dataset");
    let manifest = harness::synth_data(&cfg, &data)?;
    println!(
        "dataset: {} train / {} validation / {} test examples",
        manifest.split("train")?.len(),
        manifest.split("validation")?.len(),
        manifest.split("test")?.len()
    );

    let pre = harness::train(
        &cfg,
        &data,
        &dir.path().join("pretrain"),
        TrainOptions { steps: Some(60), ..TrainOptions::default() },
    )?;
    println!("pretrain: loss {:.3} -> {:.3}", pre.first_loss, pre.last_loss);

    let joint = harness::train(
        &cfg,
        &data,
        &dir.path().join("joint"),
        TrainOptions {
            mode: TrainMode::Joint,
            initial: Some(&pre.checkpoint),
            steps: Some(60),
            start_step: 0,
        },
    )?;
    println!("joint:    loss {:.3} -> {:.3}", joint.first_loss, joint.last_loss);

    let map_path = dir.path().join("calibration.txt");
    let map = harness::calibrate(&cfg, &data, &joint.checkpoint, &map_path, false)?;
    println!("calibration map: {} points", map.breakpoints().len());

    let eval = harness::evaluate(&cfg, &data, &joint.checkpoint, Some(&map), &dir.path().join("eval"))?;
    println!("\nuncalibrated report:");
    print!("{}", eval.uncalibrated.to_table());
    if let Some(cal) = &eval.calibrated {
        println!("\ncalibrated report:");
        print!("{}", cal.to_table());
    }
    println!("\n(a 60-step model is barely trained; the binary runs the full schedule)");
    Ok(())
}
