//! One-class stage-1 training on synthetic real speech with a reduced
//! architecture, printing the per-epoch loss breakdown.

use slim::model::ModelConfig;
use slim::store::load_manifest;
use slim::synth::{generate_dataset, SynthConfig};
use slim::train::{train_stage1, write_progress, TrainConfig};

fn main() -> slim::Result<()> {
    let dir = std::env::temp_dir().join("slim-stage1-example");
    let data = SynthConfig {
        features: 128,
        frames: 20,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&data, 120, 0, dir.join("data"))?;
    let model = ModelConfig {
        bottleneck_dim: 32,
        dependency_dim: 32,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig { epochs: 15, ..TrainConfig::stage1() };
    let outcome = train_stage1(&load_manifest(&manifest)?, &model, &cfg)?;
    for r in &outcome.history {
        println!(
            "epoch {:>2} {:<5} lr {:.5} loss {:>9.3} cross {:>9.3} style {:>7.3} linguistics {:>7.3}",
            r.epoch,
            r.split,
            r.lr,
            r.loss,
            r.cross.unwrap_or(f64::NAN),
            r.style.unwrap_or(f64::NAN),
            r.linguistics.unwrap_or(f64::NAN)
        );
    }
    println!(
        "best validation loss {:.3} at epoch {}{}",
        outcome.best_metric,
        outcome.best_epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    let ckpt = dir.join("stage1.slck");
    outcome.checkpoint.save(&ckpt)?;
    write_progress(&outcome.history, dir.join("progress.jsonl"))?;
    println!("checkpoint {} crc {:08x}", ckpt.display(), outcome.checkpoint.fingerprint()?);
    Ok(())
}
