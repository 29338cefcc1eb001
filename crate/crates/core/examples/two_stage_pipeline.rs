//! Synthetic benchmark end to end: one-class stage 1, mismatch check,
//! stage 2 for three fusion variants, held-out evaluation.
//!
//! `cargo run --release --example two_stage_pipeline [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use slim::analysis::mismatch_report;
use slim::model::{ModelConfig, Variant};
use slim::store::{load_manifest, Label, SampleSet, Split};
use slim::synth::{generate_dataset, SynthConfig};
use slim::train::{evaluate_on, train_stage1, train_stage2_on, TrainConfig};

fn main() -> slim::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("slim-pipeline"));
    let clock = Instant::now();

    let one_class = SynthConfig { stream: 1, ..SynthConfig::default() };
    let bench = SynthConfig::default();
    let m1 = generate_dataset(&one_class, 200, 0, out.join("stage1"))?;
    let m2 = generate_dataset(&bench, 200, 200, out.join("bench"))?;
    println!("data ready in {:.1?}", clock.elapsed());

    let model = ModelConfig::default();
    let s1 = train_stage1(&load_manifest(&m1)?, &model, &TrainConfig::stage1())?;
    let vals: Vec<f64> = s1.validation().map(|r| r.loss).collect();
    println!(
        "stage 1: {} epochs, valid loss {:.4} -> best {:.4} (epoch {}), {:.1?}",
        s1.epochs_run, vals[0], s1.best_metric, s1.best_epoch, clock.elapsed()
    );

    let records = load_manifest(&m2)?;
    let pick = |split: Split| SampleSet::load(records.iter().filter(|r| r.split == split));
    let (train, valid, test) = (pick(Split::Train)?, pick(Split::Valid)?, pick(Split::Test)?);
    let all = SampleSet::load(&records)?;

    let report = mismatch_report(&all, &s1.checkpoint, 20)?;
    for c in &report.classes {
        println!("distance {}: n={} mean={:.4e} median={:.4e}", c.class, c.n, c.mean, c.median);
    }
    println!("welch t={:?} p={:?}", report.welch_t, report.welch_p);

    for variant in [Variant::Full, Variant::Dependency, Variant::Subspace] {
        let mc = ModelConfig { variant, ..model.clone() };
        let s2 = train_stage2_on(&train, &valid, &s1.checkpoint, &mc, &TrainConfig::stage2())?;
        let eval = evaluate_on(&test, &s2.checkpoint)?;
        let n_fake = test.samples.iter().filter(|s| s.label == Label::Fake).count();
        println!(
            "{variant}: test EER {:.4} F1 {:.4} (n_real {}, n_fake {n_fake}), best epoch {}, {:.1?}",
            eval.report.eer,
            eval.report.f1,
            eval.report.n_real,
            s2.best_epoch,
            clock.elapsed()
        );
    }
    Ok(())
}
