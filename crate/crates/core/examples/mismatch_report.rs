//! Trains stage 1 on reals from one stream, then measures the cosine
//! distance between the dependency means of reals and fakes from another.

use slim::analysis::mismatch_report;
use slim::model::ModelConfig;
use slim::store::{load_manifest, SampleSet};
use slim::synth::{generate_dataset, SynthConfig};
use slim::train::{train_stage1, TrainConfig};

fn main() -> slim::Result<()> {
    let dir = std::env::temp_dir().join("slim-mismatch-example");
    let bench = SynthConfig {
        features: 128,
        frames: 20,
        ..SynthConfig::default()
    };
    let one_class = SynthConfig { stream: 1, ..bench.clone() };
    let stage1_data = load_manifest(generate_dataset(&one_class, 120, 0, dir.join("stage1"))?)?;
    let eval_data = load_manifest(generate_dataset(&bench, 60, 60, dir.join("bench"))?)?;

    let model = ModelConfig {
        bottleneck_dim: 32,
        dependency_dim: 32,
        ..ModelConfig::default()
    };
    let outcome = train_stage1(&stage1_data, &model, &TrainConfig { epochs: 20, ..TrainConfig::stage1() })?;
    let report = mismatch_report(&SampleSet::load(&eval_data)?, &outcome.checkpoint, 10)?;
    println!("{:<5} {:>4} {:>10} {:>10} {:>10} {:>10}", "class", "n", "q25", "median", "q75", "mean");
    for c in &report.classes {
        println!("{:<5} {:>4} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e}", c.class, c.n, c.q25, c.median, c.q75, c.mean);
    }
    println!("welch t {:.2} p {:.2e}", report.welch_t.unwrap_or(f64::NAN), report.welch_p.unwrap_or(f64::NAN));
    let edges = &report.histogram.log10_edges;
    for (i, (r, f)) in report.histogram.real.iter().zip(&report.histogram.fake).enumerate() {
        println!("[{:>6.2}, {:>6.2})  real {:>3}  fake {:>3}", edges[i], edges[i + 1], r, f);
    }
    Ok(())
}
