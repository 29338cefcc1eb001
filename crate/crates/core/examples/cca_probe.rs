//! Fits CCA on held-in real samples and compares the projected
//! style/linguistics correlation of held-out reals against fakes.

use slim::analysis::{cca_probe, probe_samples, DEFAULT_RIDGE};
use slim::store::{load_manifest, SampleSet};
use slim::synth::{generate_dataset, SynthConfig};

fn main() -> slim::Result<()> {
    let dir = std::env::temp_dir().join("slim-cca-example");
    let cfg = SynthConfig {
        features: 128,
        frames: 10,
        ..SynthConfig::default()
    };
    let records = load_manifest(generate_dataset(&cfg, 200, 200, &dir)?)?;
    let set = SampleSet::load(&records)?;
    let samples = probe_samples(&set, &records)?;
    let report = cca_probe(&samples, 100, 20, DEFAULT_RIDGE, 0)?;
    println!("fit on {} reals, {} components", report.fit_n, report.dims);
    let top: Vec<String> = report.training_correlations.iter().take(5).map(|r| format!("{r:.3}")).collect();
    println!("leading training correlations {}", top.join(" "));
    for g in &report.groups {
        println!("{:<12} n={:<4} r = {:.3} ± {:.3}", g.class, g.n, g.mean, g.std);
    }
    println!("welch t {:.2} p {:.2e}", report.welch_t.unwrap_or(f64::NAN), report.welch_p.unwrap_or(f64::NAN));
    Ok(())
}
