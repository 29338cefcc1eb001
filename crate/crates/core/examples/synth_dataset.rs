//! Writes a small synthetic benchmark and prints what landed on disk.
//!
//! `cargo run --example synth_dataset [out_dir]`

use std::path::PathBuf;

use slim::store::{load_manifest, read_embedding, Label, Split};
use slim::synth::{generate_dataset, SynthConfig};

fn main() -> slim::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("slim-synth"));
    let cfg = SynthConfig {
        features: 64,
        frames: 20,
        mismatch: 0.5,
        ..SynthConfig::default()
    };
    let manifest = generate_dataset(&cfg, 30, 30, &out)?;
    let records = load_manifest(&manifest)?;
    println!("manifest {} with {} records", manifest.display(), records.len());
    for split in [Split::Train, Split::Valid, Split::Test] {
        let count = |l: Label| records.iter().filter(|r| r.split == split && r.label == l).count();
        println!("  {:<5} real {:>2}  fake {:>2}", split.as_str(), count(Label::Real), count(Label::Fake));
    }
    let first = &records[0];
    let style = read_embedding(&first.style_path)?;
    let ling = read_embedding(&first.linguistics_path)?;
    println!(
        "{}: style K={} F={} T={}, linguistics K={} F={} T={}",
        first.id,
        style.layers(),
        style.features(),
        style.frames(),
        ling.layers(),
        ling.features(),
        ling.frames()
    );
    Ok(())
}
