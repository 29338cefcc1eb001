//! Layer-by-layer Spearman map between the style and linguistics stacks.

use slim::analysis::{layer_spearman_matrix, SpearmanPooling};
use slim::store::{read_embedding, load_manifest};
use slim::synth::{generate_dataset, SynthConfig};

fn main() -> slim::Result<()> {
    let dir = std::env::temp_dir().join("slim-layers-example");
    let cfg = SynthConfig {
        features: 256,
        frames: 10,
        ..SynthConfig::default()
    };
    let records = load_manifest(generate_dataset(&cfg, 40, 0, &dir)?)?;
    let style = records.iter().map(|r| read_embedding(&r.style_path)).collect::<slim::Result<Vec<_>>>()?;
    let ling = records.iter().map(|r| read_embedding(&r.linguistics_path)).collect::<slim::Result<Vec<_>>>()?;
    for (name, a, b) in [("style x style", &style, &style), ("style x linguistics", &style, &ling)] {
        let m = layer_spearman_matrix(a, b, SpearmanPooling::PerSample)?;
        let (ka, kb) = (m.shape()[0], m.shape()[1]);
        println!("{name}: {ka}x{kb}");
        for row in m.data().chunks(kb).take(3) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    Ok(())
}
