//! Saves a freshly initialized model, reloads it and compares fingerprints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use slim::model::{ModelCheckpoint, ModelConfig, SlimModel, Stage};
use slim::train::{config_snapshot, TrainConfig};

fn main() -> slim::Result<()> {
    let config = ModelConfig {
        input_dim: 64,
        ..ModelConfig::default()
    };
    let model = SlimModel::new(config.clone())?;
    let params = model.init_stage1(&mut ChaCha8Rng::seed_from_u64(0));
    let ckpt = ModelCheckpoint::new(Stage::One, params, config_snapshot(&config, &TrainConfig::stage1()));

    let path = std::env::temp_dir().join("slim-example.slck");
    ckpt.save(&path)?;
    let back = ModelCheckpoint::load(&path)?;
    println!("{} parameters, stage {:?}", back.params.len(), back.stage);
    for (name, t) in &back.params {
        println!("  {name:<32} {:?}", t.shape());
    }
    println!("fingerprint {:08x} -> {:08x}", ckpt.fingerprint()?, back.fingerprint()?);
    println!("config snapshot:\n{}", back.config.to_text());
    Ok(())
}
