//! Key/value configs: parsing, overrides, typed application and rejection
//! of unknown keys.

use slim::config::KeyValues;
use slim::model::ModelConfig;
use slim::train::TrainConfig;

fn main() -> slim::Result<()> {
    let mut kv = KeyValues::parse(
        "# stage 2 run\n\
         Batch size = 4\n\
         Starting LR = 2e-4\n\
         Early-stop patience = 5\n\
         Variant = dependency\n",
    )?;
    kv.merge(&KeyValues::from_overrides(&["seed=42", "augment=on"])?);

    let known: Vec<&str> = ModelConfig::KEYS.iter().chain(&TrainConfig::KEYS).copied().collect();
    kv.reject_unknown(&known)?;
    let mut model = ModelConfig::default();
    model.apply(&kv)?;
    let mut train = TrainConfig::stage2();
    train.apply(&kv)?;
    println!("variant {} batch {} lr {} patience {} seed {} augment {}", model.variant, train.batch_size, train.lr_start, train.patience, train.seed, train.augment);

    let typo = KeyValues::parse("Batch sise = 4")?;
    if let Err(e) = typo.reject_unknown(&known) {
        println!("{e} (exit code {})", e.exit_code());
    }
    let stage1_augment = KeyValues::parse("Augment = on")?;
    if let Err(e) = TrainConfig::stage1().apply(&stage1_augment) {
        println!("{e}");
    }
    Ok(())
}
