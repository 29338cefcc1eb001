//! Fusion layouts of the model variants and a forward pass through each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slim::model::{ModelConfig, SlimModel, Variant};
use slim::Tensor;

fn main() -> slim::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (f, t) = (32, 12);
    let mut layers = |k: usize| Tensor::new(vec![k, f, t], (0..k * f * t).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (style, ling) = (layers(11)?, layers(8)?);
    for variant in Variant::ALL {
        let model = SlimModel::new(ModelConfig {
            input_dim: f,
            variant,
            ..ModelConfig::default()
        })?;
        let mut params = model.init_stage1(&mut rng);
        params.extend(model.init_stage2(&mut rng));
        let (logit, _, _) = model.forward_full::<ChaCha8Rng>(&params, &style, &ling, None)?;
        let n: usize = params.values().map(Tensor::numel).sum();
        println!(
            "{variant:<12} head input {:>4}  parameters {n:>7}  logit {logit:+.4}",
            model.head.input_dim
        );
    }
    Ok(())
}
