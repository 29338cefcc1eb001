//! Finite-difference check of the compression module and the classifier
//! head against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slim::autodiff::{check_gradients, Graph, Var};
use slim::model::{Bound, ModelConfig, SlimModel};
use slim::store::Subspace;
use slim::Tensor;

fn main() -> slim::Result<()> {
    let model = SlimModel::new(ModelConfig {
        input_dim: 8,
        bottleneck_dim: 4,
        dependency_dim: 5,
        asp_dim: 4,
        attention_dim: 3,
        head_hidden_dim: 6,
        ..ModelConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = model.init_stage1(&mut rng);
    let names: Vec<String> = params.keys().filter(|n| n.starts_with("style.")).cloned().collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| params[n].clone()).collect();
    let x = Tensor::new(vec![3, 8, 4], (0..96).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let objective = |g: &mut Graph, vars: &[Var]| {
        let p: Bound = names.iter().cloned().zip(vars.iter().copied()).collect();
        // Same dropout mask on every evaluation.
        let mut mask = ChaCha8Rng::seed_from_u64(0);
        let (s, _) = model.compress_batch(g, &p, Subspace::Style, &x, Some(&mut mask))?;
        let s = g.tanh(s)?;
        g.frobenius_sq(s)
    };
    let check = check_gradients(objective, &inputs, 1e-4)?;
    println!("compression: max relative error {:.2e}, passed {}", check.max_rel_error, check.passed);

    let head_params = model.init_stage2(&mut rng);
    let head_names: Vec<String> = head_params.keys().filter(|n| n.starts_with("head.")).cloned().collect();
    let head_inputs: Vec<Tensor> = head_names.iter().map(|n| head_params[n].clone()).collect();
    let fused = Tensor::new(
        vec![4, model.head.input_dim],
        (0..4 * model.head.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let head_objective = |g: &mut Graph, vars: &[Var]| {
        let p: Bound = head_names.iter().cloned().zip(vars.iter().copied()).collect();
        let x = g.constant(fused.clone());
        let logits = model.head.forward::<ChaCha8Rng>(g, &p, x, None)?;
        g.bce_with_logits(logits, &[1.0, 0.0, 0.0, 1.0])
    };
    let check = check_gradients(head_objective, &head_inputs, 1e-4)?;
    println!("head:        max relative error {:.2e}, passed {}", check.max_rel_error, check.passed);
    Ok(())
}
