//! Stage-1 self-contrastive loss and stage-2 binary cross-entropy.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, STANDARDIZE_EPS};

/// Default weight of the intra-subspace term.
pub const DEFAULT_LAMBDA: f64 = 0.007;

/// Where the batch-size normalization enters the stage-1 loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossMode {
    /// Standardized features are divided by `B` before both terms.
    Literal,
    /// Only the Gram matrix is divided by `B`.
    #[default]
    GramScaled,
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "literal" => Ok(LossMode::Literal),
            "gram-scaled" | "gram_scaled" => Ok(LossMode::GramScaled),
            _ => Err(Error::Config(format!("unknown loss mode '{s}'"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            LossMode::Literal => "literal",
            LossMode::GramScaled => "gram-scaled",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1LossBreakdown {
    pub total: f64,
    pub cross: f64,
    pub intra: f64,
    pub style: f64,
    pub linguistics: f64,
    pub lambda: f64,
}

/// Graph handles for each loss component.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub total: Var,
    pub cross: Var,
    pub intra: Var,
    pub style: Var,
    pub linguistics: Var,
}

impl Stage1Terms {
    pub fn breakdown(&self, g: &Graph, lambda: f64) -> Stage1LossBreakdown {
        Stage1LossBreakdown {
            total: g.value(self.total).item(),
            cross: g.value(self.cross).item(),
            intra: g.value(self.intra).item(),
            style: g.value(self.style).item(),
            linguistics: g.value(self.linguistics).item(),
            lambda,
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn redundancy(g: &mut Graph, x: Var, batch: usize, dim: usize, mode: LossMode) -> Result<Var> {
    let xt = g.transpose(x)?;
    let gram = g.matmul(xt, x)?;
    let gram = match mode {
        LossMode::Literal => gram,
        LossMode::GramScaled => g.scale(gram, 1.0 / batch as f64)?,
    };
    let eye = g.constant(Tensor::eye(dim));
    let diff = g.sub(gram, eye)?;
    g.frobenius_sq(diff)
}

/// Stage-1 loss on dependency frames laid out `B×T×D`.
pub fn stage1_terms(g: &mut Graph, s: Var, l: Var, lambda: f64, mode: LossMode) -> Result<Stage1Terms> {
    check_lambda(lambda)?;
    let (b, t, d) = g.value(s).dims3()?;
    if g.value(l).shape() != g.value(s).shape() {
        return Err(Error::shape("stage1_loss", g.value(s).shape(), g.value(l).shape()));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("stage-1 loss needs a batch of at least 2, got {b}")));
    }
    let feature_scale = match mode {
        LossMode::Literal => 1.0 / b as f64,
        LossMode::GramScaled => 1.0,
    };

    let standardize = |g: &mut Graph, x: Var, cols: usize| -> Result<Var> {
        let flat = g.reshape(x, &[b, cols])?;
        let z = g.batch_standardize(flat, STANDARDIZE_EPS)?;
        if feature_scale == 1.0 {
            Ok(z)
        } else {
            g.scale(z, feature_scale)
        }
    };

    let zs = standardize(g, s, t * d)?;
    let zl = standardize(g, l, t * d)?;
    let diff = g.sub(zs, zl)?;
    let cross = g.frobenius_sq(diff)?;
    let cross = g.scale(cross, 1.0 / t as f64)?;

    let s_mean = g.reduce_mean(s, 1)?;
    let l_mean = g.reduce_mean(l, 1)?;
    let xs = standardize(g, s_mean, d)?;
    let xl = standardize(g, l_mean, d)?;
    let style = redundancy(g, xs, b, d, mode)?;
    let linguistics = redundancy(g, xl, b, d, mode)?;
    let intra = g.add(style, linguistics)?;
    let weighted = g.scale(intra, lambda)?;
    let total = g.add(cross, weighted)?;
    Ok(Stage1Terms { total, cross, intra, style, linguistics })
}

/// Rearranges `B×D×T` into `B×T×D`.
pub fn time_major(x: &Tensor) -> Result<Tensor> {
    let (b, d, t) = x.dims3()?;
    let src = x.data();
    let mut out = vec![0.0; b * t * d];
    for bi in 0..b {
        for di in 0..d {
            for ti in 0..t {
                out[(bi * t + ti) * d + di] = src[(bi * d + di) * t + ti];
            }
        }
    }
    Tensor::new(vec![b, t, d], out)
}

/// Stage-1 loss on `B×D×T` dependency features.
pub fn stage1_loss(s: &Tensor, l: &Tensor, lambda: f64, mode: LossMode) -> Result<Stage1LossBreakdown> {
    if s.shape() != l.shape() {
        return Err(Error::shape("stage1_loss", s.shape(), l.shape()));
    }
    let mut g = Graph::new();
    let sv = g.constant(time_major(s)?);
    let lv = g.constant(time_major(l)?);
    let terms = stage1_terms(&mut g, sv, lv, lambda, mode)?;
    Ok(terms.breakdown(&g, lambda))
}

/// Mean binary cross-entropy of `logits` against labels in {0, 1}.
pub fn bce_loss(logits: &Tensor, labels: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let loss = g.bce_with_logits(z, labels)?;
    Ok(g.value(loss).item())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::check_gradients;

    fn hand_example() -> (Tensor, Tensor) {
        let s = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let l = Tensor::new(vec![2, 2, 1], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        (s, l)
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn hand_example_literal_mode() {
        let (s, l) = hand_example();
        let r = stage1_loss(&s, &l, DEFAULT_LAMBDA, LossMode::Literal).unwrap();
        assert!((r.cross - 2.0).abs() < 1e-9);
        assert!((r.style - 1.0).abs() < 1e-9);
        assert!((r.linguistics - 1.0).abs() < 1e-9);
        assert!((r.total - 2.014).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn hand_example_gram_scaled_mode() {
        // Unscaled standardized features: cross 8, Gram/B = [[1,1],[1,1]] so
        // each subspace contributes 2.
        let (s, l) = hand_example();
        let r = stage1_loss(&s, &l, DEFAULT_LAMBDA, LossMode::GramScaled).unwrap();
        assert!((r.cross - 8.0).abs() < 1e-9);
        assert!((r.intra - 4.0).abs() < 1e-9);
        assert!((r.total - 8.028).abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn zero_loss_for_identical_decorrelated_features() {
        let cols = [[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, 1.0, -1.0]];
        let data: Vec<f64> = (0..4).flat_map(|b| [cols[0][b], cols[1][b]]).collect();
        let s = Tensor::new(vec![4, 2, 1], data).unwrap();
        let r = stage1_loss(&s, &s, DEFAULT_LAMBDA, LossMode::GramScaled).unwrap();
        assert!(r.total.abs() < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_small_batches_bad_shapes_and_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = random(&[1, 3, 2], &mut rng);
        assert!(stage1_loss(&one, &one, 0.007, LossMode::GramScaled).is_err());
        let a = random(&[2, 3, 2], &mut rng);
        let b = random(&[2, 3, 3], &mut rng);
        assert!(matches!(stage1_loss(&a, &b, 0.007, LossMode::GramScaled), Err(Error::Shape { .. })));
        assert!(stage1_loss(&a, &a, 1.5, LossMode::GramScaled).is_err());
    }

    #[test]
    fn breakdown_identity_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..100 {
            let mode = if i % 2 == 0 { LossMode::Literal } else { LossMode::GramScaled };
            let s = random(&[4, 5, 3], &mut rng);
            let l = random(&[4, 5, 3], &mut rng);
            let lambda = rng.random_range(0.0..1.0);
            let r = stage1_loss(&s, &l, lambda, mode).unwrap();
            assert!((r.total - (r.cross + lambda * r.intra)).abs() < 1e-12);
            assert!((r.intra - (r.style + r.linguistics)).abs() < 1e-12);
            assert!(r.cross >= 0.0 && r.style >= 0.0 && r.linguistics >= 0.0);
        }
    }

    #[test]
    fn cross_of_identical_inputs_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random(&[5, 4, 3], &mut rng);
        for mode in [LossMode::Literal, LossMode::GramScaled] {
            assert_eq!(stage1_loss(&s, &s, 0.007, mode).unwrap().cross, 0.0);
        }
    }

    fn permute_batch(x: &Tensor, perm: &[usize]) -> Tensor {
        let per = x.numel() / x.shape()[0];
        let data = perm.iter().flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec()).collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symmetric_and_permutation_invariant(seed in any::<u64>(), literal in any::<bool>()) {
            let mode = if literal { LossMode::Literal } else { LossMode::GramScaled };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random(&[5, 3, 4], &mut rng);
            let l = random(&[5, 3, 4], &mut rng);
            let base = stage1_loss(&s, &l, 0.007, mode).unwrap();
            let swapped = stage1_loss(&l, &s, 0.007, mode).unwrap();
            prop_assert!((base.total - swapped.total).abs() < 1e-10);
            let perm = [3, 0, 4, 1, 2];
            let p = stage1_loss(&permute_batch(&s, &perm), &permute_batch(&l, &perm), 0.007, mode).unwrap();
            for (a, b) in [(base.cross, p.cross), (base.style, p.style), (base.linguistics, p.linguistics), (base.total, p.total)] {
                prop_assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn gradients_in_both_modes() {
        for mode in [LossMode::Literal, LossMode::GramScaled] {
            for trial in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(50 + trial);
                let inputs = [random(&[4, 3, 8], &mut rng), random(&[4, 3, 8], &mut rng)];
                let f = |g: &mut Graph, v: &[Var]| Ok(stage1_terms(g, v[0], v[1], DEFAULT_LAMBDA, mode)?.total);
                let check = check_gradients(f, &inputs, 1e-4).unwrap();
                assert!(check.passed, "{mode} trial {trial}: {check:?}");
            }
        }
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&Tensor::vector(vec![0.0]), &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&Tensor::vector(vec![0.0]), &[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_loss(&Tensor::vector(vec![20.0]), &[1.0]).unwrap() < 1e-8);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((bce_loss(&Tensor::vector(vec![1.0]), &[1.0]).unwrap() - expected).abs() < 1e-12);
        assert!(bce_loss(&Tensor::vector(vec![1.0]), &[0.5]).is_err());
    }
}
