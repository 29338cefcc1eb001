//! Stage-1 loss on a hand-sized batch in both normalization modes, plus the
//! breakdown on random features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slim::losses::{stage1_loss, LossMode, DEFAULT_LAMBDA};
use slim::Tensor;

fn main() -> slim::Result<()> {
    // Two samples, two features, one frame: B×D×T.
    let s = Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, -1.0, -1.0])?;
    let l = Tensor::new(vec![2, 2, 1], vec![1.0, -1.0, -1.0, 1.0])?;
    for mode in [LossMode::Literal, LossMode::GramScaled] {
        let r = stage1_loss(&s, &l, DEFAULT_LAMBDA, mode)?;
        println!(
            "{mode:<11} total {:.4} = cross {:.4} + {} * (style {:.4} + linguistics {:.4})",
            r.total, r.cross, r.lambda, r.style, r.linguistics
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random = |shape: [usize; 3]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let (s, l) = (random([16, 32, 10])?, random([16, 32, 10])?);
    let independent = stage1_loss(&s, &l, DEFAULT_LAMBDA, LossMode::GramScaled)?;
    let identical = stage1_loss(&s, &s, DEFAULT_LAMBDA, LossMode::GramScaled)?;
    println!("independent views: cross {:.3}, intra {:.3}", independent.cross, independent.intra);
    println!("identical views:   cross {:.3}, intra {:.3}", identical.cross, identical.intra);
    Ok(())
}
