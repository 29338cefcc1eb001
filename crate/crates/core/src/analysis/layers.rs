use crate::error::{Error, Result};
use crate::metrics::{fractional_ranks, pearson};
use crate::store::EmbeddingTensor;
use crate::tensor::Tensor;

/// How per-layer vectors are turned into one Spearman coefficient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpearmanPooling {
    /// ρ per sample between the two time-averaged `F`-vectors, averaged over
    /// samples.
    #[default]
    PerSample,
    /// One ρ over the concatenation of all samples' `F`-vectors.
    Concatenated,
}

/// Time-averaged `F`-vector of every layer, `K` rows.
pub fn layer_means(e: &EmbeddingTensor) -> Vec<Vec<f64>> {
    (0..e.layers()).map(|k| e.layer_time_mean(k)).collect()
}

/// `K_a×K_b` matrix of Spearman correlations between every layer of the `a`
/// embeddings and every layer of the `b` embeddings, over aligned samples.
pub fn layer_spearman_matrix(a: &[EmbeddingTensor], b: &[EmbeddingTensor], pooling: SpearmanPooling) -> Result<Tensor> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("{} samples in one set, {} in the other", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 aligned samples, got {}", a.len())));
    }
    let (ka, kb, f) = (a[0].layers(), b[0].layers(), a[0].features());
    for (x, y) in a.iter().zip(b) {
        if x.layers() != ka || y.layers() != kb || x.features() != f || y.features() != f {
            return Err(Error::shape(
                "layer_spearman_matrix",
                &[x.layers(), x.features()],
                &[y.layers(), y.features()],
            ));
        }
    }
    let ma: Vec<Vec<Vec<f64>>> = a.iter().map(layer_means).collect();
    let mb: Vec<Vec<Vec<f64>>> = b.iter().map(layer_means).collect();
    layer_spearman_from_means(&ma, &mb, pooling)
}

/// Same as [`layer_spearman_matrix`] on precomputed [`layer_means`], one
/// entry per sample.
pub fn layer_spearman_from_means(
    ma: &[Vec<Vec<f64>>],
    mb: &[Vec<Vec<f64>>],
    pooling: SpearmanPooling,
) -> Result<Tensor> {
    if ma.len() != mb.len() {
        return Err(Error::InvalidArgument(format!("{} samples in one set, {} in the other", ma.len(), mb.len())));
    }
    if ma.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 aligned samples, got {}", ma.len())));
    }
    let (ka, kb) = (ma[0].len(), mb[0].len());
    let f = ma[0].first().map_or(0, Vec::len);
    for (x, y) in ma.iter().zip(mb) {
        if x.len() != ka || y.len() != kb || x.iter().chain(y).any(|v| v.len() != f) {
            return Err(Error::shape("layer_spearman_from_means", &[x.len(), f], &[y.len(), f]));
        }
    }
    let mut out = vec![0.0; ka * kb];
    match pooling {
        SpearmanPooling::PerSample => {
            let ra: Vec<Vec<Vec<f64>>> = ma.iter().map(|s| s.iter().map(|v| fractional_ranks(v)).collect()).collect();
            let rb: Vec<Vec<Vec<f64>>> = mb.iter().map(|s| s.iter().map(|v| fractional_ranks(v)).collect()).collect();
            for i in 0..ka {
                for j in 0..kb {
                    let mut sum = 0.0;
                    for (x, y) in ra.iter().zip(&rb) {
                        sum += pearson(&x[i], &y[j])?;
                    }
                    out[i * kb + j] = sum / ma.len() as f64;
                }
            }
        }
        SpearmanPooling::Concatenated => {
            let concat = |m: &[Vec<Vec<f64>>], k: usize| fractional_ranks(&m.iter().flat_map(|s| s[k].clone()).collect::<Vec<_>>());
            let ra: Vec<Vec<f64>> = (0..ka).map(|i| concat(ma, i)).collect();
            let rb: Vec<Vec<f64>> = (0..kb).map(|j| concat(mb, j)).collect();
            for i in 0..ka {
                for j in 0..kb {
                    out[i * kb + j] = pearson(&ra[i], &rb[j])?;
                }
            }
        }
    }
    Tensor::new(vec![ka, kb], out)
}

#[cfg(test)]
mod tests {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::spearman;
    use crate::store::Subspace;

    fn random_emb(k: usize, f: usize, t: usize, rng: &mut ChaCha8Rng) -> EmbeddingTensor {
        let d = (0..k * f * t).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        EmbeddingTensor::new(Subspace::Style, k, f, t, d).unwrap()
    }

    #[test]
    fn self_correlation_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<_> = (0..5).map(|_| random_emb(4, 16, 3, &mut rng)).collect();
        for pooling in [SpearmanPooling::PerSample, SpearmanPooling::Concatenated] {
            let m = layer_spearman_matrix(&a, &a, pooling).unwrap();
            for i in 0..4 {
                assert!((m.data()[i * 4 + i] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_and_agreement_with_direct_spearman() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<_> = (0..3).map(|_| random_emb(11, 12, 4, &mut rng)).collect();
        let b: Vec<_> = (0..3).map(|_| random_emb(8, 12, 4, &mut rng)).collect();
        let m = layer_spearman_matrix(&a, &b, SpearmanPooling::PerSample).unwrap();
        assert_eq!(m.shape(), &[11, 8]);
        let direct: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| spearman(&x.layer_time_mean(2), &y.layer_time_mean(5)).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((m.data()[2 * 8 + 5] - direct).abs() < 1e-12);
    }

    #[test]
    fn permuted_features_decorrelate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, t) = (1024, 2);
        let mut perm: Vec<usize> = (0..f).collect();
        perm.shuffle(&mut rng);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..100 {
            let x = random_emb(1, f, t, &mut rng);
            let permuted: Vec<f32> = (0..f).flat_map(|fi| x.data()[perm[fi] * t..(perm[fi] + 1) * t].to_vec()).collect();
            b.push(EmbeddingTensor::new(Subspace::Linguistics, 1, f, t, permuted).unwrap());
            a.push(x);
        }
        let m = layer_spearman_matrix(&a, &b, SpearmanPooling::PerSample).unwrap();
        assert!(m.item().abs() < 0.1, "{}", m.item());
    }

    #[test]
    fn needs_two_aligned_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = vec![random_emb(2, 4, 2, &mut rng)];
        assert!(layer_spearman_matrix(&one, &one, SpearmanPooling::PerSample).is_err());
        let two = vec![random_emb(2, 4, 2, &mut rng), random_emb(2, 4, 2, &mut rng)];
        assert!(layer_spearman_matrix(&two, &one, SpearmanPooling::PerSample).is_err());
    }
}
