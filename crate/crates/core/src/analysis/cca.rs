//! Ridge-regularized canonical correlation analysis.
//!
//! Each view is centered and reduced with a thin SVD `X = P S Qᵀ`, so the
//! whitening `(Σ + cI)^(-1/2)` only has to be applied inside the span of `Q`.
//! That keeps the cost at `O(n²F)` when there are fewer samples than
//! features, which is the usual probing regime.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{pearson, welch_ttest, WelchResult};
use crate::tensor::Tensor;

/// Default ridge strength, relative to the mean covariance eigenvalue.
pub const DEFAULT_RIDGE: f64 = 1e-2;
pub const DEFAULT_CCA_DIMS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct CcaModel {
    pub style_mean: Vec<f64>,
    pub linguistics_mean: Vec<f64>,
    /// `F_s×d`
    pub style_proj: DMatrix<f64>,
    /// `F_l×d`
    pub linguistics_proj: DMatrix<f64>,
    /// Per-component Pearson correlation of the training projections,
    /// sorted descending.
    pub correlations: Vec<f64>,
    pub ridge: f64,
}

fn to_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (n, f) = t.dims2()?;
    Ok(DMatrix::from_row_slice(n, f, t.data()))
}

fn center(x: &mut DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    let means: Vec<f64> = x.column_iter().map(|c| c.sum() / n).collect();
    for (mut col, m) in x.column_iter_mut().zip(&means) {
        col.add_scalar_mut(-m);
    }
    means
}

/// Thin-SVD factors of a centered view: `P·diag(s)` (`n×r`), the right
/// singular vectors `Q` (`F×r`) and the whitening scale of each direction.
struct Whitened {
    ps: DMatrix<f64>,
    q: DMatrix<f64>,
    scale: DVector<f64>,
}

fn whiten(x: &DMatrix<f64>, ridge: f64, view: &str) -> Result<Whitened> {
    let (n, f) = x.shape();
    let svd = x.clone().svd(true, true);
    let (Some(p), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical(format!("SVD of the {view} view failed")));
    };
    let s = svd.singular_values;
    let var = s.map(|v| v * v / (n - 1) as f64);
    let c = ridge * var.sum() / f as f64;
    let tol = 1e-12 * var.max().max(f64::MIN_POSITIVE);
    let scale = var.map(|v| if v + c > tol { 1.0 / (v + c).sqrt() } else { 0.0 });
    if scale.iter().all(|&k| k == 0.0) {
        return Err(Error::Numerical(format!("{view} view has no variance")));
    }
    let ps = p * DMatrix::from_diagonal(&s);
    Ok(Whitened { ps, q: vt.transpose(), scale })
}

/// Fits `dims` canonical pairs on row-aligned views `style` (`n×F_s`) and
/// `linguistics` (`n×F_l`).
pub fn cca_fit(style: &Tensor, linguistics: &Tensor, dims: usize, ridge: f64) -> Result<CcaModel> {
    let (n, fs) = style.dims2()?;
    let (nl, fl) = linguistics.dims2()?;
    if n != nl {
        return Err(Error::shape("cca_fit", style.shape(), linguistics.shape()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("CCA needs at least 2 samples, got {n}")));
    }
    let bound = fs.min(fl).min(n - 1);
    if dims == 0 || dims > bound {
        return Err(Error::InvalidArgument(format!(
            "CCA dims {dims} outside 1..={bound} (min of F_s={fs}, F_l={fl}, n-1={})",
            n - 1
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::InvalidArgument(format!("ridge {ridge} must be finite and nonnegative")));
    }
    let mut xs = to_matrix(style)?;
    let mut xl = to_matrix(linguistics)?;
    let style_mean = center(&mut xs);
    let linguistics_mean = center(&mut xl);
    let ws = whiten(&xs, ridge, "style")?;
    let wl = whiten(&xl, ridge, "linguistics")?;

    // Whitened cross-covariance restricted to the two spans.
    let left = DMatrix::from_diagonal(&ws.scale) * ws.ps.transpose();
    let right = &wl.ps * DMatrix::from_diagonal(&wl.scale);
    let k = left * right / (n - 1) as f64;
    let svd = k.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("SVD of the cross-covariance failed".into()));
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    if order.len() < dims {
        return Err(Error::Numerical(format!("only {} canonical pairs available", order.len())));
    }
    let v = vt.transpose();
    let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), dims, |r, c| m[(r, order[c])]);
    let mut a_s = &ws.q * DMatrix::from_diagonal(&ws.scale) * pick(&u);
    let mut a_l = &wl.q * DMatrix::from_diagonal(&wl.scale) * pick(&v);

    let proj_s = &xs * &a_s;
    let proj_l = &xl * &a_l;
    let mut corr = Vec::with_capacity(dims);
    for c in 0..dims {
        let flip = a_s.column(c).iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0);
        if flip {
            a_s.column_mut(c).neg_mut();
        }
        let cs: Vec<f64> = proj_s.column(c).iter().copied().collect();
        let cl: Vec<f64> = proj_l.column(c).iter().copied().collect();
        let mut r = pearson(&cs, &cl).unwrap_or(0.0);
        if flip {
            r = -r;
        }
        if r < 0.0 {
            a_l.column_mut(c).neg_mut();
            r = -r;
        }
        corr.push(r);
    }

    let mut rank: Vec<usize> = (0..dims).collect();
    rank.sort_by(|&a, &b| corr[b].total_cmp(&corr[a]));
    let reorder = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), dims, |r, c| m[(r, rank[c])]);
    Ok(CcaModel {
        style_mean,
        linguistics_mean,
        style_proj: reorder(&a_s),
        linguistics_proj: reorder(&a_l),
        correlations: rank.iter().map(|&i| corr[i]).collect(),
        ridge,
    })
}

impl CcaModel {
    pub fn dims(&self) -> usize {
        self.correlations.len()
    }

    fn project(mean: &[f64], proj: &DMatrix<f64>, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != mean.len() {
            return Err(Error::shape("cca_project", &[x.len()], &[mean.len()]));
        }
        let centered = DVector::from_iterator(x.len(), x.iter().zip(mean).map(|(a, m)| a - m));
        Ok((proj.transpose() * centered).iter().copied().collect())
    }

    pub fn project_style(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::project(&self.style_mean, &self.style_proj, x)
    }

    pub fn project_linguistics(&self, x: &[f64]) -> Result<Vec<f64>> {
        Self::project(&self.linguistics_mean, &self.linguistics_proj, x)
    }

    /// Pearson correlation between the two projected `d`-vectors of one
    /// sample.
    pub fn project_correlate(&self, style: &[f64], linguistics: &[f64]) -> Result<f64> {
        let ps = self.project_style(style)?;
        let pl = self.project_linguistics(linguistics)?;
        pearson(&ps, &pl).map_err(|e| Error::Numerical(format!("projected vectors are degenerate: {e}")))
    }

    /// Per-component correlation across the rows of two views.
    pub fn dimension_correlations(&self, style: &Tensor, linguistics: &Tensor) -> Result<Vec<f64>> {
        let (n, _) = style.dims2()?;
        if linguistics.dims2()?.0 != n {
            return Err(Error::shape("cca_dimension_correlations", style.shape(), linguistics.shape()));
        }
        let ps: Vec<Vec<f64>> = (0..n).map(|i| self.project_style(style.row(i))).collect::<Result<_>>()?;
        let pl: Vec<Vec<f64>> = (0..n).map(|i| self.project_linguistics(linguistics.row(i))).collect::<Result<_>>()?;
        (0..self.dims())
            .map(|c| {
                let a: Vec<f64> = ps.iter().map(|p| p[c]).collect();
                let b: Vec<f64> = pl.iter().map(|p| p[c]).collect();
                pearson(&a, &b)
            })
            .collect()
    }
}

/// Time-averaged style and linguistics vectors of one sample.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub id: String,
    /// Real samples use `"real"`; fakes use their attack id or `"fake"`.
    pub group: String,
    pub is_real: bool,
    pub style: Vec<f64>,
    pub linguistics: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCorrelation {
    pub class: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaProbeReport {
    pub fit_n: usize,
    pub dims: usize,
    pub ridge: f64,
    pub training_correlations: Vec<f64>,
    /// One row per group: held-out reals first, then each fake group, then
    /// all fakes pooled.
    pub groups: Vec<GroupCorrelation>,
    /// Held-out reals against pooled fakes.
    pub welch_t: Option<f64>,
    pub welch_df: Option<f64>,
    pub welch_p: Option<f64>,
    /// Per-sample `(id, group, r)` for the evaluated samples.
    pub samples: Vec<(String, String, f64)>,
}

fn group_stats(class: &str, r: &[f64]) -> GroupCorrelation {
    let n = r.len();
    let mean = r.iter().sum::<f64>() / n.max(1) as f64;
    let std = if n > 1 {
        (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    GroupCorrelation { class: class.into(), n, mean, std }
}

/// Fits CCA on `fit_n` randomly chosen real samples and reports the
/// per-sample projected correlation of every other sample, by group.
pub fn cca_probe(samples: &[ProbeSample], fit_n: usize, dims: usize, ridge: f64, seed: u64) -> Result<CcaProbeReport> {
    let mut reals: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].is_real).collect();
    if reals.len() <= fit_n {
        return Err(Error::InvalidArgument(format!(
            "need more than {fit_n} real samples to fit and evaluate, got {}",
            reals.len()
        )));
    }
    reals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fit = reals[..fit_n].to_vec();
    fit.sort_unstable();
    let stack = |pick: &dyn Fn(&ProbeSample) -> &Vec<f64>| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = fit.iter().map(|&i| pick(&samples[i]).clone()).collect();
        Tensor::from_rows(&rows)
    };
    let model = cca_fit(&stack(&|s| &s.style)?, &stack(&|s| &s.linguistics)?, dims, ridge)?;

    let mut per_sample = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if fit.binary_search(&i).is_ok() {
            continue;
        }
        let r = model.project_correlate(&s.style, &s.linguistics)?;
        per_sample.push((s.id.clone(), s.group.clone(), r, s.is_real));
    }
    let real_r: Vec<f64> = per_sample.iter().filter(|p| p.3).map(|p| p.2).collect();
    let fake_r: Vec<f64> = per_sample.iter().filter(|p| !p.3).map(|p| p.2).collect();
    let mut groups = vec![group_stats("real", &real_r)];
    let mut fake_groups: Vec<String> = per_sample.iter().filter(|p| !p.3).map(|p| p.1.clone()).collect();
    fake_groups.sort();
    fake_groups.dedup();
    for gname in &fake_groups {
        let r: Vec<f64> = per_sample.iter().filter(|p| !p.3 && &p.1 == gname).map(|p| p.2).collect();
        groups.push(group_stats(gname, &r));
    }
    if fake_groups.len() > 1 {
        groups.push(group_stats("fake (all)", &fake_r));
    }
    let welch: Option<WelchResult> = if real_r.len() >= 2 && fake_r.len() >= 2 {
        welch_ttest(&real_r, &fake_r).ok()
    } else {
        None
    };
    Ok(CcaProbeReport {
        fit_n,
        dims,
        ridge,
        training_correlations: model.correlations.clone(),
        groups,
        welch_t: welch.map(|w| w.t),
        welch_df: welch.map(|w| w.df),
        welch_p: welch.map(|w| w.p),
        samples: per_sample.into_iter().map(|(id, g, r, _)| (id, g, r)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gaussian(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let d = (0..n * f).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(vec![n, f], d).unwrap()
    }

    #[test]
    fn identical_views_correlate_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = gaussian(60, 8, &mut rng);
        let m = cca_fit(&x, &x, 5, DEFAULT_RIDGE).unwrap();
        assert!(m.correlations.iter().all(|&r| (r - 1.0).abs() < 1e-10), "{:?}", m.correlations);
    }

    #[test]
    fn invertible_linear_relation_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(400, 10, &mut rng);
        let w = gaussian(10, 10, &mut rng);
        let y = x.matmul(&w).unwrap();
        let m = cca_fit(&x, &y, 10, 1e-6).unwrap();
        assert!(m.correlations.iter().all(|&r| r > 0.99), "{:?}", m.correlations);
        let fresh = gaussian(1, 10, &mut rng);
        let fy = fresh.matmul(&w).unwrap();
        assert!(m.project_correlate(fresh.data(), fy.data()).unwrap() > 0.9);
    }

    #[test]
    fn independent_views_have_low_held_out_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, n) = (20, 200);
        let m = cca_fit(&gaussian(n, f, &mut rng), &gaussian(n, f, &mut rng), 20, DEFAULT_RIDGE).unwrap();
        let held_out = m.dimension_correlations(&gaussian(n, f, &mut rng), &gaussian(n, f, &mut rng)).unwrap();
        let mean = held_out.iter().sum::<f64>() / 20.0;
        assert!(mean.abs() < 0.2, "{mean}");
        // In-sample correlations of independent views carry the usual
        // overfitting bias: their squares sum to roughly F_s·F_l/n.
        let sq: f64 = m.correlations.iter().map(|r| r * r).sum();
        assert!(sq < 2.0 * (f * f) as f64 / n as f64, "{sq}");
    }

    #[test]
    fn correlations_sorted_in_unit_interval_and_signs_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = gaussian(50, 12, &mut rng);
        let y = gaussian(50, 9, &mut rng);
        let m = cca_fit(&x, &y, 6, DEFAULT_RIDGE).unwrap();
        assert!(m.correlations.windows(2).all(|w| w[0] >= w[1]));
        assert!(m.correlations.iter().all(|&r| (0.0..=1.0 + 1e-12).contains(&r)));
        for c in 0..6 {
            let first = m.style_proj.column(c).iter().copied().find(|v| *v != 0.0).unwrap();
            assert!(first > 0.0);
        }
        let dims = m.dimension_correlations(&x, &y).unwrap();
        for (a, b) in dims.iter().zip(&m.correlations) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn affine_invariance_with_small_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(300, 6, &mut rng);
        let z = gaussian(300, 6, &mut rng);
        let y = Tensor::new(vec![300, 6], x.data().iter().zip(z.data()).map(|(a, b)| a + 0.8 * b).collect()).unwrap();
        let base = cca_fit(&x, &y, 6, 1e-9).unwrap();
        let a = gaussian(6, 6, &mut rng);
        let xt = x.matmul(&a).unwrap().map(|v| 3.0 + v);
        let moved = cca_fit(&xt, &y, 6, 1e-9).unwrap();
        for (p, q) in base.correlations.iter().zip(&moved.correlations) {
            assert!((p - q).abs() < 1e-3, "{p} vs {q}");
        }
    }

    #[test]
    fn underdetermined_fit_uses_sample_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(100, 300, &mut rng);
        let y = gaussian(100, 300, &mut rng);
        let m = cca_fit(&x, &y, 20, DEFAULT_RIDGE).unwrap();
        assert_eq!(m.style_proj.shape(), (300, 20));
        assert!(m.correlations.iter().all(|r| r.is_finite()));
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(10, 4, &mut rng);
        assert!(cca_fit(&x, &x, 5, DEFAULT_RIDGE).is_err());
        assert!(cca_fit(&x, &x, 0, DEFAULT_RIDGE).is_err());
        assert!(cca_fit(&gaussian(1, 4, &mut rng), &gaussian(1, 4, &mut rng), 1, DEFAULT_RIDGE).is_err());
        let m = cca_fit(&x, &x, 3, DEFAULT_RIDGE).unwrap();
        let mean = m.style_mean.clone();
        assert!(matches!(m.project_correlate(&mean, x.row(0)), Err(Error::Numerical(_))));
        assert!(m.project_correlate(&[1.0; 3], x.row(0)).is_err());
    }

    #[test]
    fn probe_separates_dependent_from_independent_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (f, d) = (30, 5);
        let ws = gaussian(d, f, &mut rng);
        let wl = gaussian(d, f, &mut rng);
        let mut samples = Vec::new();
        for i in 0..240 {
            let is_real = i < 160;
            let z = gaussian(1, d, &mut rng);
            let z2 = if is_real { z.clone() } else { gaussian(1, d, &mut rng) };
            let noise = |rng: &mut ChaCha8Rng| (0..f).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let s: Vec<f64> = z.matmul(&ws).unwrap().data().iter().zip(noise(&mut rng)).map(|(a, b)| a + b).collect();
            let l: Vec<f64> = z2.matmul(&wl).unwrap().data().iter().zip(noise(&mut rng)).map(|(a, b)| a + b).collect();
            samples.push(ProbeSample {
                id: format!("s{i}"),
                group: if is_real { "real".into() } else { "fake".into() },
                is_real,
                style: s,
                linguistics: l,
            });
        }
        let report = cca_probe(&samples, 100, 5, DEFAULT_RIDGE, 0).unwrap();
        assert_eq!(report.groups[0].n, 60);
        assert_eq!(report.groups[1].n, 80);
        assert!(report.groups[0].mean > report.groups[1].mean);
        assert!(report.welch_p.unwrap() < 0.05);
        let again = cca_probe(&samples, 100, 5, DEFAULT_RIDGE, 0).unwrap();
        assert_eq!(report, again);
    }
}
