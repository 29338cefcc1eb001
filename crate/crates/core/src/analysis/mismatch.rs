use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{cosine_distance, welch_ttest, ScoreSummary};
use crate::model::{ModelCheckpoint, ModelConfig, SlimModel};
use crate::store::{make_batches, Label, SampleSet};

/// Floor applied before taking log10 of a distance.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDistance {
    pub id: String,
    pub label: Label,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistances {
    pub class: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    /// Same statistics on `log10(distance)`.
    pub log10: ScoreSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Bin edges on the log10 scale, `bins + 1` values.
    pub log10_edges: Vec<f64>,
    pub real: Vec<usize>,
    pub fake: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub classes: Vec<ClassDistances>,
    pub welch_t: Option<f64>,
    pub welch_df: Option<f64>,
    pub welch_p: Option<f64>,
    pub histogram: Histogram,
    pub warnings: Vec<String>,
    pub samples: Vec<SampleDistance>,
}

fn class_stats(class: &str, d: &[f64]) -> Result<ClassDistances> {
    let s = ScoreSummary::of(d)?;
    let logs: Vec<f64> = d.iter().map(|v| v.max(LOG_FLOOR).log10()).collect();
    Ok(ClassDistances {
        class: class.into(),
        n: s.n,
        mean: s.mean,
        std: s.std,
        min: s.min,
        q25: s.q25,
        median: s.median,
        q75: s.q75,
        max: s.max,
        log10: ScoreSummary::of(&logs)?,
    })
}

fn histogram(samples: &[SampleDistance], bins: usize) -> Histogram {
    let logs: Vec<f64> = samples.iter().map(|s| s.distance.max(LOG_FLOOR).log10()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let log10_edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut real = vec![0; bins];
    let mut fake = vec![0; bins];
    for (s, v) in samples.iter().zip(&logs) {
        let bin = (((v - lo) / width) as usize).min(bins - 1);
        match s.label {
            Label::Real => real[bin] += 1,
            Label::Fake => fake[bin] += 1,
        }
    }
    Histogram { log10_edges, real, fake }
}

/// Summarizes per-sample distances by class. With a single class the Welch
/// fields stay empty and a warning is recorded.
pub fn summarize_distances(samples: Vec<SampleDistance>, bins: usize) -> Result<MismatchReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples to summarize".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let pick = |l: Label| samples.iter().filter(|s| s.label == l).map(|s| s.distance).collect::<Vec<_>>();
    let (real, fake) = (pick(Label::Real), pick(Label::Fake));
    let mut classes = Vec::new();
    let mut warnings = Vec::new();
    for (name, d) in [("real", &real), ("fake", &fake)] {
        if !d.is_empty() {
            classes.push(class_stats(name, d)?);
        }
    }
    let mut welch = None;
    if real.is_empty() || fake.is_empty() {
        warnings.push("single-class input: no significance test".to_string());
    } else if real.len() < 2 || fake.len() < 2 {
        warnings.push("a class has fewer than two samples: no significance test".to_string());
    } else {
        match welch_ttest(&fake, &real) {
            Ok(w) => welch = Some(w),
            Err(e) => warnings.push(format!("significance test skipped: {e}")),
        }
    }
    Ok(MismatchReport {
        classes,
        welch_t: welch.map(|w| w.t),
        welch_df: welch.map(|w| w.df),
        welch_p: welch.map(|w| w.p),
        histogram: histogram(&samples, bins),
        warnings,
        samples,
    })
}

/// Cosine distance between `S̄` and `L̄` for every sample, computed with the
/// stage-1 compression modules in eval mode. Welch's test compares fake
/// against real, so a positive `t` means fakes are further apart.
pub fn mismatch_report(set: &SampleSet, ckpt: &ModelCheckpoint, bins: usize) -> Result<MismatchReport> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("no samples to analyze".into()));
    }
    let mut mc = ModelConfig::default();
    mc.apply(&ckpt.config)?;
    mc.input_dim = set.samples[0].features();
    let target_frames = ckpt.config.parse_value("Target frames")?.unwrap_or(50);
    let model = SlimModel::new(mc)?;
    let mut samples = Vec::with_capacity(set.len());
    let labels: std::collections::HashMap<&str, Label> =
        set.samples.iter().map(|s| (s.id.as_str(), s.label)).collect();
    for batch in make_batches(set, 16, target_frames, None)? {
        let (s, l) = model.dependency_means(&ckpt.params, &batch.style, &batch.linguistics)?;
        for (i, id) in batch.ids.iter().enumerate() {
            samples.push(SampleDistance {
                id: id.clone(),
                label: labels[id.as_str()],
                distance: cosine_distance(s.row(i), l.row(i))?,
            });
        }
    }
    summarize_distances(samples, bins)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::metrics::percentile;

    fn sd(i: usize, label: Label, distance: f64) -> SampleDistance {
        SampleDistance { id: format!("s{i}"), label, distance }
    }

    /// Quantile by explicit linear interpolation between order statistics.
    fn brute_quantile(v: &[f64], q: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let pos = q * (s.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
    }

    #[test]
    fn quartiles_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [2usize, 3, 7, 50] {
            let samples: Vec<_> = (0..2 * n)
                .map(|i| sd(i, if i % 2 == 0 { Label::Real } else { Label::Fake }, rng.random_range(0.0..2.0)))
                .collect();
            let report = summarize_distances(samples.clone(), 10).unwrap();
            for c in &report.classes {
                let d: Vec<f64> = samples.iter().filter(|s| s.label.as_str() == c.class).map(|s| s.distance).collect();
                assert_eq!(c.q25, brute_quantile(&d, 0.25));
                assert_eq!(c.median, brute_quantile(&d, 0.5));
                assert_eq!(c.q75, brute_quantile(&d, 0.75));
                let mut sorted = d.clone();
                sorted.sort_by(f64::total_cmp);
                assert_eq!(c.median, percentile(&sorted, 0.5));
            }
            let total: usize = report.histogram.real.iter().chain(&report.histogram.fake).sum();
            assert_eq!(total, 2 * n);
        }
    }

    #[test]
    fn identical_features_give_degenerate_report() {
        let samples: Vec<_> = (0..6).map(|i| sd(i, if i < 3 { Label::Real } else { Label::Fake }, 0.0)).collect();
        let report = summarize_distances(samples, 5).unwrap();
        assert!(report.classes.iter().all(|c| c.max == 0.0 && c.mean == 0.0));
        assert!(report.welch_p.is_none());
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn single_class_warns() {
        let samples: Vec<_> = (0..4).map(|i| sd(i, Label::Real, 0.1 * i as f64 + 0.1)).collect();
        let report = summarize_distances(samples, 3).unwrap();
        assert_eq!(report.classes.len(), 1);
        assert!(report.welch_t.is_none());
        assert!(report.warnings[0].contains("single-class"));
    }

    #[test]
    fn separated_classes_are_significant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..80)
            .map(|i| {
                let fake = i % 2 == 1;
                let base = if fake { 0.5 } else { 0.1 };
                sd(i, if fake { Label::Fake } else { Label::Real }, base + rng.random_range(0.0..0.1))
            })
            .collect();
        let report = summarize_distances(samples, 8).unwrap();
        assert!(report.welch_t.unwrap() > 0.0);
        assert!(report.welch_p.unwrap() < 1e-5);
        let json = serde_json::to_value(&report).unwrap();
        for key in ["classes", "welch_t", "welch_p", "histogram"] {
            assert!(json.get(key).is_some());
        }
    }
}
