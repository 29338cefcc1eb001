//! Evaluation metrics and the statistics behind the analysis reports.
//!
//! Score orientation: higher means "more real". For F1 the positive class is
//! **fake**, the detection target.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::Label;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EerPoint {
    pub eer: f64,
    pub threshold: f64,
}

/// False acceptance and false rejection rates at threshold `theta`.
fn rates(real_sorted: &[f64], fake_sorted: &[f64], theta: f64) -> (f64, f64) {
    let fake_below = fake_sorted.partition_point(|&s| s < theta);
    let real_below = real_sorted.partition_point(|&s| s < theta);
    (
        (fake_sorted.len() - fake_below) as f64 / fake_sorted.len() as f64,
        real_below as f64 / real_sorted.len() as f64,
    )
}

/// Candidate thresholds: one below every score, the midpoints of the sorted
/// unique scores, and one above every score.
pub fn eer_thresholds(scores_real: &[f64], scores_fake: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = scores_real.iter().chain(scores_fake).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(all[0] - 1.0);
    out.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    out.push(all[all.len() - 1] + 1.0);
    out
}

/// Locates the FAR = FRR crossing on a threshold sweep, interpolating
/// linearly between the two straddling operating points.
pub fn eer_from_curve(thresholds: &[f64], far: &[f64], frr: &[f64]) -> EerPoint {
    let mut prev = 0;
    for i in 0..thresholds.len() {
        let d = far[i] - frr[i];
        if d == 0.0 {
            return EerPoint {
                eer: far[i],
                threshold: thresholds[i],
            };
        }
        if d < 0.0 && i > 0 {
            let d0 = far[prev] - frr[prev];
            let alpha = d0 / (d0 - d);
            return EerPoint {
                eer: far[prev] + alpha * (far[i] - far[prev]),
                threshold: thresholds[prev] + alpha * (thresholds[i] - thresholds[prev]),
            };
        }
        prev = i;
    }
    // FAR reaches 0 and FRR reaches 1 at the last threshold, so a crossing
    // always exists when both lists are non-empty.
    let last = thresholds.len() - 1;
    EerPoint {
        eer: 0.5 * (far[last] + frr[last]),
        threshold: thresholds[last],
    }
}

/// Equal error rate of a detector whose scores are higher for real speech.
pub fn eer(scores_real: &[f64], scores_fake: &[f64]) -> Result<EerPoint> {
    if scores_real.is_empty() || scores_fake.is_empty() {
        return Err(Error::InvalidArgument("EER needs scores for both classes".into()));
    }
    if scores_real.iter().chain(scores_fake).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("EER scores".into()));
    }
    let mut real = scores_real.to_vec();
    let mut fake = scores_fake.to_vec();
    real.sort_by(f64::total_cmp);
    fake.sort_by(f64::total_cmp);
    let thresholds = eer_thresholds(&real, &fake);
    let (far, frr): (Vec<f64>, Vec<f64>) = thresholds.iter().map(|&t| rates(&real, &fake, t)).unzip();
    Ok(eer_from_curve(&thresholds, &far, &frr))
}

/// F1 with fake as the positive class; 0 when there are no positives at all.
pub fn f1(predicted_fake: &[bool], is_fake: &[bool]) -> Result<f64> {
    if predicted_fake.len() != is_fake.len() {
        return Err(Error::InvalidArgument(format!(
            "f1: {} predictions for {} labels",
            predicted_fake.len(),
            is_fake.len()
        )));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &y) in predicted_fake.iter().zip(is_fake) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 0.0 } else { (2 * tp) as f64 / denom as f64 })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson needs two equal-length lists of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numerical("pearson: zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; ties share the average of their positions.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs two equal-length lists of at least 2 values, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
        .map_err(|_| Error::Numerical("spearman: all values tied".into()))
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_distance", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numerical("cosine distance of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("welch t-test needs at least 2 values per sample".into()));
    }
    let (va, vb) = (sample_variance(a) / a.len() as f64, sample_variance(b) / b.len() as f64);
    if va == 0.0 && vb == 0.0 {
        return Err(Error::Numerical("welch t-test: both samples have zero variance".into()));
    }
    let se2 = va + vb;
    let t = (mean(a) - mean(b)) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok(WelchResult {
        t,
        df,
        p: student_t_two_sided_p(t, df),
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// One-sided `P(T >= t)`.
pub fn student_t_upper_tail(t: f64, df: f64) -> f64 {
    let half = 0.5 * student_t_two_sided_p(t, df);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

/// `ln Γ(x)` for `x > 0`, Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)` via Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Percentile of sorted data with linear interpolation between closest ranks
/// (`q` in [0, 1]).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl ScoreSummary {
    /// `std` is the unbiased sample deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("summary of no values".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(ScoreSummary {
            n: values.len(),
            mean: mean(values),
            std: if values.len() > 1 { sample_variance(values).sqrt() } else { 0.0 },
            min: sorted[0],
            q25: percentile(&sorted, 0.25),
            median: percentile(&sorted, 0.5),
            q75: percentile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub f1: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub real_scores: ScoreSummary,
    pub fake_scores: ScoreSummary,
    /// Set when the raw scores ranked fakes above reals and the EER was
    /// computed on negated scores.
    pub orientation_flipped: bool,
}

impl EvalReport {
    /// Builds a report from `(label, score)` pairs. A sample is predicted
    /// fake when its score is below `decision_threshold`.
    pub fn from_scores(scored: &[(Label, f64)], decision_threshold: f64) -> Result<Self> {
        let real: Vec<f64> = scored.iter().filter(|s| s.0 == Label::Real).map(|s| s.1).collect();
        let fake: Vec<f64> = scored.iter().filter(|s| s.0 == Label::Fake).map(|s| s.1).collect();
        let mut point = eer(&real, &fake)?;
        let mut flipped = false;
        if point.eer > 0.5 {
            let neg = |v: &[f64]| v.iter().map(|s| -s).collect::<Vec<_>>();
            point = eer(&neg(&real), &neg(&fake))?;
            point.threshold = -point.threshold;
            flipped = true;
        }
        let predicted: Vec<bool> = scored.iter().map(|s| s.1 < decision_threshold).collect();
        let truth: Vec<bool> = scored.iter().map(|s| s.0 == Label::Fake).collect();
        Ok(EvalReport {
            eer: point.eer,
            eer_threshold: point.threshold,
            f1: f1(&predicted, &truth)?,
            n_real: real.len(),
            n_fake: fake.len(),
            real_scores: ScoreSummary::of(&real)?,
            fake_scores: ScoreSummary::of(&fake)?,
            orientation_flipped: flipped,
        })
    }
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreLine {
    pub id: String,
    pub label: Label,
    pub score: f64,
}

/// Tab-separated `id  label  score` lines, scores printed round-trip exact.
pub fn write_scores(lines: &[ScoreLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for l in lines {
        writeln!(out, "{}\t{}\t{:?}", l.id, l.label.as_str(), l.score).expect("write to string");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreLine>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, label, score] = fields[..] else {
            return Err(parse_err(i + 1, format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        out.push(ScoreLine {
            id: id.to_string(),
            label: Label::parse(label).ok_or_else(|| parse_err(i + 1, format!("unknown label '{label}'")))?,
            score: score
                .parse()
                .map_err(|e| parse_err(i + 1, format!("bad score '{score}': {e}")))?,
        });
    }
    Ok(out)
}
