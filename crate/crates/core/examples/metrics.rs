//! EER, F1 and the statistics used by the analysis reports.

use slim::metrics::{cosine_distance, eer, f1, pearson, spearman, welch_ttest, EvalReport};
use slim::store::Label;

fn main() -> slim::Result<()> {
    let real = [0.9, 0.7, 0.5];
    let fake = [0.6, 0.4, 0.2];
    let point = eer(&real, &fake)?;
    println!("EER {:.4} at threshold {:.3}", point.eer, point.threshold);

    let scored: Vec<(Label, f64)> = real
        .iter()
        .map(|&s| (Label::Real, s))
        .chain(fake.iter().map(|&s| (Label::Fake, s)))
        .collect();
    let report = EvalReport::from_scores(&scored, 0.55)?;
    println!("report: eer {:.4} f1 {:.4} n_real {} n_fake {}", report.eer, report.f1, report.n_real, report.n_fake);
    println!("f1 by hand: {:.4}", f1(&[false, true, true], &[false, true, false])?);

    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 4.0, 5.0, 4.0, 5.0];
    println!("pearson {:.6} spearman {:.6}", pearson(&x, &y)?, spearman(&x, &y)?);
    println!("cosine distance {:.6}", cosine_distance(&x, &y)?);
    let w = welch_ttest(&[1.0, 2.0, 3.0, 4.0], &[2.0, 4.0, 6.0, 8.0, 10.0])?;
    println!("welch t {:.6} df {:.4} p {:.6}", w.t, w.df, w.p);
    Ok(())
}
