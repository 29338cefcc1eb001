//! CCA probe, dependency-feature mismatch report and layer-wise Spearman map.

mod cca;
mod layers;
mod mismatch;

pub use cca::{
    cca_fit, cca_probe, CcaModel, CcaProbeReport, GroupCorrelation, ProbeSample, DEFAULT_CCA_DIMS, DEFAULT_RIDGE,
};
pub use layers::{layer_means, layer_spearman_from_means, layer_spearman_matrix, SpearmanPooling};
pub use mismatch::{mismatch_report, summarize_distances, ClassDistances, Histogram, MismatchReport, SampleDistance};

use crate::error::Result;
use crate::store::{Label, ManifestRecord, SampleSet};

/// Probe inputs from loaded samples: layer-pooled, time-averaged vectors.
/// Fakes are grouped by their manifest attack id when one is given.
pub fn probe_samples(set: &SampleSet, records: &[ManifestRecord]) -> Result<Vec<ProbeSample>> {
    let attack: std::collections::HashMap<&str, Option<&str>> =
        records.iter().map(|r| (r.id.as_str(), r.attack_id.as_deref())).collect();
    set.samples
        .iter()
        .map(|s| {
            let is_real = s.label == Label::Real;
            let group = if is_real {
                "real".to_string()
            } else {
                attack.get(s.id.as_str()).copied().flatten().unwrap_or("fake").to_string()
            };
            Ok(ProbeSample {
                id: s.id.clone(),
                group,
                is_real,
                style: s.style.reduce_mean(1)?.into_data(),
                linguistics: s.linguistics.reduce_mean(1)?.into_data(),
            })
        })
        .collect()
}
