use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Label, ManifestRecord};
use super::slem::read_embedding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One sample with both subspaces already averaged over layers (`F×T` each).
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub style: Tensor,
    pub linguistics: Tensor,
}

impl Sample {
    pub fn load(record: &ManifestRecord) -> Result<Self> {
        let style = read_embedding(&record.style_path)?;
        let linguistics = read_embedding(&record.linguistics_path)?;
        if style.features() != linguistics.features() {
            return Err(Error::Validation(format!(
                "sample '{}': style has F={} but linguistics has F={}",
                record.id,
                style.features(),
                linguistics.features()
            )));
        }
        Ok(Sample {
            id: record.id.clone(),
            label: record.label,
            style: style.pooled(),
            linguistics: linguistics.pooled(),
        })
    }

    pub fn features(&self) -> usize {
        self.style.shape()[0]
    }
}

/// Samples resident in memory, in manifest order.
#[derive(Clone, Debug, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn load<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>) -> Result<Self> {
        let samples = records.into_iter().map(Sample::load).collect::<Result<Vec<_>>>()?;
        Ok(SampleSet { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `B×F×T`
    pub style: Tensor,
    /// `B×F×T`
    pub linguistics: Tensor,
    /// Classification targets, fake = 1.
    pub labels: Vec<f64>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lazily assembled batches over a [`SampleSet`].
pub struct BatchIter<'a> {
    samples: &'a [Sample],
    order: Vec<usize>,
    batch_size: usize,
    target_frames: usize,
    next: usize,
}

/// Copies frames `[start, start+len)` of an `F×T` tensor into the first `len`
/// columns of a zeroed `F×target` block.
fn fit_frames(x: &Tensor, start: usize, len: usize, target: usize, out: &mut [f64]) {
    let (f, t) = (x.shape()[0], x.shape()[1]);
    for fi in 0..f {
        let src = &x.data()[fi * t + start..fi * t + start + len];
        out[fi * target..fi * target + len].copy_from_slice(src);
    }
}

/// Center crop offset and kept length when fitting `t` frames into `target`.
fn crop(t: usize, target: usize) -> (usize, usize) {
    if t > target {
        ((t - target) / 2, target)
    } else {
        (0, t)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        let f = self.samples[idx[0]].features();
        let target = self.target_frames;
        let b = idx.len();
        let mut style = vec![0.0; b * f * target];
        let mut ling = vec![0.0; b * f * target];
        for (slot, &i) in idx.iter().enumerate() {
            let s = &self.samples[i];
            // Align the two subspaces on the shorter one first, then fit to the target.
            let (ts, tl) = (s.style.shape()[1], s.linguistics.shape()[1]);
            let common = ts.min(tl);
            let (s_off, _) = crop(ts, common);
            let (l_off, _) = crop(tl, common);
            let (off, len) = crop(common, target);
            let block = f * target;
            fit_frames(&s.style, s_off + off, len, target, &mut style[slot * block..(slot + 1) * block]);
            fit_frames(&s.linguistics, l_off + off, len, target, &mut ling[slot * block..(slot + 1) * block]);
        }
        Some(Batch {
            style: Tensor::new(vec![b, f, target], style).expect("batch extents"),
            linguistics: Tensor::new(vec![b, f, target], ling).expect("batch extents"),
            labels: idx.iter().map(|&i| self.samples[i].label.target()).collect(),
            ids: idx.iter().map(|&i| self.samples[i].id.clone()).collect(),
        })
    }
}

/// Batches of `batch_size` samples, each center-cropped or right-padded with
/// zeros to `target_frames`. With a seed the order is a deterministic
/// shuffle; without one it is the set order. The last batch may be partial.
pub fn make_batches(
    set: &SampleSet,
    batch_size: usize,
    target_frames: usize,
    shuffle_seed: Option<u64>,
) -> Result<BatchIter<'_>> {
    if set.is_empty() {
        return Err(Error::InvalidArgument("cannot batch an empty sample set".into()));
    }
    if batch_size == 0 || target_frames == 0 {
        return Err(Error::InvalidArgument(format!(
            "batch_size ({batch_size}) and target frames ({target_frames}) must be positive"
        )));
    }
    let f = set.samples[0].features();
    if let Some(bad) = set.samples.iter().find(|s| s.features() != f) {
        return Err(Error::Validation(format!(
            "sample '{}' has F={} but the set uses F={f}",
            bad.id,
            bad.features()
        )));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        samples: &set.samples,
        order,
        batch_size,
        target_frames,
        next: 0,
    })
}
