//! Two-stage optimization: stage 1 learns the compression modules on real
//! speech only; stage 2 freezes them and trains the projectors and head.

mod optim;
mod stage1;
mod stage2;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{clip_grad_norm, linear_lr, AdamW, EarlyStopping, GradStore};
pub use stage1::{stage1_validation_loss, train_stage1, train_stage1_on};
pub use stage2::{evaluate, evaluate_on, score_set, train_stage2, train_stage2_on, Evaluation};

use crate::autodiff::Gradients;
use crate::config::{parse_switch, KeyValues};
use crate::error::{Error, Result};
use crate::losses::{LossMode, DEFAULT_LAMBDA};
use crate::model::{Bound, ModelCheckpoint, ModelConfig, ParamStore, Stage};
use crate::store::{Label, ManifestRecord, SampleSet, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub patience: usize,
    pub lambda: f64,
    pub target_frames: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub augment: bool,
    pub accumulation_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "Batch size",
        "Epochs",
        "Starting LR",
        "End LR",
        "Early-stop patience",
        "lambda",
        "λ",
        "Target frames",
        "Seed",
        "Loss mode",
        "Augment",
        "Accumulation steps",
        "Weight decay",
        "Gradient clip",
    ];

    pub fn stage1() -> Self {
        TrainConfig {
            stage: Stage::One,
            batch_size: 16,
            epochs: 50,
            lr_start: 0.005,
            lr_end: 0.0001,
            patience: 3,
            lambda: DEFAULT_LAMBDA,
            target_frames: 50,
            seed: 0,
            loss_mode: LossMode::GramScaled,
            augment: false,
            accumulation_steps: 1,
            weight_decay: 0.01,
            grad_clip: 5.0,
        }
    }

    pub fn stage2() -> Self {
        TrainConfig {
            stage: Stage::Two,
            batch_size: 2,
            epochs: 10,
            lr_start: 0.0001,
            lr_end: 0.00001,
            ..TrainConfig::stage1()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::One => Self::stage1(),
            Stage::Two => Self::stage2(),
        }
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        take!("Batch size", self.batch_size);
        take!("Epochs", self.epochs);
        take!("Starting LR", self.lr_start);
        take!("End LR", self.lr_end);
        take!("Early-stop patience", self.patience);
        take!("lambda", self.lambda);
        take!("λ", self.lambda);
        take!("Target frames", self.target_frames);
        take!("Seed", self.seed);
        take!("Loss mode", self.loss_mode);
        take!("Accumulation steps", self.accumulation_steps);
        take!("Weight decay", self.weight_decay);
        take!("Gradient clip", self.grad_clip);
        if let Some(v) = kv.get("Augment") {
            self.augment = parse_switch(v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs == 0 || self.target_frames == 0 || self.accumulation_steps == 0 {
            return bad("batch size, epochs, target frames and accumulation steps must be positive".into());
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return bad(format!("need Starting LR >= End LR > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.patience == 0 {
            return bad("Early-stop patience must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("Weight decay and Gradient clip must be nonnegative".into());
        }
        if self.augment && self.stage == Stage::One {
            return bad("Augment is only available for stage 2".into());
        }
        Ok(())
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.set("Batch size", self.batch_size.to_string());
        kv.set("Epochs", self.epochs.to_string());
        kv.set("Starting LR", self.lr_start.to_string());
        kv.set("End LR", self.lr_end.to_string());
        kv.set("Early-stop patience", self.patience.to_string());
        kv.set("lambda", self.lambda.to_string());
        kv.set("Target frames", self.target_frames.to_string());
        kv.set("Seed", self.seed.to_string());
        kv.set("Loss mode", self.loss_mode.to_string());
        kv.set("Augment", if self.augment { "on" } else { "off" });
        kv.set("Accumulation steps", self.accumulation_steps.to_string());
        kv.set("Weight decay", self.weight_decay.to_string());
        kv.set("Gradient clip", self.grad_clip.to_string());
    }
}

/// Effective configuration as written into checkpoints and output folders.
pub fn config_snapshot(model: &ModelConfig, train: &TrainConfig) -> KeyValues {
    let mut kv = KeyValues::default();
    model.write_into(&mut kv);
    train.write_into(&mut kv);
    kv
}

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub stage: u8,
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cross: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intra: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub style: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linguistics: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clipped_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub improved: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<ProgressRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn validation(&self) -> impl Iterator<Item = &ProgressRecord> {
        self.history.iter().filter(|r| r.split == "valid")
    }
}

pub fn write_progress(history: &[ProgressRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in history {
        let line = serde_json::to_string(r).expect("progress records serialize");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub(crate) fn split_records(records: &[ManifestRecord], split: Split) -> Vec<&ManifestRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

pub(crate) fn load_split(records: &[ManifestRecord], split: Split) -> Result<SampleSet> {
    SampleSet::load(split_records(records, split))
}

pub(crate) fn require_both_labels(set: &SampleSet, what: &str) -> Result<()> {
    for label in [Label::Real, Label::Fake] {
        if !set.samples.iter().any(|s| s.label == label) {
            return Err(Error::Validation(format!("{what} has no {} samples", label.as_str())));
        }
    }
    Ok(())
}

/// Gradients of every trainable bound parameter, by name.
pub(crate) fn collect_grads(
    p: &Bound,
    mut grads: Gradients,
    params: &ParamStore,
    trainable: impl Fn(&str) -> bool,
) -> GradStore {
    p.iter()
        .filter(|(n, _)| trainable(n))
        .map(|(n, v)| (n.to_string(), grads.take(v, params[n].shape())))
        .collect()
}

pub(crate) fn accumulate(into: &mut Option<GradStore>, grads: GradStore) {
    match into {
        None => *into = Some(grads),
        Some(acc) => {
            for (k, g) in grads {
                let a = acc.get_mut(&k).expect("same parameter set every step");
                a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
            }
        }
    }
}

pub(crate) fn average(grads: &mut GradStore, n: usize) {
    if n > 1 {
        let k = 1.0 / n as f64;
        grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
}
