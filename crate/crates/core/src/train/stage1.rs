use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    accumulate, average, clip_grad_norm, collect_grads, config_snapshot, linear_lr, load_split, AdamW, EarlyStopping,
    GradStore, ProgressRecord, TrainConfig, TrainOutcome,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::{stage1_terms, Stage1LossBreakdown};
use crate::model::{bind, ModelCheckpoint, ModelConfig, ParamStore, SlimModel, Stage};
use crate::store::{make_batches, Batch, Label, ManifestRecord, SampleSet, Split, Subspace};

/// Stage 1 from a manifest. Every record must be real: fakes are rejected
/// before any data is loaded.
pub fn train_stage1(records: &[ManifestRecord], model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if let Some(r) = records.iter().find(|r| r.label == Label::Fake) {
        return Err(Error::Validation(format!(
            "stage 1 trains on real samples only, but '{}' is labeled fake",
            r.id
        )));
    }
    let train = load_split(records, Split::Train)?;
    let valid = load_split(records, Split::Valid)?;
    train_stage1_on(&train, &valid, model, cfg)
}

fn forward_loss(
    model: &SlimModel,
    g: &mut Graph,
    params: &ParamStore,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: Option<&mut ChaCha8Rng>,
    trainable: bool,
) -> Result<(crate::model::Bound, crate::losses::Stage1Terms)> {
    let p = bind(g, params, |_| trainable);
    let mut rng = rng;
    let (s, _) = model.compress_batch(g, &p, Subspace::Style, &batch.style, rng.as_deref_mut())?;
    let (l, _) = model.compress_batch(g, &p, Subspace::Linguistics, &batch.linguistics, rng)?;
    let terms = stage1_terms(g, s, l, cfg.lambda, cfg.loss_mode)?;
    Ok((p, terms))
}

fn mean_breakdown(sum: &[f64; 5], n: usize, lambda: f64) -> Stage1LossBreakdown {
    let k = 1.0 / n.max(1) as f64;
    Stage1LossBreakdown {
        total: sum[0] * k,
        cross: sum[1] * k,
        intra: sum[2] * k,
        style: sum[3] * k,
        linguistics: sum[4] * k,
        lambda,
    }
}

fn add_breakdown(sum: &mut [f64; 5], b: &Stage1LossBreakdown) {
    for (s, v) in sum.iter_mut().zip([b.total, b.cross, b.intra, b.style, b.linguistics]) {
        *s += v;
    }
}

/// Eval-mode stage-1 loss averaged over in-order batches of `cfg.batch_size`.
/// Batches with fewer than two samples are skipped.
pub fn stage1_validation_loss(
    model: &SlimModel,
    params: &ParamStore,
    valid: &SampleSet,
    cfg: &TrainConfig,
) -> Result<Stage1LossBreakdown> {
    let mut sum = [0.0; 5];
    let mut n = 0;
    for batch in make_batches(valid, cfg.batch_size, cfg.target_frames, None)? {
        if batch.len() < 2 {
            continue;
        }
        let mut g = Graph::new();
        let (_, terms) = forward_loss(model, &mut g, params, &batch, cfg, None, false)?;
        add_breakdown(&mut sum, &terms.breakdown(&g, cfg.lambda));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation("validation split yields no batch of two or more samples".into()));
    }
    Ok(mean_breakdown(&sum, n, cfg.lambda))
}

fn record(epoch: usize, split: &str, lr: f64, b: &Stage1LossBreakdown) -> ProgressRecord {
    ProgressRecord {
        stage: 1,
        epoch,
        split: split.into(),
        lr,
        loss: b.total,
        cross: Some(b.cross),
        intra: Some(b.intra),
        style: Some(b.style),
        linguistics: Some(b.linguistics),
        eer: None,
        clipped_steps: None,
        improved: None,
    }
}

pub(super) fn optimizer_step(
    opt: &mut AdamW,
    params: &mut ParamStore,
    mut grads: GradStore,
    n: usize,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<bool> {
    average(&mut grads, n);
    let (_, clipped) = clip_grad_norm(&mut grads, cfg.grad_clip);
    opt.step(params, &grads, lr)?;
    Ok(clipped)
}

/// Stage 1 on preloaded splits. Returns the checkpoint with the lowest
/// validation loss.
pub fn train_stage1_on(
    train: &SampleSet,
    valid: &SampleSet,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    for (set, name) in [(train, "training"), (valid, "validation")] {
        if let Some(s) = set.samples.iter().find(|s| s.label == Label::Fake) {
            return Err(Error::Validation(format!(
                "stage 1 trains on real samples only, but {name} sample '{}' is labeled fake",
                s.id
            )));
        }
        if set.len() < 2 {
            return Err(Error::Validation(format!("stage 1 needs at least two {name} samples, got {}", set.len())));
        }
    }
    let mut mc = model_cfg.clone();
    mc.input_dim = train.samples[0].features();
    let model = SlimModel::new(mc.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.init_stage1(&mut rng);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = linear_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        let shuffle = rng.random::<u64>();
        let mut sum = [0.0; 5];
        let mut n_batches = 0;
        let mut clipped = 0;
        let mut pending = None;
        let mut pending_n = 0;
        for batch in make_batches(train, cfg.batch_size, cfg.target_frames, Some(shuffle))? {
            if batch.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let (p, terms) = forward_loss(&model, &mut g, &params, &batch, cfg, Some(&mut drop_rng), true)?;
            add_breakdown(&mut sum, &terms.breakdown(&g, cfg.lambda));
            n_batches += 1;
            let grads = g.backward(terms.total)?;
            accumulate(&mut pending, collect_grads(&p, grads, &params, |_| true));
            pending_n += 1;
            if pending_n == cfg.accumulation_steps {
                clipped += optimizer_step(&mut opt, &mut params, pending.take().expect("pending"), pending_n, cfg, lr)?
                    as usize;
                pending_n = 0;
            }
        }
        if let Some(grads) = pending.take() {
            clipped += optimizer_step(&mut opt, &mut params, grads, pending_n, cfg, lr)? as usize;
        }
        let mut train_rec = record(epoch, "train", lr, &mean_breakdown(&sum, n_batches, cfg.lambda));
        train_rec.clipped_steps = Some(clipped);
        history.push(train_rec);

        let val = stage1_validation_loss(&model, &params, valid, cfg)?;
        let (improved, stop) = stopper.observe(epoch, val.total);
        if improved {
            best = params.clone();
        }
        let mut val_rec = record(epoch, "valid", lr, &val);
        val_rec.improved = Some(improved);
        history.push(val_rec);
        epochs_run = epoch + 1;
        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(Stage::One, best, config_snapshot(&mc, cfg)),
        history,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best,
        epochs_run,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Sample;
    use crate::tensor::Tensor;

    fn tiny_set(n: usize, f: usize, t: usize, seed: u64, label: Label) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let z: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mk = |rng: &mut ChaCha8Rng| {
                    let d = (0..f * t).map(|k| z[k / t] + 0.1 * rng.random_range(-1.0..1.0)).collect();
                    Tensor::new(vec![f, t], d).unwrap()
                };
                Sample { id: format!("s{seed}-{i}"), label, style: mk(&mut rng), linguistics: mk(&mut rng) }
            })
            .collect();
        SampleSet { samples }
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            bottleneck_dim: 4,
            dependency_dim: 4,
            asp_dim: 4,
            attention_dim: 3,
            head_hidden_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 4, batch_size: 6, target_frames: 5, seed: 3, ..TrainConfig::stage1() }
    }

    #[test]
    fn rejects_fake_samples() {
        let train = tiny_set(8, 6, 5, 0, Label::Fake);
        let valid = tiny_set(4, 6, 5, 1, Label::Real);
        let err = train_stage1_on(&train, &valid, &small_model(), &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn deterministic_checkpoints_and_log_schema() {
        let train = tiny_set(13, 6, 5, 0, Label::Real);
        let valid = tiny_set(5, 6, 5, 1, Label::Real);
        let a = train_stage1_on(&train, &valid, &small_model(), &small_cfg()).unwrap();
        let b = train_stage1_on(&train, &valid, &small_model(), &small_cfg()).unwrap();
        assert_eq!(a.checkpoint.encode().unwrap(), b.checkpoint.encode().unwrap());
        assert_eq!(a.history, b.history);
        assert_eq!(a.checkpoint.stage, Stage::One);
        assert!(a.checkpoint.params.keys().all(|k| SlimModel::is_stage1_param(k)));
        let line = serde_json::to_value(&a.history[0]).unwrap();
        for key in ["epoch", "split", "lr", "loss", "cross", "intra", "style", "linguistics"] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
        let mut other = small_cfg();
        other.seed = 4;
        let c = train_stage1_on(&train, &valid, &small_model(), &other).unwrap();
        assert_ne!(a.checkpoint.fingerprint().unwrap(), c.checkpoint.fingerprint().unwrap());
    }

    #[test]
    fn early_stopping_limits_epochs() {
        let train = tiny_set(8, 6, 5, 0, Label::Real);
        let valid = tiny_set(4, 6, 5, 1, Label::Real);
        let cfg = TrainConfig { epochs: 30, patience: 1, lr_start: 0.5, lr_end: 0.4, ..small_cfg() };
        let out = train_stage1_on(&train, &valid, &small_model(), &cfg).unwrap();
        let vals: Vec<_> = out.validation().collect();
        assert_eq!(vals.len(), out.epochs_run);
        if out.stopped_early {
            assert_eq!(vals.last().unwrap().improved, Some(false));
            assert_eq!(out.epochs_run, out.best_epoch + 1 + cfg.patience);
        }
        let best = vals.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best, out.best_metric);
    }
}
