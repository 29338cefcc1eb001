use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::stage1::optimizer_step;
use super::{
    accumulate, collect_grads, config_snapshot, linear_lr, load_split, require_both_labels, split_records, AdamW,
    EarlyStopping, ProgressRecord, TrainConfig, TrainOutcome,
};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{eer, EvalReport, ScoreLine};
use crate::model::{bind_where, ModelCheckpoint, ModelConfig, ParamStore, SlimModel, Stage};
use crate::store::{make_batches, Batch, Label, ManifestRecord, SampleSet, Split};
use crate::tensor::Tensor;

/// Eval-mode `(S̄, L̄)` per sample id.
type DependencyCache = HashMap<String, (Vec<f64>, Vec<f64>)>;

const EVAL_BATCH: usize = 16;

fn build_cache(model: &SlimModel, params: &ParamStore, sets: &[&SampleSet], target_frames: usize) -> Result<DependencyCache> {
    let mut cache = DependencyCache::new();
    for set in sets {
        for batch in make_batches(set, EVAL_BATCH, target_frames, None)? {
            let (s, l) = model.dependency_means(params, &batch.style, &batch.linguistics)?;
            for (i, id) in batch.ids.iter().enumerate() {
                cache.insert(id.clone(), (s.row(i).to_vec(), l.row(i).to_vec()));
            }
        }
    }
    Ok(cache)
}

fn cached_dependency(cache: &DependencyCache, ids: &[String], dim: usize) -> (Tensor, Tensor) {
    let mut s = Vec::with_capacity(ids.len() * dim);
    let mut l = Vec::with_capacity(ids.len() * dim);
    for id in ids {
        let (a, b) = &cache[id];
        s.extend_from_slice(a);
        l.extend_from_slice(b);
    }
    let shape = vec![ids.len(), dim];
    (Tensor::new(shape.clone(), s).expect("cache extents"), Tensor::new(shape, l).expect("cache extents"))
}

/// Embedding-level augmentation: additive Gaussian noise plus one random
/// time mask and one random feature mask per sample, each up to 10% wide.
fn augment(x: &mut Tensor, rng: &mut ChaCha8Rng) {
    let (b, f, t) = x.dims3().expect("batch is B×F×T");
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let data = x.data_mut();
    for v in data.iter_mut() {
        *v += noise.sample(rng);
    }
    for bi in 0..b {
        let block = &mut data[bi * f * t..(bi + 1) * f * t];
        let tw = rng.random_range(0..=(t / 10));
        let t0 = rng.random_range(0..=(t - tw));
        let fw = rng.random_range(0..=(f / 10));
        let f0 = rng.random_range(0..=(f - fw));
        for fi in 0..f {
            for ti in 0..t {
                if (t0..t0 + tw).contains(&ti) || (f0..f0 + fw).contains(&fi) {
                    block[fi * t + ti] = 0.0;
                }
            }
        }
    }
}

fn dependency_for(
    model: &SlimModel,
    params: &ParamStore,
    batch: &Batch,
    cache: Option<&DependencyCache>,
) -> Result<Option<(Tensor, Tensor)>> {
    if !model.config.variant.uses_dependency() {
        return Ok(None);
    }
    Ok(Some(match cache {
        Some(c) => cached_dependency(c, &batch.ids, model.config.dependency_dim),
        None => model.dependency_means(params, &batch.style, &batch.linguistics)?,
    }))
}

fn batch_logits(
    model: &SlimModel,
    params: &ParamStore,
    batch: &Batch,
    cache: Option<&DependencyCache>,
) -> Result<Vec<f64>> {
    let dep = dependency_for(model, params, batch, cache)?;
    let mut g = Graph::new();
    let p = bind_where(&mut g, params, |n| !SlimModel::is_stage1_param(n), |_| false);
    let (_, logits) = model.classify_batch::<ChaCha8Rng>(
        &mut g,
        &p,
        &batch.style,
        &batch.linguistics,
        dep.as_ref().map(|(s, l)| (s, l)),
        None,
    )?;
    Ok(g.value(logits).data().to_vec())
}

/// Eval-mode scores (negated logits, higher = more real) in set order.
pub fn score_set(model: &SlimModel, params: &ParamStore, set: &SampleSet, target_frames: usize) -> Result<Vec<ScoreLine>> {
    score_with_cache(model, params, set, target_frames, None)
}

fn score_with_cache(
    model: &SlimModel,
    params: &ParamStore,
    set: &SampleSet,
    target_frames: usize,
    cache: Option<&DependencyCache>,
) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::with_capacity(set.len());
    for batch in make_batches(set, EVAL_BATCH, target_frames, None)? {
        let logits = batch_logits(model, params, &batch, cache)?;
        for ((id, y), z) in batch.ids.iter().zip(&batch.labels).zip(logits) {
            let label = if *y == 1.0 { Label::Fake } else { Label::Real };
            out.push(ScoreLine { id: id.clone(), label, score: -z });
        }
    }
    Ok(out)
}

fn scores_eer(scores: &[ScoreLine]) -> Result<f64> {
    let pick = |l: Label| scores.iter().filter(|s| s.label == l).map(|s| s.score).collect::<Vec<_>>();
    Ok(eer(&pick(Label::Real), &pick(Label::Fake))?.eer)
}

/// Stage 2 from a manifest and a stage-1 checkpoint.
pub fn train_stage2(
    records: &[ManifestRecord],
    stage1: &ModelCheckpoint,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let train = load_split(records, Split::Train)?;
    let valid = load_split(records, Split::Valid)?;
    train_stage2_on(&train, &valid, stage1, model, cfg)
}

/// Checks that `params` hold every compression parameter `model` expects.
fn check_stage1_params(model: &SlimModel, params: &ParamStore) -> Result<()> {
    let expected = model.init_stage1(&mut ChaCha8Rng::seed_from_u64(0));
    for (name, t) in &expected {
        let got = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        if got.shape() != t.shape() {
            return Err(Error::shape("stage-1 checkpoint", got.shape(), t.shape()));
        }
    }
    Ok(())
}

/// Stage 2 on preloaded splits. Stage-1 parameters are frozen; returns the
/// checkpoint (stage-1 and stage-2 parameters together) with the lowest
/// validation EER.
pub fn train_stage2_on(
    train: &SampleSet,
    valid: &SampleSet,
    stage1: &ModelCheckpoint,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if stage1.stage != Stage::One {
        return Err(Error::Validation("stage 2 needs a stage-1 checkpoint".into()));
    }
    require_both_labels(train, "stage-2 training split")?;
    require_both_labels(valid, "stage-2 validation split")?;
    let mut mc = model_cfg.clone();
    mc.input_dim = train.samples[0].features();
    let model = SlimModel::new(mc.clone())?;
    let frozen: ParamStore = stage1
        .params
        .iter()
        .filter(|(n, _)| SlimModel::is_stage1_param(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    check_stage1_params(&model, &frozen)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = frozen.clone();
    params.extend(model.init_stage2(&mut rng));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(rng.random());

    let cache = if mc.variant.uses_dependency() {
        Some(build_cache(&model, &frozen, &[train, valid], cfg.target_frames)?)
    } else {
        None
    };
    let train_cache = if cfg.augment { None } else { cache.as_ref() };

    let trainable = |n: &str| !SlimModel::is_stage1_param(n);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = linear_lr(epoch, cfg.epochs, cfg.lr_start, cfg.lr_end)?;
        let shuffle = rng.random::<u64>();
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        let mut clipped = 0;
        let mut pending = None;
        let mut pending_n = 0;
        for mut batch in make_batches(train, cfg.batch_size, cfg.target_frames, Some(shuffle))? {
            if cfg.augment {
                augment(&mut batch.style, &mut aug_rng);
                augment(&mut batch.linguistics, &mut aug_rng);
            }
            let dep = dependency_for(&model, &frozen, &batch, train_cache)?;
            let mut g = Graph::new();
            let p = bind_where(&mut g, &params, trainable, trainable);
            let (_, logits) = model.classify_batch(
                &mut g,
                &p,
                &batch.style,
                &batch.linguistics,
                dep.as_ref().map(|(s, l)| (s, l)),
                Some(&mut drop_rng),
            )?;
            let loss = g.bce_with_logits(logits, &batch.labels)?;
            loss_sum += g.value(loss).item();
            n_batches += 1;
            let grads = g.backward(loss)?;
            accumulate(&mut pending, collect_grads(&p, grads, &params, trainable));
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
        history.push(ProgressRecord {
            stage: 2,
            epoch,
            split: "train".into(),
            lr,
            loss: loss_sum / n_batches.max(1) as f64,
            cross: None,
            intra: None,
            style: None,
            linguistics: None,
            eer: None,
            clipped_steps: Some(clipped),
            improved: None,
        });

        let scores = score_with_cache(&model, &params, valid, cfg.target_frames, cache.as_ref())?;
        let val_eer = scores_eer(&scores)?;
        let labels: Vec<f64> = scores.iter().map(|s| s.label.target()).collect();
        let logits = Tensor::vector(scores.iter().map(|s| -s.score).collect());
        let val_loss = crate::losses::bce_loss(&logits, &labels)?;
        let (improved, stop) = stopper.observe(epoch, val_eer);
        if improved {
            best = params.clone();
        }
        history.push(ProgressRecord {
            stage: 2,
            epoch,
            split: "valid".into(),
            lr,
            loss: val_loss,
            cross: None,
            intra: None,
            style: None,
            linguistics: None,
            eer: Some(val_eer),
            clipped_steps: None,
            improved: Some(improved),
        });
        epochs_run = epoch + 1;
        if stop {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::new(Stage::Two, best, config_snapshot(&mc, cfg)),
        history,
        best_epoch: stopper.best_epoch,
        best_metric: stopper.best,
        epochs_run,
        stopped_early,
    })
}

/// Scores plus the summary report for one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scores: Vec<ScoreLine>,
}

/// Evaluates a stage-2 checkpoint on the records of `split`.
pub fn evaluate(records: &[ManifestRecord], ckpt: &ModelCheckpoint, split: Split) -> Result<Evaluation> {
    let set = SampleSet::load(split_records(records, split))?;
    if set.is_empty() {
        return Err(Error::Validation(format!("manifest has no {} records", split.as_str())));
    }
    evaluate_on(&set, ckpt)
}

/// Evaluates a stage-2 checkpoint using the architecture and target frame
/// count recorded in it. A sample is predicted fake when its logit is
/// positive.
pub fn evaluate_on(set: &SampleSet, ckpt: &ModelCheckpoint) -> Result<Evaluation> {
    if ckpt.stage != Stage::Two {
        return Err(Error::Validation("evaluation needs a stage-2 checkpoint".into()));
    }
    let mut mc = ModelConfig::default();
    mc.apply(&ckpt.config)?;
    let target_frames = ckpt.config.parse_value("Target frames")?.unwrap_or(50);
    let model = SlimModel::new(mc)?;
    let scores = score_set(&model, &ckpt.params, set, target_frames)?;
    let pairs: Vec<(Label, f64)> = scores.iter().map(|s| (s.label, s.score)).collect();
    let report = EvalReport::from_scores(&pairs, 0.0)?;
    Ok(Evaluation { report, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::store::Sample;
    use crate::train::train_stage1_on;

    /// Reals share one direction across subspaces, fakes use independent ones.
    fn set(n: usize, seed: u64) -> SampleSet {
        let (f, t) = (6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Real } else { Label::Fake };
                let zs: Vec<f64> = (0..f).map(|_| rng.random_range(-1.0..1.0)).collect();
                let zl: Vec<f64> = if label == Label::Real {
                    zs.clone()
                } else {
                    (0..f).map(|_| rng.random_range(-1.0..1.0)).collect()
                };
                let bump = if label == Label::Fake { 0.5 } else { 0.0 };
                let mk = |z: &[f64], rng: &mut ChaCha8Rng| {
                    let d = (0..f * t)
                        .map(|k| z[k / t] + 0.05 * rng.random_range(-1.0..1.0) + if k / t == f - 1 { bump } else { 0.0 })
                        .collect();
                    Tensor::new(vec![f, t], d).unwrap()
                };
                let style = mk(&zs, &mut rng);
                let linguistics = mk(&zl, &mut rng);
                Sample { id: format!("x{seed}-{i}"), label, style, linguistics }
            })
            .collect();
        SampleSet { samples }
    }

    fn reals(s: &SampleSet) -> SampleSet {
        SampleSet { samples: s.samples.iter().filter(|x| x.label == Label::Real).cloned().collect() }
    }

    fn small_model(variant: Variant) -> ModelConfig {
        ModelConfig {
            bottleneck_dim: 4,
            dependency_dim: 4,
            asp_dim: 4,
            attention_dim: 3,
            head_hidden_dim: 4,
            variant,
            ..ModelConfig::default()
        }
    }

    fn stage1(train: &SampleSet, valid: &SampleSet) -> ModelCheckpoint {
        let cfg = TrainConfig { epochs: 3, batch_size: 4, target_frames: 5, ..TrainConfig::stage1() };
        train_stage1_on(&reals(train), &reals(valid), &small_model(Variant::Full), &cfg).unwrap().checkpoint
    }

    fn s2cfg() -> TrainConfig {
        TrainConfig { epochs: 3, batch_size: 4, target_frames: 5, lr_start: 0.01, lr_end: 0.001, ..TrainConfig::stage2() }
    }

    #[test]
    fn stage1_parameters_stay_frozen_and_runs_are_deterministic() {
        let (train, valid) = (set(24, 0), set(10, 1));
        let s1 = stage1(&train, &valid);
        let a = train_stage2_on(&train, &valid, &s1, &small_model(Variant::Full), &s2cfg()).unwrap();
        for (name, t) in &s1.params {
            assert_eq!(a.checkpoint.params[name].data(), t.data(), "{name} changed");
        }
        let b = train_stage2_on(&train, &valid, &s1, &small_model(Variant::Full), &s2cfg()).unwrap();
        assert_eq!(a.checkpoint.encode().unwrap(), b.checkpoint.encode().unwrap());
        let ea = evaluate_on(&valid, &a.checkpoint).unwrap();
        let eb = evaluate_on(&valid, &b.checkpoint).unwrap();
        assert_eq!(ea, eb);
        assert_eq!(ea.report.n_real + ea.report.n_fake, valid.len());
        assert!(a.validation().all(|r| r.eer.is_some()));
    }

    #[test]
    fn variants_size_the_head_input() {
        let (train, valid) = (set(16, 2), set(8, 3));
        let s1 = stage1(&train, &valid);
        for (variant, width) in [(Variant::Dependency, 8), (Variant::Subspace, 8), (Variant::Style, 4), (Variant::Full, 16)] {
            let out = train_stage2_on(&train, &valid, &s1, &small_model(variant), &s2cfg()).unwrap();
            assert_eq!(out.checkpoint.params["head.fc1.weight"].shape(), &[width, 4]);
            assert_eq!(
                out.checkpoint.params.contains_key("style.asp.attn.weight"),
                variant.uses_asp(crate::store::Subspace::Style)
            );
            evaluate_on(&valid, &out.checkpoint).unwrap();
        }
    }

    #[test]
    fn cached_and_recomputed_dependency_scores_agree() {
        let (train, valid) = (set(16, 4), set(8, 5));
        let s1 = stage1(&train, &valid);
        let out = train_stage2_on(&train, &valid, &s1, &small_model(Variant::Full), &s2cfg()).unwrap();
        let mut mc = small_model(Variant::Full);
        mc.input_dim = 6;
        let model = SlimModel::new(mc).unwrap();
        let cache = build_cache(&model, &s1.params, &[&valid], 5).unwrap();
        let a = score_with_cache(&model, &out.checkpoint.params, &valid, 5, Some(&cache)).unwrap();
        let b = score_set(&model, &out.checkpoint.params, &valid, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.score - y.score).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_and_accumulation_run() {
        let (train, valid) = (set(16, 6), set(8, 7));
        let s1 = stage1(&train, &valid);
        let cfg = TrainConfig { augment: true, accumulation_steps: 3, ..s2cfg() };
        let out = train_stage2_on(&train, &valid, &s1, &small_model(Variant::Full), &cfg).unwrap();
        assert!(out.history.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn misuse_is_rejected() {
        let (train, valid) = (set(16, 8), set(8, 9));
        let s1 = stage1(&train, &valid);
        let s2 = train_stage2_on(&train, &valid, &s1, &small_model(Variant::Full), &s2cfg()).unwrap();
        assert!(train_stage2_on(&train, &valid, &s2.checkpoint, &small_model(Variant::Full), &s2cfg()).is_err());
        assert!(evaluate_on(&valid, &s1).is_err());
        assert!(train_stage2_on(&reals(&train), &valid, &s1, &small_model(Variant::Full), &s2cfg()).is_err());
        let mut broken = s1.clone();
        broken.params.remove("style.compress.proj.bias");
        let err = train_stage2_on(&train, &valid, &broken, &small_model(Variant::Full), &s2cfg()).unwrap_err();
        assert!(err.to_string().contains("style.compress.proj.bias"));
    }
}
