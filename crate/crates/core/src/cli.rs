//! Command line front end. [`run`] parses arguments, dispatches to the
//! library and maps errors onto stable exit codes.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    cca_probe, layer_means, layer_spearman_from_means, mismatch_report, probe_samples, MismatchReport,
    SpearmanPooling, DEFAULT_CCA_DIMS, DEFAULT_RIDGE,
};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::metrics::{write_scores, EvalReport};
use crate::model::{ModelCheckpoint, ModelConfig, Variant};
use crate::store::{load_manifest, read_embedding, Label, ManifestRecord, Sample, SampleSet, Split};
use crate::synth::{generate_dataset, SynthConfig};
use crate::train::{evaluate, train_stage1, train_stage2, write_progress, TrainConfig, TrainOutcome};

/// Default output root when `--out` is not given.
pub const OUTPUT_ROOT_ENV: &str = "SLIM_OUTPUT_ROOT";

/// Name of the effective-config file written into every output directory.
pub const CONFIG_ECHO: &str = "config.txt";

const ANALYSIS_KEYS: [&str; 6] = ["Seed", "Fit n", "CCA dims", "Ridge", "Histogram bins", "Pooling"];

#[derive(Debug, Parser)]
#[command(name = "slim", version, about = "Style-linguistics mismatch detector over subspace embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic embedding dataset and its manifest.
    Synth(SynthArgs),
    /// One-class dependency learning on real samples.
    #[command(name = "train-stage1")]
    TrainStage1(TrainArgs),
    /// Supervised classifier on top of a frozen stage-1 checkpoint.
    #[command(name = "train-stage2")]
    TrainStage2(Stage2Args),
    /// Score one split with a stage-2 checkpoint.
    Evaluate(EvalArgs),
    /// CCA probe, dependency mismatch or layer correlation report.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Defaults to `$SLIM_OUTPUT_ROOT/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n_real: usize,
    #[arg(long, default_value_t = 200)]
    pub n_fake: usize,
    #[arg(long)]
    pub mismatch: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint path. Defaults to `<out>/stage{1,2}.slck`.
    #[arg(long)]
    pub ckpt_out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    #[arg(long)]
    pub stage1_ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Expected variant; must match the checkpoint.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// JSON report path. Defaults to `<out>/report.json`; scores go next to it.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Cca,
    Mismatch,
    Layers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SubspaceArg {
    Style,
    Linguistics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LabelFilter {
    All,
    Real,
    Fake,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint with stage-1 parameters (mismatch mode).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Reals used to fit the CCA (cca mode).
    #[arg(long)]
    pub fit_n: Option<usize>,
    #[arg(long)]
    pub dims: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Histogram bins on the log10 distance axis (mismatch mode).
    #[arg(long)]
    pub bins: Option<usize>,
    /// Rows of the layer matrix (layers mode).
    #[arg(long, value_enum, default_value_t = SubspaceArg::Style)]
    pub rows: SubspaceArg,
    /// Columns of the layer matrix (layers mode).
    #[arg(long, value_enum, default_value_t = SubspaceArg::Linguistics)]
    pub cols: SubspaceArg,
    /// Second manifest for the columns, matched by sample id (layers mode).
    #[arg(long)]
    pub manifest_b: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LabelFilter::All)]
    pub label: LabelFilter,
    #[command(flatten)]
    pub common: Common,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split '{s}', expected train, valid or test"))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::TrainStage1(a) => cmd_train_stage1(&a).map(|_| ()),
        Command::TrainStage2(a) => cmd_train_stage2(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

/// `--out`, else `$SLIM_OUTPUT_ROOT/<command>`, else `slim-out/<command>`.
pub fn output_dir(flag: Option<&Path>, command: &str) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("slim-out"))
            .join(command),
    }
}

/// Config file, then overrides, then `--seed`; keys outside `known` fail.
fn gather(common: &Common, known: &[&str]) -> Result<KeyValues> {
    let mut kv = match &common.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    kv.merge(&KeyValues::from_overrides(&common.overrides)?);
    if let Some(seed) = common.seed {
        kv.set("Seed", seed.to_string());
    }
    kv.reject_unknown(known)?;
    Ok(kv)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<PathBuf> {
    let kv = gather(&a.common, &SynthConfig::KEYS)?;
    let mut cfg = SynthConfig::default();
    cfg.apply(&kv)?;
    if let Some(m) = a.mismatch {
        cfg.mismatch = m;
        cfg.validate()?;
    }
    let out = output_dir(a.common.out.as_deref(), "synth");
    let manifest = generate_dataset(&cfg, a.n_real, a.n_fake, &out)?;
    let mut echo = KeyValues::default();
    cfg.write_into(&mut echo);
    echo.set("Real samples", a.n_real.to_string());
    echo.set("Fake samples", a.n_fake.to_string());
    write_text(&out.join(CONFIG_ECHO), &echo.to_text())?;
    println!("{}", manifest.display());
    Ok(manifest)
}

fn train_keys() -> Vec<&'static str> {
    ModelConfig::KEYS.iter().chain(&TrainConfig::KEYS).copied().collect()
}

fn finish_training(outcome: &TrainOutcome, out: &Path, ckpt_out: Option<&Path>, default_name: &str) -> Result<PathBuf> {
    create_dir(out)?;
    let ckpt = ckpt_out.map_or_else(|| out.join(default_name), Path::to_path_buf);
    outcome.checkpoint.save(&ckpt)?;
    write_text(&out.join(CONFIG_ECHO), &outcome.checkpoint.config.to_text())?;
    write_progress(&outcome.history, out.join("progress.jsonl"))?;
    for r in &outcome.history {
        println!("{}", serde_json::to_string(r).expect("progress records serialize"));
    }
    println!(
        "best epoch {} ({:.6}), {} epochs run{}, checkpoint {}",
        outcome.best_epoch,
        outcome.best_metric,
        outcome.epochs_run,
        if outcome.stopped_early { ", stopped early" } else { "" },
        ckpt.display()
    );
    Ok(ckpt)
}

pub fn cmd_train_stage1(a: &TrainArgs) -> Result<PathBuf> {
    let kv = gather(&a.common, &train_keys())?;
    let mut model = ModelConfig::default();
    model.apply(&kv)?;
    let mut cfg = TrainConfig::stage1();
    cfg.apply(&kv)?;
    let records = load_manifest(&a.manifest)?;
    let outcome = train_stage1(&records, &model, &cfg)?;
    let out = output_dir(a.common.out.as_deref(), "train-stage1");
    finish_training(&outcome, &out, a.ckpt_out.as_deref(), "stage1.slck")
}

/// Architecture comes from the stage-1 checkpoint, then the user config.
pub fn cmd_train_stage2(a: &Stage2Args) -> Result<PathBuf> {
    let stage1_path = a
        .stage1_ckpt
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("train-stage2 needs --stage1-ckpt".into()))?;
    let kv = gather(&a.train.common, &train_keys())?;
    let stage1 = ModelCheckpoint::load(stage1_path)?;
    let mut model = ModelConfig::default();
    model.apply(&stage1.config)?;
    model.apply(&kv)?;
    let mut cfg = TrainConfig::stage2();
    cfg.apply(&kv)?;
    let records = load_manifest(&a.train.manifest)?;
    let outcome = train_stage2(&records, &stage1, &model, &cfg)?;
    let out = output_dir(a.train.common.out.as_deref(), "train-stage2");
    finish_training(&outcome, &out, a.train.ckpt_out.as_deref(), "stage2.slck")
}

#[derive(Debug, Serialize)]
struct EvalSummary<'a> {
    variant: String,
    split: &'static str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// Score file path for a report path: `report.json` → `report.scores.tsv`.
pub fn scores_path(report: &Path) -> PathBuf {
    report.with_extension("scores.tsv")
}

pub fn cmd_evaluate(a: &EvalArgs) -> Result<EvalReport> {
    let ckpt = ModelCheckpoint::load(&a.ckpt)?;
    let variant: Variant = ckpt.config.parse_value("Variant")?.unwrap_or(Variant::Full);
    if let Some(v) = a.variant.filter(|v| *v != variant) {
        return Err(Error::Config(format!("--variant {v} but the checkpoint was trained as {variant}")));
    }
    let records = load_manifest(&a.manifest)?;
    let eval = evaluate(&records, &ckpt, a.split)?;
    let report_path = a
        .report_out
        .clone()
        .unwrap_or_else(|| output_dir(a.out.as_deref(), "evaluate").join("report.json"));
    let summary = EvalSummary {
        variant: variant.to_string(),
        split: a.split.as_str(),
        report: &eval.report,
    };
    write_json(&report_path, &summary)?;
    write_scores(&eval.scores, scores_path(&report_path))?;
    if let Some(dir) = report_path.parent() {
        write_text(&dir.join(CONFIG_ECHO), &ckpt.config.to_text())?;
    }
    let r = &eval.report;
    println!(
        "variant={variant} split={} eer={:.6} threshold={:.6} f1={:.6} n_real={} n_fake={}",
        a.split.as_str(),
        r.eer,
        r.eer_threshold,
        r.f1,
        r.n_real,
        r.n_fake
    );
    Ok(eval.report)
}

fn filter_records(records: Vec<ManifestRecord>, label: LabelFilter) -> Vec<ManifestRecord> {
    records
        .into_iter()
        .filter(|r| match label {
            LabelFilter::All => true,
            LabelFilter::Real => r.label == Label::Real,
            LabelFilter::Fake => r.label == Label::Fake,
        })
        .collect()
}

pub fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let kv = gather(&a.common, &ANALYSIS_KEYS)?;
    let out = output_dir(a.common.out.as_deref(), "analyze");
    create_dir(&out)?;
    let records = filter_records(load_manifest(&a.manifest)?, a.label);
    if records.is_empty() {
        return Err(Error::Validation("no manifest records left to analyze".into()));
    }
    let mut echo = KeyValues::default();
    echo.set("Mode", format!("{:?}", a.mode).to_lowercase());
    match a.mode {
        Mode::Cca => analyze_cca(a, &kv, &records, &out, &mut echo)?,
        Mode::Mismatch => analyze_mismatch(a, &kv, &records, &out, &mut echo)?,
        Mode::Layers => analyze_layers(a, &kv, &records, &out, &mut echo)?,
    }
    write_text(&out.join(CONFIG_ECHO), &echo.to_text())
}

fn analyze_cca(a: &AnalyzeArgs, kv: &KeyValues, records: &[ManifestRecord], out: &Path, echo: &mut KeyValues) -> Result<()> {
    let fit_n = a.fit_n.or(kv.parse_value("Fit n")?).unwrap_or(100);
    let dims = a.dims.or(kv.parse_value("CCA dims")?).unwrap_or(DEFAULT_CCA_DIMS);
    let ridge = a.ridge.or(kv.parse_value("Ridge")?).unwrap_or(DEFAULT_RIDGE);
    let seed = kv.parse_value("Seed")?.unwrap_or(0u64);
    for (k, v) in [
        ("Fit n", fit_n.to_string()),
        ("CCA dims", dims.to_string()),
        ("Ridge", ridge.to_string()),
        ("Seed", seed.to_string()),
    ] {
        echo.set(k, v);
    }
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let set = SampleSet { samples: vec![Sample::load(r)?] };
        samples.extend(probe_samples(&set, records)?);
    }
    let report = cca_probe(&samples, fit_n, dims, ridge, seed)?;
    write_json(&out.join("cca_report.json"), &report)?;
    let mut table = String::from("class\tn\tmean\tstd\n");
    for g in &report.groups {
        writeln!(table, "{}\t{}\t{:?}\t{:?}", g.class, g.n, g.mean, g.std).expect("write to string");
        println!("{:<16} n={:<4} r = {:.3} ± {:.3}", g.class, g.n, g.mean, g.std);
    }
    write_text(&out.join("cca_groups.tsv"), &table)?;
    let mut per_sample = String::from("id\tgroup\tr\n");
    for (id, group, r) in &report.samples {
        writeln!(per_sample, "{id}\t{group}\t{r:?}").expect("write to string");
    }
    write_text(&out.join("cca_samples.tsv"), &per_sample)?;
    println!("welch t={:?} df={:?} p={:?}", report.welch_t, report.welch_df, report.welch_p);
    Ok(())
}

fn mismatch_tables(report: &MismatchReport) -> (String, String) {
    let mut classes = String::from("class\tn\tmean\tstd\tmin\tq25\tmedian\tq75\tmax\tlog10_mean\tlog10_median\n");
    for c in &report.classes {
        writeln!(
            classes,
            "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            c.class, c.n, c.mean, c.std, c.min, c.q25, c.median, c.q75, c.max, c.log10.mean, c.log10.median
        )
        .expect("write to string");
    }
    let mut distances = String::from("id\tlabel\tdistance\n");
    for s in &report.samples {
        writeln!(distances, "{}\t{}\t{:?}", s.id, s.label.as_str(), s.distance).expect("write to string");
    }
    (classes, distances)
}

fn analyze_mismatch(a: &AnalyzeArgs, kv: &KeyValues, records: &[ManifestRecord], out: &Path, echo: &mut KeyValues) -> Result<()> {
    let ckpt_path = a
        .ckpt
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("mismatch mode needs --ckpt".into()))?;
    let bins = a.bins.or(kv.parse_value("Histogram bins")?).unwrap_or(20);
    echo.set("Histogram bins", bins.to_string());
    let ckpt = ModelCheckpoint::load(ckpt_path)?;
    let set = SampleSet::load(records)?;
    let report = mismatch_report(&set, &ckpt, bins)?;
    write_json(&out.join("mismatch_report.json"), &report)?;
    let (classes, distances) = mismatch_tables(&report);
    write_text(&out.join("mismatch_classes.tsv"), &classes)?;
    write_text(&out.join("mismatch_distances.tsv"), &distances)?;
    for c in &report.classes {
        println!(
            "{:<5} n={:<4} q25={:.4e} median={:.4e} q75={:.4e} mean={:.4e}",
            c.class, c.n, c.q25, c.median, c.q75, c.mean
        );
    }
    println!("welch t={:?} df={:?} p={:?}", report.welch_t, report.welch_df, report.welch_p);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn pick_path(r: &ManifestRecord, sub: SubspaceArg) -> &Path {
    match sub {
        SubspaceArg::Style => &r.style_path,
        SubspaceArg::Linguistics => &r.linguistics_path,
    }
}

fn analyze_layers(a: &AnalyzeArgs, kv: &KeyValues, records: &[ManifestRecord], out: &Path, echo: &mut KeyValues) -> Result<()> {
    let pooling = match kv.get("Pooling") {
        None | Some("per-sample") => SpearmanPooling::PerSample,
        Some("concatenated") => SpearmanPooling::Concatenated,
        Some(other) => {
            return Err(Error::Config(format!(
                "Pooling must be per-sample or concatenated, got '{other}'"
            )))
        }
    };
    echo.set("Pooling", if pooling == SpearmanPooling::PerSample { "per-sample" } else { "concatenated" });
    echo.set("Rows", format!("{:?}", a.rows).to_lowercase());
    echo.set("Columns", format!("{:?}", a.cols).to_lowercase());
    let other: Option<HashMap<String, ManifestRecord>> = match &a.manifest_b {
        Some(p) => Some(load_manifest(p)?.into_iter().map(|r| (r.id.clone(), r)).collect()),
        None => None,
    };
    let (mut ma, mut mb) = (Vec::new(), Vec::new());
    for r in records {
        let col_record = match &other {
            Some(map) => match map.get(&r.id) {
                Some(m) => m,
                None => continue,
            },
            None => r,
        };
        ma.push(layer_means(&read_embedding(pick_path(r, a.rows))?));
        mb.push(layer_means(&read_embedding(pick_path(col_record, a.cols))?));
    }
    let m = layer_spearman_from_means(&ma, &mb, pooling)?;
    let (ka, kb) = (m.shape()[0], m.shape()[1]);
    let mut text = String::new();
    for row in m.data().chunks(kb) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(text, "{}", cells.join("\t")).expect("write to string");
    }
    write_text(&out.join("layers.tsv"), &text)?;
    let rows: Vec<&[f64]> = m.data().chunks(kb).collect();
    write_json(
        &out.join("layers.json"),
        &serde_json::json!({ "rows": ka, "cols": kb, "n": ma.len(), "matrix": rows }),
    )?;
    println!("layer spearman matrix {ka}x{kb} over {} samples", ma.len());
    Ok(())
}
