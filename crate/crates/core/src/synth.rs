//! Synthetic style/linguistics embedding pairs with a planted dependency.
//!
//! Real samples drive both subspaces from one latent vector. Fakes replace
//! part of the style latent with an independent draw (the `mismatch`
//! fraction of its variance) and carry an additive bump on the top 1% of
//! feature indices, so both the dependency channel and a plain subspace
//! artifact channel are present.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::store::{write_embedding, write_manifest, EmbeddingTensor, Label, ManifestRecord, Split, Subspace};

/// Amplitude of the shared temporal modulation.
const TEMPORAL_AMPLITUDE: f64 = 0.1;
/// Period of the temporal modulation, in frames.
const TEMPORAL_PERIOD: f64 = 16.0;
/// Std of the projection bias.
const BIAS_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub features: usize,
    pub frames: usize,
    pub style_layers: usize,
    pub linguistics_layers: usize,
    pub noise_std: f64,
    /// 0 = fakes share the real latent law, 1 = fully independent style latent.
    pub mismatch: f64,
    pub artifact_strength: f64,
    /// Seeds the projections; two datasets with the same seed share one
    /// generative law.
    pub seed: u64,
    /// Selects the per-sample random streams, so datasets drawn from the same
    /// law can hold disjoint samples.
    pub stream: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            latent_dim: 16,
            features: 1024,
            frames: 50,
            style_layers: 11,
            linguistics_layers: 8,
            noise_std: 0.1,
            mismatch: 1.0,
            artifact_strength: 0.3,
            seed: 0,
            stream: 0,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 10] = [
        "Latent dim",
        "Features",
        "Frames",
        "Style layers",
        "Linguistics layers",
        "Noise std",
        "Mismatch",
        "Artifact strength",
        "Seed",
        "Stream",
    ];

    /// Overrides fields present in `kv`; other keys are ignored.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.parse_value($key)? {
                    $field = v;
                }
            };
        }
        take!("Latent dim", self.latent_dim);
        take!("Features", self.features);
        take!("Frames", self.frames);
        take!("Style layers", self.style_layers);
        take!("Linguistics layers", self.linguistics_layers);
        take!("Noise std", self.noise_std);
        take!("Mismatch", self.mismatch);
        take!("Artifact strength", self.artifact_strength);
        take!("Seed", self.seed);
        take!("Stream", self.stream);
        self.validate()
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.set("Latent dim", self.latent_dim.to_string());
        kv.set("Features", self.features.to_string());
        kv.set("Frames", self.frames.to_string());
        kv.set("Style layers", self.style_layers.to_string());
        kv.set("Linguistics layers", self.linguistics_layers.to_string());
        kv.set("Noise std", self.noise_std.to_string());
        kv.set("Mismatch", self.mismatch.to_string());
        kv.set("Artifact strength", self.artifact_strength.to_string());
        kv.set("Seed", self.seed.to_string());
        kv.set("Stream", self.stream.to_string());
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.features == 0 || self.frames == 0 {
            return Err(Error::Config("latent_dim, features and frames must be positive".into()));
        }
        if self.style_layers == 0 || self.linguistics_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mismatch) {
            return Err(Error::Config(format!("mismatch {} outside [0, 1]", self.mismatch)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(self.artifact_strength >= 0.0 && self.artifact_strength.is_finite()) {
            return Err(Error::Config(format!(
                "artifact_strength {} must be >= 0",
                self.artifact_strength
            )));
        }
        Ok(())
    }

    /// Number of high-index features that carry the fake artifact.
    pub fn artifact_features(&self) -> usize {
        self.features.div_ceil(100)
    }
}

struct Projection {
    weight: Vec<f64>, // F×d
    bias: Vec<f64>,
}

impl Projection {
    fn draw(features: usize, latent: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (latent as f64).sqrt();
        let weight = (0..features * latent)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let bias = (0..features)
            .map(|_| BIAS_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Projection { weight, bias }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        self.weight
            .chunks(d)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// Holds the per-run projections of a [`SynthConfig`].
pub struct SynthGenerator {
    cfg: SynthConfig,
    style: Projection,
    linguistics: Projection,
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let style = Projection::draw(cfg.features, cfg.latent_dim, &mut rng);
        let linguistics = Projection::draw(cfg.features, cfg.latent_dim, &mut rng);
        Ok(SynthGenerator { cfg, style, linguistics })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Draws one (style, linguistics) pair.
    pub fn sample<R: Rng + ?Sized>(&self, label: Label, rng: &mut R) -> (EmbeddingTensor, EmbeddingTensor) {
        let cfg = &self.cfg;
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        let z_style = match label {
            Label::Real => z.clone(),
            Label::Fake => {
                let m = cfg.mismatch;
                z.iter()
                    .map(|v| {
                        let other: f64 = rng.sample(StandardNormal);
                        (1.0 - m).sqrt() * v + m.sqrt() * other
                    })
                    .collect()
            }
        };
        let artifact = match label {
            Label::Real => 0.0,
            Label::Fake => cfg.artifact_strength,
        };
        let style = self.render(Subspace::Style, &self.style.apply(&z_style), cfg.style_layers, artifact, rng);
        let ling = self.render(
            Subspace::Linguistics,
            &self.linguistics.apply(&z),
            cfg.linguistics_layers,
            artifact,
            rng,
        );
        (style, ling)
    }

    fn render<R: Rng + ?Sized>(
        &self,
        subspace: Subspace,
        pre: &[f64],
        layers: usize,
        artifact: f64,
        rng: &mut R,
    ) -> EmbeddingTensor {
        let cfg = &self.cfg;
        let (f, t) = (cfg.features, cfg.frames);
        let first_artifact = f - cfg.artifact_features();
        let mut frame_values = vec![0.0f64; f * t];
        for fi in 0..f {
            let phase = 2.0 * PI * fi as f64 / f as f64;
            for ti in 0..t {
                let modulation = TEMPORAL_AMPLITUDE * (2.0 * PI * ti as f64 / TEMPORAL_PERIOD + phase).sin();
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_std;
                frame_values[fi * t + ti] = (pre[fi] + modulation).tanh() + noise;
            }
        }
        let layer_std = cfg.noise_std / 2.0;
        let mut data = Vec::with_capacity(layers * f * t);
        for _ in 0..layers {
            for fi in 0..f {
                let bump = if fi >= first_artifact { artifact } else { 0.0 };
                for ti in 0..t {
                    let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * layer_std;
                    data.push((frame_values[fi * t + ti] + jitter + bump) as f32);
                }
            }
        }
        EmbeddingTensor::new(subspace, layers, f, t, data).expect("extents follow the config")
    }
}

/// Convenience wrapper that builds the projections for a single draw.
pub fn generate_sample<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    label: Label,
    rng: &mut R,
) -> Result<(EmbeddingTensor, EmbeddingTensor)> {
    Ok(SynthGenerator::new(cfg.clone())?.sample(label, rng))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent rng stream for sample `index` of class `label`.
pub fn sample_rng(cfg: &SynthConfig, label: Label, index: usize) -> ChaCha8Rng {
    let class = match label {
        Label::Real => 1u64,
        Label::Fake => 2u64,
    };
    let key = splitmix64(splitmix64(splitmix64(cfg.seed) ^ cfg.stream) ^ class) ^ index as u64;
    ChaCha8Rng::seed_from_u64(splitmix64(key))
}

pub fn sample_id(cfg: &SynthConfig, label: Label, index: usize) -> String {
    format!("{}-{}-{:05}", label.as_str(), cfg.stream, index)
}

/// 70/15/15 split keyed on a hash of the id.
pub fn split_for(id: &str) -> Split {
    match crc32fast::hash(id.as_bytes()) % 100 {
        0..70 => Split::Train,
        70..85 => Split::Valid,
        _ => Split::Test,
    }
}

/// Writes `n_real + n_fake` samples (two SLEM files each) and a manifest
/// under `out_dir`, returning the manifest path.
pub fn generate_dataset(cfg: &SynthConfig, n_real: usize, n_fake: usize, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let generator = SynthGenerator::new(cfg.clone())?;
    for sub in ["style", "linguistics"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(n_real + n_fake);
    let jobs = (0..n_real)
        .map(|i| (Label::Real, i))
        .chain((0..n_fake).map(|i| (Label::Fake, i)));
    for (label, index) in jobs {
        let id = sample_id(cfg, label, index);
        let (style, ling) = generator.sample(label, &mut sample_rng(cfg, label, index));
        let style_path = out_dir.join("style").join(format!("{id}.slem"));
        let linguistics_path = out_dir.join("linguistics").join(format!("{id}.slem"));
        write_embedding(&style, &style_path)?;
        write_embedding(&ling, &linguistics_path)?;
        records.push(ManifestRecord {
            split: split_for(&id),
            attack_id: (label == Label::Fake).then(|| format!("synth-m{:.2}", cfg.mismatch)),
            id,
            label,
            style_path,
            linguistics_path,
            dataset: "synthetic".to_string(),
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&records, &manifest)?;
    Ok(manifest)
}
