//! Compression modules, ASP projectors, feature fusion and the classifier
//! head.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`style.compress.down.weight`, `head.fc1.bias`, ...). A forward pass binds
//! the store into a [`Graph`], marking only the parameters being trained as
//! differentiable.

mod checkpoint;
mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use checkpoint::{ModelCheckpoint, Stage, SLCK_MAGIC, SLCK_VERSION};
pub use layers::{AspProjector, ClassifierHead, CompressionModule};

use crate::autodiff::{Graph, Var};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::store::Subspace;
use crate::tensor::Tensor;

pub type ParamStore = BTreeMap<String, Tensor>;

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

/// Registers every parameter in `g`; those for which `trainable` returns true
/// receive gradients, the rest are constants.
pub fn bind(g: &mut Graph, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> Bound {
    bind_where(g, params, |_| true, trainable)
}

/// Like [`bind`], restricted to the names accepted by `include`.
pub fn bind_where(
    g: &mut Graph,
    params: &ParamStore,
    include: impl Fn(&str) -> bool,
    trainable: impl Fn(&str) -> bool,
) -> Bound {
    let vars = params
        .iter()
        .filter(|(name, _)| include(name))
        .map(|(name, t)| {
            let v = if trainable(name) {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            (name.clone(), v)
        })
        .collect();
    Bound { vars }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::Config(format!("unknown activation '{s}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

/// Which feature families feed the classifier head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `[asp_style | asp_linguistics | S̄ | L̄]`
    Full,
    /// `[S̄ | L̄]`
    Dependency,
    /// `[asp_style | asp_linguistics]`
    Subspace,
    Style,
    Linguistics,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::Dependency,
        Variant::Subspace,
        Variant::Style,
        Variant::Linguistics,
    ];

    pub fn uses_asp(self, sub: Subspace) -> bool {
        match self {
            Variant::Full | Variant::Subspace => true,
            Variant::Style => sub == Subspace::Style,
            Variant::Linguistics => sub == Subspace::Linguistics,
            Variant::Dependency => false,
        }
    }

    pub fn uses_dependency(self) -> bool {
        matches!(self, Variant::Full | Variant::Dependency)
    }

    pub fn fusion_dim(self, asp_dim: usize, dependency_dim: usize) -> usize {
        let asp = [Subspace::Style, Subspace::Linguistics]
            .into_iter()
            .filter(|s| self.uses_asp(*s))
            .count();
        asp * asp_dim + if self.uses_dependency() { 2 * dependency_dim } else { 0 }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "full" => Ok(Variant::Full),
            "dependency" => Ok(Variant::Dependency),
            "subspace" => Ok(Variant::Subspace),
            "style" => Ok(Variant::Style),
            "linguistics" => Ok(Variant::Linguistics),
            _ => Err(Error::Config(format!("unknown variant '{s}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Variant::Full => "full",
            Variant::Dependency => "dependency",
            Variant::Subspace => "subspace",
            Variant::Style => "style",
            Variant::Linguistics => "linguistics",
        })
    }
}

/// Architecture settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub bottleneck_dim: usize,
    pub dependency_dim: usize,
    pub asp_dim: usize,
    pub attention_dim: usize,
    pub head_hidden_dim: usize,
    pub activation: Activation,
    pub bn_dropout: f64,
    pub compression_fc_dropout: f64,
    pub asp_dropout: f64,
    pub classifier_dropout: f64,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 1024,
            bottleneck_dim: 256,
            dependency_dim: 256,
            asp_dim: 256,
            attention_dim: 128,
            head_hidden_dim: 256,
            activation: Activation::Relu,
            bn_dropout: 0.1,
            compression_fc_dropout: 0.1,
            asp_dropout: 0.1,
            classifier_dropout: 0.25,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 12] = [
        "Input dim",
        "Bottleneck dim",
        "Compression output dim",
        "ASP output dim",
        "Attention dim",
        "Classifier hidden dim",
        "Activation",
        "BN dropout",
        "Compression FC dropout",
        "ASP dropout",
        "Classifier FC dropout",
        "Variant",
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
        take!("Input dim", self.input_dim);
        take!("Bottleneck dim", self.bottleneck_dim);
        take!("Compression output dim", self.dependency_dim);
        take!("ASP output dim", self.asp_dim);
        take!("Attention dim", self.attention_dim);
        take!("Classifier hidden dim", self.head_hidden_dim);
        take!("Activation", self.activation);
        take!("BN dropout", self.bn_dropout);
        take!("Compression FC dropout", self.compression_fc_dropout);
        take!("ASP dropout", self.asp_dropout);
        take!("Classifier FC dropout", self.classifier_dropout);
        take!("Variant", self.variant);
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.bottleneck_dim,
            self.dependency_dim,
            self.asp_dim,
            self.attention_dim,
            self.head_hidden_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        for p in [
            self.bn_dropout,
            self.compression_fc_dropout,
            self.asp_dropout,
            self.classifier_dropout,
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.set("Input dim", self.input_dim.to_string());
        kv.set("Bottleneck dim", self.bottleneck_dim.to_string());
        kv.set("Compression output dim", self.dependency_dim.to_string());
        kv.set("ASP output dim", self.asp_dim.to_string());
        kv.set("Attention dim", self.attention_dim.to_string());
        kv.set("Classifier hidden dim", self.head_hidden_dim.to_string());
        kv.set("Activation", self.activation.to_string());
        kv.set("BN dropout", self.bn_dropout.to_string());
        kv.set("Compression FC dropout", self.compression_fc_dropout.to_string());
        kv.set("ASP dropout", self.asp_dropout.to_string());
        kv.set("Classifier FC dropout", self.classifier_dropout.to_string());
        kv.set("Variant", self.variant.to_string());
    }
}

/// Per-sample dependency features: `frames` is `D×T` (S or L), `mean` its
/// temporal average (S̄ or L̄).
#[derive(Clone, Debug, PartialEq)]
pub struct DependencyFeature {
    pub frames: Tensor,
    pub mean: Tensor,
}

/// Rearranges `B×F×T` into `(B·T)×F`, one row per frame, batch-major.
pub fn to_frames(x: &Tensor) -> Result<Tensor> {
    let (b, f, t) = x.dims3()?;
    let src = x.data();
    let mut out = vec![0.0; b * t * f];
    for bi in 0..b {
        for fi in 0..f {
            let row = &src[(bi * f + fi) * t..(bi * f + fi + 1) * t];
            for (ti, v) in row.iter().enumerate() {
                out[(bi * t + ti) * f + fi] = *v;
            }
        }
    }
    Tensor::new(vec![b * t, f], out)
}

fn subspace_prefix(sub: Subspace) -> &'static str {
    match sub {
        Subspace::Style => "style",
        Subspace::Linguistics => "linguistics",
    }
}

/// All SLIM components for one architecture configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct SlimModel {
    pub config: ModelConfig,
    pub style_compress: CompressionModule,
    pub linguistics_compress: CompressionModule,
    pub style_asp: AspProjector,
    pub linguistics_asp: AspProjector,
    pub head: ClassifierHead,
}

impl SlimModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let compress = |sub: Subspace| CompressionModule {
            prefix: format!("{}.compress", subspace_prefix(sub)),
            input_dim: config.input_dim,
            bottleneck_dim: config.bottleneck_dim,
            output_dim: config.dependency_dim,
            activation: config.activation,
            bottleneck_dropout: config.bn_dropout,
            projection_dropout: config.compression_fc_dropout,
        };
        let asp = |sub: Subspace| AspProjector {
            prefix: format!("{}.asp", subspace_prefix(sub)),
            input_dim: config.input_dim,
            attention_dim: config.attention_dim,
            output_dim: config.asp_dim,
            dropout: config.asp_dropout,
        };
        Ok(SlimModel {
            style_compress: compress(Subspace::Style),
            linguistics_compress: compress(Subspace::Linguistics),
            style_asp: asp(Subspace::Style),
            linguistics_asp: asp(Subspace::Linguistics),
            head: ClassifierHead {
                prefix: "head".into(),
                input_dim: config.variant.fusion_dim(config.asp_dim, config.dependency_dim),
                hidden_dim: config.head_hidden_dim,
                activation: config.activation,
                dropout: config.classifier_dropout,
            },
            config,
        })
    }

    pub fn compression(&self, sub: Subspace) -> &CompressionModule {
        match sub {
            Subspace::Style => &self.style_compress,
            Subspace::Linguistics => &self.linguistics_compress,
        }
    }

    pub fn asp(&self, sub: Subspace) -> &AspProjector {
        match sub {
            Subspace::Style => &self.style_asp,
            Subspace::Linguistics => &self.linguistics_asp,
        }
    }

    /// True for names owned by the stage-1 compression modules.
    pub fn is_stage1_param(name: &str) -> bool {
        name.contains(".compress.")
    }

    pub fn init_stage1<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.style_compress.init(&mut store, rng);
        self.linguistics_compress.init(&mut store, rng);
        store
    }

    /// Stage-2 parameters required by the configured variant.
    pub fn init_stage2<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for sub in [Subspace::Style, Subspace::Linguistics] {
            if self.config.variant.uses_asp(sub) {
                self.asp(sub).init(&mut store, rng);
            }
        }
        self.head.init(&mut store, rng);
        store
    }

    /// Batched compression: `x: B×F×T` → (`S` as `B×T×D`, `S̄` as `B×D`).
    pub fn compress_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        sub: Subspace,
        x: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let (b, f, t) = x.dims3()?;
        if f != self.config.input_dim {
            return Err(Error::shape("compress", &[f], &[self.config.input_dim]));
        }
        let frames = g.constant(to_frames(x)?);
        let s = self.compression(sub).forward(g, p, frames, rng)?;
        let s = g.reshape(s, &[b, t, self.config.dependency_dim])?;
        let mean = g.reduce_mean(s, 1)?;
        Ok((s, mean))
    }

    /// Eval-mode temporal means `S̄` and `L̄` (`B×D` each) for a batch.
    pub fn dependency_means(&self, params: &ParamStore, style: &Tensor, linguistics: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = bind(&mut g, params, |_| false);
        let (_, s) = self.compress_batch::<rand_chacha::ChaCha8Rng>(&mut g, &p, Subspace::Style, style, None)?;
        let (_, l) = self.compress_batch::<rand_chacha::ChaCha8Rng>(&mut g, &p, Subspace::Linguistics, linguistics, None)?;
        Ok((g.value(s).clone(), g.value(l).clone()))
    }

    /// Batched ASP projection of `x: B×F×T` → `B×asp_dim`.
    pub fn asp_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        sub: Subspace,
        x: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let (b, f, t) = x.dims3()?;
        if f != self.config.input_dim {
            return Err(Error::shape("asp_project", &[f], &[self.config.input_dim]));
        }
        let frames = g.constant(to_frames(x)?);
        self.asp(sub).forward(g, p, frames, b, t, rng)
    }

    /// Fusion vector and logits for a batch. Compression runs in eval mode;
    /// precomputed `(S̄, L̄)` may be passed to skip it.
    pub fn classify_batch<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        style: &Tensor,
        linguistics: &Tensor,
        dependency: Option<(&Tensor, &Tensor)>,
        mut rng: Option<&mut R>,
    ) -> Result<(Var, Var)> {
        let variant = self.config.variant;
        let mut parts = Vec::with_capacity(4);
        for (sub, x) in [(Subspace::Style, style), (Subspace::Linguistics, linguistics)] {
            if variant.uses_asp(sub) {
                parts.push(self.asp_batch(g, p, sub, x, rng.as_deref_mut())?);
            }
        }
        if variant.uses_dependency() {
            let (s_mean, l_mean) = match dependency {
                Some((s, l)) => (s.clone(), l.clone()),
                None => {
                    let frozen: ParamStore = p
                        .iter()
                        .filter(|(n, _)| Self::is_stage1_param(n))
                        .map(|(n, v)| (n.to_string(), g.value(v).clone()))
                        .collect();
                    self.dependency_means(&frozen, style, linguistics)?
                }
            };
            parts.push(g.constant(s_mean));
            parts.push(g.constant(l_mean));
        }
        let fused = g.concat(&parts)?;
        let logits = self.head.forward(g, p, fused, rng)?;
        Ok((fused, logits))
    }

    /// Per-sample compression of a `K×F×T` tensor.
    pub fn compress<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        sub: Subspace,
        x: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<DependencyFeature> {
        let pooled = pool_layers(x)?;
        let mut g = Graph::new();
        let p = bind(&mut g, params, |_| false);
        let (s, mean) = self.compress_batch(&mut g, &p, sub, &pooled, rng)?;
        let d = self.config.dependency_dim;
        let t = pooled.shape()[2];
        Ok(DependencyFeature {
            frames: g.value(s).reshape(&[t, d])?.transpose()?,
            mean: g.value(mean).reshape(&[d])?,
        })
    }

    /// Per-sample ASP projection of a `K×F×T` tensor.
    pub fn asp_project<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        sub: Subspace,
        x: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<Tensor> {
        let pooled = pool_layers(x)?;
        let mut g = Graph::new();
        let p = bind(&mut g, params, |_| false);
        let out = self.asp_batch(&mut g, &p, sub, &pooled, rng)?;
        g.value(out).reshape(&[self.config.asp_dim])
    }

    /// Per-sample full forward: logit plus both dependency features.
    pub fn forward_full<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        style: &Tensor,
        linguistics: &Tensor,
        rng: Option<&mut R>,
    ) -> Result<(f64, DependencyFeature, DependencyFeature)> {
        let dep_s = self.compress::<R>(params, Subspace::Style, style, None)?;
        let dep_l = self.compress::<R>(params, Subspace::Linguistics, linguistics, None)?;
        let (ps, pl) = (pool_layers(style)?, pool_layers(linguistics)?);
        let d = self.config.dependency_dim;
        let s_mean = dep_s.mean.reshape(&[1, d])?;
        let l_mean = dep_l.mean.reshape(&[1, d])?;
        let mut g = Graph::new();
        let p = bind(&mut g, params, |_| false);
        let (_, logits) = self.classify_batch(&mut g, &p, &ps, &pl, Some((&s_mean, &l_mean)), rng)?;
        Ok((g.value(logits).item(), dep_s, dep_l))
    }
}

/// Mean over the layer axis of `K×F×T`, returned as a batch of one (`1×F×T`).
pub fn pool_layers(x: &Tensor) -> Result<Tensor> {
    let (_, f, t) = x.dims3()?;
    x.reduce_mean(0)?.reshape(&[1, f, t])
}
