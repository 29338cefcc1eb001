use rand::Rng;

use super::{Activation, Bound, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Uniform `±1/sqrt(fan_in)` initialization for a `fan_in×fan_out` weight
/// and its bias.
pub(crate) fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
    let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("linear extents");
    let b = Tensor::vector(draw(fan_out));
    store.insert(format!("{name}.weight"), w);
    store.insert(format!("{name}.bias"), b);
}

pub(crate) fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn activate(g: &mut Graph, act: Activation, x: Var) -> Result<Var> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
    }
}

/// Layer-pooled frames to bottleneck, input recovery with a residual path,
/// then projection to the dependency feature size.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressionModule {
    pub prefix: String,
    pub input_dim: usize,
    pub bottleneck_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub bottleneck_dropout: f64,
    pub projection_dropout: f64,
}

impl CompressionModule {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        init_linear(store, &format!("{}.down", self.prefix), self.input_dim, self.bottleneck_dim, rng);
        init_linear(store, &format!("{}.up", self.prefix), self.bottleneck_dim, self.input_dim, rng);
        init_linear(store, &format!("{}.proj", self.prefix), self.input_dim, self.output_dim, rng);
    }

    /// `frames: N×F` (one row per time step) → `N×output_dim`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: Var,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let h = linear(g, p, &format!("{}.down", self.prefix), frames)?;
        let h = activate(g, self.activation, h)?;
        let h = g.dropout(h, self.bottleneck_dropout, rng.as_deref_mut())?;
        let up = linear(g, p, &format!("{}.up", self.prefix), h)?;
        let recovered = g.add(up, frames)?;
        let recovered = g.dropout(recovered, self.projection_dropout, rng)?;
        linear(g, p, &format!("{}.proj", self.prefix), recovered)
    }
}

/// Attentive statistics pooling followed by a linear projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AspProjector {
    pub prefix: String,
    pub input_dim: usize,
    pub attention_dim: usize,
    pub output_dim: usize,
    pub dropout: f64,
}

impl AspProjector {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        init_linear(store, &format!("{}.attn", self.prefix), self.input_dim, self.attention_dim, rng);
        let bound = 1.0 / (self.attention_dim as f64).sqrt();
        let v = (0..self.attention_dim).map(|_| rng.random_range(-bound..bound)).collect();
        store.insert(
            format!("{}.score", self.prefix),
            Tensor::new(vec![self.attention_dim, 1], v).expect("score extents"),
        );
        init_linear(store, &format!("{}.mlp", self.prefix), 2 * self.input_dim, self.output_dim, rng);
    }

    /// Attention weights `B×T` for frames laid out as `(B·T)×F`.
    pub fn attention(&self, g: &mut Graph, p: &Bound, frames: Var, batch: usize, steps: usize) -> Result<Var> {
        let e = linear(g, p, &format!("{}.attn", self.prefix), frames)?;
        let e = g.tanh(e)?;
        let v = p.get(&format!("{}.score", self.prefix))?;
        let scores = g.matmul(e, v)?;
        let scores = g.reshape(scores, &[batch, steps])?;
        g.softmax_over_time(scores)
    }

    /// Weighted mean and std over time, concatenated: `B×2F`.
    pub fn pooled_stats(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: Var,
        batch: usize,
        steps: usize,
    ) -> Result<Var> {
        let w = self.attention(g, p, frames, batch, steps)?;
        let h = g.reshape(frames, &[batch, steps, self.input_dim])?;
        let mu = g.weighted_mean(h, w)?;
        let sigma = g.weighted_std(h, w)?;
        g.concat(&[mu, sigma])
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        frames: Var,
        batch: usize,
        steps: usize,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let stats = self.pooled_stats(g, p, frames, batch, steps)?;
        let out = linear(g, p, &format!("{}.mlp", self.prefix), stats)?;
        g.dropout(out, self.dropout, rng)
    }
}

/// Two fully connected layers with dropout in between, producing one logit
/// per sample (positive = fake).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
}

impl ClassifierHead {
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        init_linear(store, &format!("{}.fc1", self.prefix), self.input_dim, self.hidden_dim, rng);
        init_linear(store, &format!("{}.fc2", self.prefix), self.hidden_dim, 1, rng);
    }

    /// `x: B×input_dim` → logits of shape `B`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, p: &Bound, x: Var, rng: Option<&mut R>) -> Result<Var> {
        let batch = g.value(x).shape()[0];
        let h = linear(g, p, &format!("{}.fc1", self.prefix), x)?;
        let h = activate(g, self.activation, h)?;
        let h = g.dropout(h, self.dropout, rng)?;
        let z = linear(g, p, &format!("{}.fc2", self.prefix), h)?;
        g.reshape(z, &[batch])
    }
}
