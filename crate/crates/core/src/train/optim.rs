use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub type GradStore = BTreeMap<String, Tensor>;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW::new(0.01)
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters without
    /// one are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                let bad = g.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
                return Err(Error::NonFinite(format!(
                    "gradient of '{name}' (entry {bad} = {}) at optimizer step {}",
                    g.data()[bad],
                    self.step + 1
                )));
            }
            let p = params.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= lr * self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Learning rate for `epoch`, interpolated from `lr_start` at epoch 0 to
/// `lr_end` at the last epoch.
pub fn linear_lr(epoch: usize, total_epochs: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 0..{total_epochs}")));
    }
    if total_epochs == 1 {
        return Ok(lr_start);
    }
    let frac = epoch as f64 / (total_epochs - 1) as f64;
    Ok(lr_start + frac * (lr_end - lr_start))
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping and whether clipping happened.
pub fn clip_grad_norm(grads: &mut GradStore, max_norm: f64) -> (f64, bool) {
    let norm = grads.values().map(|g| g.frobenius_sq()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
        return (norm, true);
    }
    (norm, false)
}

/// Patience-based early stopping on a metric where lower is better.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    /// Records `metric` for `epoch`; returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        ParamStore::from([("w".to_string(), Tensor::vector(vec![v]))])
    }

    fn grad(v: f64) -> GradStore {
        GradStore::from([("w".to_string(), Tensor::vector(vec![v]))])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = scalar_store(1.5);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut p, &grad(0.0), 0.1).unwrap();
        assert_eq!(p["w"].data(), &[1.5]);
    }

    #[test]
    fn first_step_matches_hand_update() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::new(0.01);
        opt.step(&mut p, &grad(1.0), 0.001).unwrap();
        let expected = 1.0 - 0.001 * 0.01 - 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p["w"].item() - expected).abs() < 1e-15);
        assert!((p["w"].item() - 0.99899).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut p = scalar_store(1.0);
        let mut opt = AdamW::default();
        let mut prev = 1.0;
        for _ in 0..2 {
            opt.step(&mut p, &grad(0.5), 0.01).unwrap();
            assert!(p["w"].item() < prev);
            prev = p["w"].item();
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut p = scalar_store(1.0);
        let err = AdamW::default().step(&mut p, &grad(f64::NAN), 0.01).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
        assert_eq!(p["w"].item(), 1.0);
    }

    #[test]
    fn linear_schedule() {
        assert_eq!(linear_lr(0, 50, 0.005, 0.0001).unwrap(), 0.005);
        assert!((linear_lr(49, 50, 0.005, 0.0001).unwrap() - 0.0001).abs() < 1e-18);
        let mid = 0.005 + (25.0 / 49.0) * (0.0001 - 0.005);
        assert!((linear_lr(25, 50, 0.005, 0.0001).unwrap() - mid).abs() < 1e-15);
        assert!((mid - 0.0025).abs() < 1e-4);
        assert!(linear_lr(50, 50, 0.005, 0.0001).is_err());
        assert_eq!(linear_lr(0, 1, 0.1, 0.01).unwrap(), 0.1);
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut g = GradStore::from([
            ("a".to_string(), Tensor::vector(vec![3.0])),
            ("b".to_string(), Tensor::vector(vec![4.0])),
        ]);
        let (norm, clipped) = clip_grad_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!(clipped);
        assert!((g["a"].item() - 0.6).abs() < 1e-15 && (g["b"].item() - 0.8).abs() < 1e-15);
        assert!(!clip_grad_norm(&mut g, 5.0).1);
    }

    #[test]
    fn early_stopping_fires_after_exactly_patience_bad_epochs() {
        let mut es = EarlyStopping::new(3);
        assert_eq!(es.observe(0, 1.0), (true, false));
        assert_eq!(es.observe(1, 0.5), (true, false));
        assert_eq!(es.observe(2, 0.6), (false, false));
        assert_eq!(es.observe(3, 0.5), (false, false));
        assert_eq!(es.observe(4, 0.7), (false, true));
        assert_eq!(es.best_epoch, 1);
        let mut es = EarlyStopping::new(1);
        es.observe(0, 1.0);
        assert_eq!(es.observe(1, 1.0), (false, true));
    }
}
