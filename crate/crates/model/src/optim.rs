//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Layout, Params};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in `{tensor}` at element {index}")]
    NonFinite { tensor: String, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        AdamW {
            config,
            m: vec![S::zero(); n_params],
            v: vec![S::zero(); n_params],
            step: 0,
        }
    }

    /// Updates taken so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Weight decay applies only to tensors
    /// marked `decay` in the layout. A non-finite gradient leaves parameters
    /// and state untouched.
    pub fn step(&mut self, params: &mut Params<S>, grads: &Params<S>, layout: &Layout, lr: f64) -> Result<(), OptimError> {
        for t in &layout.tensors {
            if let Some(i) = grads.data[t.range()].iter().position(|g| !g.is_finite()) {
                return Err(OptimError::NonFinite {
                    tensor: t.name.clone(),
                    index: i,
                });
            }
        }
        self.step += 1;
        for t in &layout.tensors {
            let r = t.range();
            let wd = if t.decay { self.config.weight_decay } else { 0.0 };
            update(
                &mut params.data[r.clone()],
                &grads.data[r.clone()],
                &mut self.m[r.clone()],
                &mut self.v[r],
                &self.config,
                lr,
                wd,
                self.step,
            );
        }
        Ok(())
    }
}

/// The AdamW recurrence on one slice at (1-based) step `t`.
#[allow(clippy::too_many_arguments)]
pub fn update<S: Scalar>(p: &mut [S], g: &[S], m: &mut [S], v: &mut [S], cfg: &AdamWConfig, lr: f64, weight_decay: f64, t: u64) {
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::of(1.0 - cfg.beta1.powi(t as i32));
    let c2 = S::of(1.0 - cfg.beta2.powi(t as i32));
    let shrink = S::of(1.0 - lr * weight_decay);
    let (lr, eps) = (S::of(lr), S::of(cfg.eps));
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + (S::one() - b1) * gi;
        v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] = p[i] * shrink - lr * mh / (vh.sqrt() + eps);
    }
}

/// Learning rate at optimizer step `step` (0-based) of `total`: linear warmup
/// over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, lr: f64, warmup: usize) -> f64 {
    if step < warmup {
        return lr * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let s = (step - warmup).min(span) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * s / span as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_step_trajectory() {
        // Reference values from a direct evaluation of the recurrences.
        let want = [0.4895000003333333, 0.49454451801424987, 0.49812073898535525];
        let cfg = AdamWConfig::default();
        let (mut p, mut m, mut v) = ([0.5f64], [0.0], [0.0]);
        for (t, g) in [0.3, -1.2, 0.05].into_iter().enumerate() {
            update(&mut p, &[g], &mut m, &mut v, &cfg, 1e-2, cfg.weight_decay, t as u64 + 1);
            assert!((p[0] - want[t]).abs() < 1e-10, "step {}: {}", t + 1, p[0]);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig::default();
        let mut p = [1.5f32, -2.0, 0.25];
        let before = p;
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for t in 1..=5 {
            update(&mut p, &[0.0; 3], &mut m, &mut v, &cfg, 1e-3, 0.0, t);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(lr_at(0, 100, 1e-3, 0), 1e-3);
        assert!(lr_at(100, 100, 1e-3, 0) < 1e-15);
        assert!((lr_at(50, 100, 1e-3, 0) - 5e-4).abs() < 1e-15);
        assert!((lr_at(0, 100, 1e-3, 10) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_at(10, 100, 1e-3, 10), 1e-3);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let l = lr_at(s, 100, 1e-3, 0);
            assert!(l <= prev);
            prev = l;
        }
    }

    proptest::proptest! {
        #[test]
        fn schedule_stays_within_peak(total in 1usize..500, warmup in 0usize..50, frac in 0.0f64..1.5) {
            let step = (frac * total as f64) as usize;
            let l = lr_at(step, total, 3e-4, warmup);
            proptest::prop_assert!((0.0..=3e-4 * (1.0 + 1e-12)).contains(&l));
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        use crate::config::ModelConfig;
        use crate::props::PropertySpec;
        let cfg = ModelConfig::small(20, 3, 8);
        let layout = Layout::new(&cfg, &PropertySpec::default());
        let mut p: Params<f32> = Params::init(&layout, &cfg, 1);
        let before = p.clone();
        let mut g = Params::zeros(&layout);
        g.data[layout.total - 1] = f32::NAN;
        let mut opt = AdamW::new(AdamWConfig::default(), layout.total);
        let err = opt.step(&mut p, &g, &layout, 1e-3).unwrap_err();
        assert!(matches!(err, OptimError::NonFinite { ref tensor, .. } if tensor == "head.tokens"));
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 0);
    }
}
