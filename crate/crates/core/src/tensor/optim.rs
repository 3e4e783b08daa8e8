use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily to match
/// the store on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` is indexed like the store and is cleared
    /// afterwards; any `None` entry is a usage error and leaves the
    /// parameters untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Usage(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads.iter()) {
            match g {
                None => return Err(Error::Usage(format!("missing gradient for {}", store.name(id)))),
                Some(g) if g.shape() != store.value(id).shape() => {
                    return Err(Error::dim(
                        "adam_step",
                        format!("gradient for {} has shape {:?}", store.name(id), g.shape()),
                    ))
                }
                _ => {}
            }
        }
        if self.m.len() != store.len() {
            self.m = store
                .ids()
                .map(|id| {
                    let [r, c] = store.value(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, id) in store.ids().enumerate() {
            let g = grads[k].take().expect("checked above");
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Warmup-then-inverse-square-root rate.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Usage("learning-rate schedule starts at step 1".into()));
    }
    if warmup == 0 || d_model == 0 {
        return Err(Error::Config("warmup and d_model must be positive".into()));
    }
    let s = step as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale_assign(f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::super::seeded_rng as rng;
    use super::super::Init;
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", 1, vals.len(), Init::Zeros, &mut rng(0)).unwrap();
        s.value_mut(id).data_mut().copy_from_slice(vals);
        s
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut s = store(&[1.0, -2.0]);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default());
        let mut g = vec![Some(Tensor::zeros(1, 2))];
        adam.step(&mut s, &mut g, 0.1).unwrap();
        assert_eq!(s, before);
        assert!(g[0].is_none(), "gradients are cleared");
    }

    #[test]
    fn one_step_on_square_moves_toward_zero() {
        let mut s = store(&[1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let mut g = vec![Some(Tensor::scalar(2.0))];
        adam.step(&mut s, &mut g, 0.01).unwrap();
        assert!(s.value(s.id("w").unwrap()).item().abs() < 1.0);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w0 - 3)^2 + 4 (w1 + 1)^2, minimum 0 at (3, -1)
        let mut s = store(&[0.0, 0.0]);
        let id = s.id("w").unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let f = |w: &[f64]| (w[0] - 3.0).powi(2) + 4.0 * (w[1] + 1.0).powi(2);
        for t in 0..500 {
            let w = s.value(id).data().to_vec();
            let g = vec![2.0 * (w[0] - 3.0), 8.0 * (w[1] + 1.0)];
            let lr = if t < 300 { 0.1 } else { 0.01 };
            adam.step(&mut s, &mut [Some(Tensor::row_vector(g))], lr).unwrap();
        }
        let obj = f(s.value(id).data());
        assert!(obj < 1e-3, "objective {obj}");
    }

    #[test]
    fn missing_gradient_is_usage_error() {
        let mut s = store(&[1.0]);
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut s, &mut [None], 0.1), Err(Error::Usage(_))));
        assert_eq!(s, before);
    }

    #[test]
    fn schedule_values() {
        let at_warmup = lr_schedule(8000, 512, 8000).unwrap();
        // independent evaluation: 1 / sqrt(512 * 8000)
        let oracle = 1.0 / (512.0f64 * 8000.0).sqrt();
        assert!((at_warmup - oracle).abs() < 1e-15);
        assert!((at_warmup - 4.94e-4).abs() < 1e-6);
        let mut prev = 0.0;
        for s in 1..400 {
            let r = lr_schedule(s, 32, 400).unwrap();
            assert!(r > prev);
            prev = r;
        }
        assert!(lr_schedule(800, 32, 400).unwrap() < lr_schedule(400, 32, 400).unwrap());
        assert!(matches!(lr_schedule(0, 32, 400), Err(Error::Usage(_))));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Some(Tensor::row_vector(vec![3.0, 0.0])), Some(Tensor::scalar(4.0))];
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
        let mut small = vec![Some(Tensor::scalar(0.5))];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap().item(), 0.5);
    }
}
