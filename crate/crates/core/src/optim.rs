//! Adam with global-norm gradient clipping.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Optimizer state: one pair of moment buffers per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar = f64> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<S: AsRef<str>>(cfg: AdamConfig, params: &[(S, Tensor<T>)]) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Global L2 norm of the gradients; missing gradients count as zero.
    pub fn grad_norm<S: AsRef<str>>(params: &[(S, Tensor<T>)]) -> Result<f64> {
        let mut sq = 0.0;
        for (name, p) in params {
            if let Some(g) = p.grad() {
                for (i, &x) in g.iter().enumerate() {
                    let x = x.as_f64();
                    if !x.is_finite() {
                        return Err(Error::NonFiniteGradient { name: name.as_ref().to_string(), index: i, value: x });
                    }
                    sq += x * x;
                }
            }
        }
        Ok(sq.sqrt())
    }

    /// Clips, then applies one bias-corrected update to every parameter.
    /// Returns the pre-clip gradient norm.
    pub fn step<S: AsRef<str>>(&mut self, params: &[(S, Tensor<T>)]) -> Result<f64> {
        if params.len() != self.m.len() {
            return Err(Error::Config(format!("optimizer tracks {} parameters, got {}", self.m.len(), params.len())));
        }
        for ((name, p), m) in params.iter().zip(&self.m) {
            if p.numel() != m.len() {
                return Err(Error::ShapeMismatch {
                    name: name.as_ref().to_string(),
                    found: p.shape().to_vec(),
                    expected: vec![m.len()],
                });
            }
        }
        let norm = Self::grad_norm(params)?;
        let c = self.cfg;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        let scale = T::lit(scale);
        for (((_, p), m), v) in params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = p.grad();
            p.update(|w| {
                for i in 0..w.len() {
                    let gi = g.as_ref().map_or(T::zero(), |g| g[i] * scale);
                    m[i] = b1 * m[i] + one_b1 * gi;
                    v[i] = b2 * v[i] + one_b2 * gi * gi;
                    w[i] = w[i] - step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
                }
            });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Vec<(String, Tensor)> {
        vec![("w".to_string(), Tensor::param(v.to_vec(), &[v.len()]).unwrap())]
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let p = param(&[1.0, 1.0]);
        p[0].1.set_grad(Some(vec![0.3, -0.2]));
        let mut opt = Adam::new(AdamConfig { clip_norm: 0.0, ..Default::default() }, &p);
        opt.step(&p).unwrap();
        let w = p[0].1.to_vec();
        assert!((w[0] - (1.0 - 3e-4)).abs() < 1e-9);
        assert!((w[1] - (1.0 + 3e-4)).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let p = param(&[0.5, -2.0]);
        p[0].1.set_grad(Some(vec![0.0, 0.0]));
        let mut opt = Adam::new(AdamConfig::default(), &p);
        opt.step(&p).unwrap();
        assert_eq!(p[0].1.to_vec(), vec![0.5, -2.0]);
    }

    #[test]
    fn clipping_scales_to_the_ceiling() {
        let p = param(&[0.0, 0.0]);
        p[0].1.set_grad(Some(vec![6.0, 8.0]));
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert_eq!(opt.step(&p).unwrap(), 10.0);
        // First moment holds (1 − β1)·g/10.
        assert!((opt.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((opt.m[0][1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let p = param(&[0.0, 0.0]);
        p[0].1.set_grad(Some(vec![0.0, f64::NAN]));
        let mut opt = Adam::new(AdamConfig::default(), &p);
        match opt.step(&p) {
            Err(Error::NonFiniteGradient { name, index, .. }) => assert_eq!((name.as_str(), index), ("w", 1)),
            other => panic!("{other:?}"),
        }
        assert_eq!(p[0].1.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn works_in_single_precision() {
        let p = vec![("w", Tensor::<f32>::param(vec![1.0], &[1]).unwrap())];
        p[0].1.set_grad(Some(vec![2.0]));
        let mut opt = Adam::new(AdamConfig { clip_norm: 0.0, ..Default::default() }, &p);
        opt.step(&p).unwrap();
        assert!((p[0].1.to_vec()[0] - (1.0 - 3e-4)).abs() < 1e-6);
    }
}
