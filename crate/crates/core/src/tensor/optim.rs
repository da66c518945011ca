use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with bias correction and decoupled weight decay.
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    decay: Vec<bool>,
}

impl<F: Scalar> AdamW<F> {
    /// `decay[i]` selects which parameters receive weight decay.
    pub fn new(config: AdamWConfig, shapes: &[&[usize]], decay: Vec<bool>) -> Self {
        assert_eq!(shapes.len(), decay.len());
        let zeros = |s: &&[usize]| vec![F::zero(); s.iter().product()];
        Self {
            config,
            step: 0,
            m: shapes.iter().map(zeros).collect(),
            v: shapes.iter().map(zeros).collect(),
            decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. A non-finite gradient
    /// rejects the whole step and leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Vec<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return dim_err(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.len() || p.numel() != self.m[i].len() {
                return dim_err(format!(
                    "gradient {i} has {} elements, parameter {}",
                    g.len(),
                    p.numel()
                ));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    message: format!("gradient of parameter {i} is {} at element {j}", g[j]),
                    dump: None,
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one = F::one();
        let step_size = F::from_f64(lr / bc1);
        let inv_bc2_sqrt = F::from_f64(1.0 / bc2.sqrt());
        let eps = F::from_f64(c.eps);
        let shrink = F::from_f64(1.0 - lr * c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = self.decay[i] && c.weight_decay != 0.0;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                if decay {
                    *w = *w * shrink;
                }
                *w = *w - step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Global ℓ2 norm across every gradient buffer.
pub fn global_norm<F: Scalar>(grads: &[Vec<F>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the factor applied (1 when below the threshold).
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = F::from_f64(scale);
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|x| *x = *x * s);
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_opt(lr: f64, betas: (f64, f64), wd: f64) -> AdamW<f64> {
        let cfg = AdamWConfig {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay: wd,
        };
        AdamW::new(cfg, &[&[1]], vec![true])
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut opt = scalar_opt(0.1, (0.9, 0.999), 0.0);
        let mut w = vec![Tensor::scalar(1.0)];
        opt.step(&mut w, &[vec![1.0]], 0.1).unwrap();
        assert!((w[0].item() - 0.9).abs() < 1e-7);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = scalar_opt(0.1, (0.9, 0.95), 0.0);
        let mut w = vec![Tensor::scalar(0.37)];
        for _ in 0..3 {
            opt.step(&mut w, &[vec![0.0]], 0.1).unwrap();
        }
        assert_eq!(w[0].item(), 0.37);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let mut opt = scalar_opt(0.1, (0.9, 0.95), 0.0);
        let mut w = vec![Tensor::scalar(1.0)];
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = 2.0 * w[0].item();
            opt.step(&mut w, &[vec![g]], 0.1).unwrap();
            let now = w[0].item().abs();
            assert!(now < prev, "|w| went from {prev} to {now}");
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut opt = scalar_opt(0.1, (0.9, 0.95), 0.0);
        let mut w = vec![Tensor::scalar(1.0)];
        let err = opt.step(&mut w, &[vec![f64::NAN]], 0.1);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        assert_eq!(w[0].item(), 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut opt = scalar_opt(0.1, (0.9, 0.95), 0.5);
        let mut w = vec![Tensor::scalar(2.0)];
        opt.step(&mut w, &[vec![0.0]], 0.1).unwrap();
        assert!((w[0].item() - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![vec![3.0f64, 4.0]];
        let s = clip_grad_norm(&mut g, 1.0);
        assert!((s - 0.2).abs() < 1e-15);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);

        let mut g = vec![vec![0.1f64]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 1.0);
        assert_eq!(g[0][0], 0.1);
    }
}
