//! Bias-corrected Adam over the trainable tensors.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{GradTable, Params, TRAINABLE};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// First and second moments per trainable tensor, in `TRAINABLE` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.trainable().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Applies one update. Gradients are checked before anything is written,
    /// so a rejected step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut Params, grads: &GradTable) -> Result<()> {
        if grads.tensors.len() != TRAINABLE.len() {
            return Err(Error::dim("adam gradient table", TRAINABLE.len(), grads.tensors.len()));
        }
        for (i, ((name, group), g)) in TRAINABLE.iter().zip(&grads.tensors).enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::dim("adam gradient", self.m[i].len(), g.len()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    step: self.step,
                    group: group.name(),
                    tensor: name,
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in params.trainable_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.tensors[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn small() -> (Params, AdamConfig) {
        let cfg = RunConfig {
            input_dim: 4,
            feature_dim: 4,
            r_attn: 2,
            lora_rank: 2,
            ..Default::default()
        };
        (Params::init(&cfg, &mut substream(3, 0)).unwrap(), AdamConfig::from_config(&cfg))
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut p, cfg) = small();
        let mut adam = Adam::new(cfg, &p);
        let mut g = GradTable::zeros_like(&p);
        g.tensors[8][0] = 1.0;
        adam.step(&mut p, &g).unwrap();
        let expected = -cfg.learning_rate / (1.0 + cfg.eps);
        assert!((p.heads.clean.bias - expected).abs() < 1e-18);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_projection() {
        let (mut p, cfg) = small();
        let before = p.clone();
        let mut adam = Adam::new(cfg, &p);
        for _ in 0..5 {
            adam.step(&mut p, &GradTable::zeros_like(&before)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_with_diagnostics() {
        let (mut p, cfg) = small();
        let before = p.clone();
        let mut adam = Adam::new(cfg, &p);
        let mut g = GradTable::zeros_like(&p);
        g.tensors[3][1] = f64::NAN;
        match adam.step(&mut p, &g) {
            Err(Error::NonFiniteGradient { step, group, tensor }) => {
                assert_eq!(step, 0);
                assert_eq!(group, "noise_gen");
                assert_eq!(tensor, "noise.w_k");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(adam.step, 0);
    }
}
