//! Parameter containers and the fixed ordering of trainable tensors.

use rand::Rng;

use crate::config::RunConfig;
use crate::encoder::EncoderParams;
use crate::error::Result;
use crate::noise::NoiseGenParams;
use crate::numeric::{self, Vec64};

/// Linear classifier producing one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Vec64,
    pub bias: f64,
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: Vec64::zeros(dim),
            bias: 0.0,
        }
    }

    pub fn logit(&self, f: &[f64]) -> f64 {
        numeric::dot(&self.weight, f) + self.bias
    }
}

/// Clean head on `f`, noisy head on `f + eps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub clean: LinearHead,
    pub noisy: LinearHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Lora,
    NoiseGen,
    CleanHead,
    NoiseHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Lora,
        ParamGroup::NoiseGen,
        ParamGroup::CleanHead,
        ParamGroup::NoiseHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Lora => "lora",
            ParamGroup::NoiseGen => "noise_gen",
            ParamGroup::CleanHead => "clean_head",
            ParamGroup::NoiseHead => "noise_head",
        }
    }
}

/// Trainable tensors in canonical order. Gradient tables and optimizer
/// moments follow the same order.
pub const TRAINABLE: [(&str, ParamGroup); 11] = [
    ("encoder.lora_b", ParamGroup::Lora),
    ("encoder.lora_a", ParamGroup::Lora),
    ("noise.w_q", ParamGroup::NoiseGen),
    ("noise.w_k", ParamGroup::NoiseGen),
    ("noise.w_v", ParamGroup::NoiseGen),
    ("noise.w_mu", ParamGroup::NoiseGen),
    ("noise.w_var", ParamGroup::NoiseGen),
    ("head.weight", ParamGroup::CleanHead),
    ("head.bias", ParamGroup::CleanHead),
    ("noise_head.weight", ParamGroup::NoiseHead),
    ("noise_head.bias", ParamGroup::NoiseHead),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoder: EncoderParams,
    pub noise_gen: NoiseGenParams,
    pub heads: Heads,
}

impl Params {
    /// Seeded initialization: projection and adapter `A` with std `1/sqrt(D)`,
    /// `B = 0`, generator weights with std `1/sqrt(d)`, zero heads.
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Result<Self> {
        let encoder = EncoderParams::init(
            cfg.input_dim,
            cfg.feature_dim,
            cfg.lora_rank,
            cfg.lora_alpha,
            cfg.dropout_rate,
            rng,
        );
        let noise_gen = NoiseGenParams::init(cfg.feature_dim, cfg.r_attn, rng)?;
        Ok(Self {
            encoder,
            noise_gen,
            heads: Heads {
                clean: LinearHead::zeros(cfg.feature_dim),
                noisy: LinearHead::zeros(cfg.feature_dim),
            },
        })
    }

    pub fn trainable(&self) -> [&[f64]; 11] {
        [
            self.encoder.lora_b.as_slice(),
            self.encoder.lora_a.as_slice(),
            self.noise_gen.w_q.as_slice(),
            self.noise_gen.w_k.as_slice(),
            self.noise_gen.w_v.as_slice(),
            self.noise_gen.w_mu.as_slice(),
            self.noise_gen.w_var.as_slice(),
            self.heads.clean.weight.as_slice(),
            std::slice::from_ref(&self.heads.clean.bias),
            self.heads.noisy.weight.as_slice(),
            std::slice::from_ref(&self.heads.noisy.bias),
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut [f64]; 11] {
        let Params {
            encoder,
            noise_gen,
            heads,
        } = self;
        [
            encoder.lora_b.as_mut_slice(),
            encoder.lora_a.as_mut_slice(),
            noise_gen.w_q.as_mut_slice(),
            noise_gen.w_k.as_mut_slice(),
            noise_gen.w_v.as_mut_slice(),
            noise_gen.w_mu.as_mut_slice(),
            noise_gen.w_var.as_mut_slice(),
            heads.clean.weight.as_mut_slice(),
            std::slice::from_mut(&mut heads.clean.bias),
            heads.noisy.weight.as_mut_slice(),
            std::slice::from_mut(&mut heads.noisy.bias),
        ]
    }

    /// Adds seeded Gaussian noise of the given scale to every trainable tensor.
    pub fn jitter(&mut self, scale: f64, rng: &mut impl Rng) {
        for t in self.trainable_mut() {
            for x in t.iter_mut() {
                *x += scale * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
    }
}

/// Gradients for every trainable tensor, in [`TRAINABLE`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTable {
    pub tensors: Vec<Vec<f64>>,
}

impl GradTable {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            tensors: params.trainable().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        TRAINABLE
            .iter()
            .position(|(n, _)| *n == name)
            .map(|i| self.tensors[i].as_slice())
    }

    /// All gradient entries belonging to `group`, concatenated in order.
    pub fn group(&self, group: ParamGroup) -> Vec<f64> {
        TRAINABLE
            .iter()
            .zip(&self.tensors)
            .filter(|((_, g), _)| *g == group)
            .flat_map(|(_, t)| t.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn trainable_order_matches_names() {
        let cfg = RunConfig::default();
        let p = Params::init(&cfg, &mut substream(0, 0)).unwrap();
        let lens: Vec<usize> = p.trainable().iter().map(|t| t.len()).collect();
        let d = cfg.feature_dim;
        let h = cfg.hidden_dim();
        assert_eq!(
            lens,
            vec![
                d * cfg.lora_rank,
                cfg.lora_rank * cfg.input_dim,
                h * d,
                h * d,
                h * d,
                h * d,
                h * d,
                d,
                1,
                d,
                1
            ]
        );
        assert!(p.encoder.lora_b.as_slice().iter().all(|x| *x == 0.0));
        assert!(p.heads.clean.weight.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn group_lookup() {
        let cfg = RunConfig {
            feature_dim: 4,
            input_dim: 4,
            r_attn: 2,
            lora_rank: 1,
            ..Default::default()
        };
        let p = Params::init(&cfg, &mut substream(0, 0)).unwrap();
        let mut g = GradTable::zeros_like(&p);
        g.tensors[8][0] = 3.0;
        assert_eq!(g.group(ParamGroup::CleanHead), vec![0.0, 0.0, 0.0, 0.0, 3.0]);
        assert_eq!(g.get("head.bias"), Some(&[3.0][..]));
        assert!(g.get("nope").is_none());
    }
}
