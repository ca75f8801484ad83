use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which perturbation feeds the noisy head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModeTag {
    /// Conditional cross-attention Gaussian.
    Pin,
    /// Isotropic zero-mean Gaussian.
    Random,
    /// Gaussian centred on the scaled batch feature mean.
    Sample,
    /// No perturbation.
    None,
}

impl NoiseModeTag {
    pub const ALL: [NoiseModeTag; 4] = [
        NoiseModeTag::None,
        NoiseModeTag::Random,
        NoiseModeTag::Sample,
        NoiseModeTag::Pin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseModeTag::Pin => "pin",
            NoiseModeTag::Random => "random",
            NoiseModeTag::Sample => "sample",
            NoiseModeTag::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Every hyperparameter of a training run.
///
/// Missing JSON fields take the defaults below. `sigma_random` and
/// `sigma_sample` left unset are resolved from the training features when a
/// run starts; the resolved values are written back into the run's config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub lambda_vpn: f64,
    pub m_noise: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    #[serde(alias = "D")]
    pub input_dim: usize,
    #[serde(alias = "d")]
    pub feature_dim: usize,
    pub r_attn: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout_rate: f64,
    pub noise_mode: NoiseModeTag,
    pub sigma_random: Option<f64>,
    pub beta_sample: f64,
    pub sigma_sample: Option<f64>,
    pub seed: u64,
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda_vpn: 0.2,
            m_noise: 1,
            batch_size: 32,
            epochs: 1,
            learning_rate: DEFAULT_LEARNING_RATE,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            input_dim: 64,
            feature_dim: 32,
            r_attn: 4,
            lora_rank: 6,
            lora_alpha: 6.0,
            dropout_rate: 0.8,
            noise_mode: NoiseModeTag::Pin,
            sigma_random: None,
            beta_sample: 1.0,
            sigma_sample: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hidden_dim(&self) -> usize {
        self.feature_dim / self.r_attn
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.lambda_vpn.is_finite() || self.lambda_vpn < 0.0 {
            return bad(format!("lambda_vpn must be finite and >= 0, got {}", self.lambda_vpn));
        }
        for (name, v) in [
            ("m_noise", self.m_noise),
            ("batch_size", self.batch_size),
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("r_attn", self.r_attn),
            ("lora_rank", self.lora_rank),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.feature_dim.is_multiple_of(self.r_attn) {
            return bad(format!(
                "r_attn ({}) must divide feature_dim ({})",
                self.r_attn, self.feature_dim
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return bad(format!("lora_alpha must be positive, got {}", self.lora_alpha));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        for (name, v) in [("sigma_random", self.sigma_random), ("sigma_sample", self.sigma_sample)] {
            if let Some(s) = v {
                if !s.is_finite() || s < 0.0 {
                    return bad(format!("{name} must be finite and >= 0, got {s}"));
                }
            }
        }
        if !self.beta_sample.is_finite() {
            return bad("beta_sample must be finite".into());
        }
        Ok(())
    }

    /// Short hex digest of the serialized config.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = RunConfig::from_json(r#"{"lambda_vpn": 0.5}"#).unwrap();
        assert_eq!(cfg.lambda_vpn, 0.5);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.lora_rank, 6);
        assert_eq!(cfg.noise_mode, NoiseModeTag::Pin);
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        assert!(RunConfig::from_json(r#"{"lamda": 0.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lambda_vpn": -1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"feature_dim": 30, "r_attn": 4}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dropout_rate": 1.0}"#).is_err());
    }

    #[test]
    fn json_round_trip_and_fingerprint() {
        let cfg = RunConfig {
            sigma_random: Some(0.25),
            ..Default::default()
        };
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_ne!(RunConfig::default().fingerprint(), cfg.fingerprint());
    }
}
