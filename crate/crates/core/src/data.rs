//! Feature records and the planted-shortcut benchmark.
//!
//! Each sample is `x = alpha_c * y' * u_c + alpha_s * s * u_s + sigma * n`
//! where `y' = +1` for fake and `-1` for real, `u_c` is the causal direction,
//! `u_s` the shortcut direction and `s` the shortcut sign. In the training and
//! in-distribution domains `s = y'` with probability `p_corr_train`; in the
//! OOD domain `s` is either independent of the label or flipped.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    /// `+1` for fake, `-1` for real.
    pub fn sign(self) -> f64 {
        match self {
            Label::Real => -1.0,
            Label::Fake => 1.0,
        }
    }

    /// BCE target, 1 for fake.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Train,
    IdTest,
    OodTest,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Train, Domain::IdTest, Domain::OodTest];

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Domain::Train),
            1 => Some(Domain::IdTest),
            2 => Some(Domain::OodTest),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Domain::Train => 0,
            Domain::IdTest => 1,
            Domain::OodTest => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Train => "train",
            Domain::IdTest => "id_test",
            Domain::OodTest => "ood_test",
        }
    }
}

/// One sample: raw features stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub x: Vec<f32>,
    pub label: Label,
    pub domain: Domain,
}

impl FeatureRecord {
    pub fn x_f64(&self) -> Vec<f64> {
        self.x.iter().map(|&v| v as f64).collect()
    }
}

/// The two label-prompt embeddings carried alongside exported features.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorRows {
    pub real: Vec<f32>,
    pub fake: Vec<f32>,
}

/// A feature file's contents.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
    pub anchors: Option<AnchorRows>,
}

impl FeatureSet {
    pub fn new(dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let set = Self {
            dim,
            records,
            anchors: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.records.iter().position(|r| r.x.len() != self.dim) {
            return Err(Error::dim(
                "FeatureSet",
                format!("D = {} for every record", self.dim),
                format!("record {i} has {}", self.records[i].x.len()),
            ));
        }
        if let Some(a) = &self.anchors {
            if a.real.len() != a.fake.len() {
                return Err(Error::dim("FeatureSet anchors", a.real.len(), a.fake.len()));
            }
        }
        Ok(())
    }

    pub fn domain(&self, domain: Domain) -> impl Iterator<Item = &FeatureRecord> {
        self.records.iter().filter(move |r| r.domain == domain)
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.domain(domain).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodPolicy {
    Uncorrelated,
    Flipped,
}

/// Generator settings for the planted-shortcut benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShortcutSpec {
    #[serde(alias = "D")]
    pub input_dim: usize,
    pub alpha_c: f64,
    pub alpha_s: f64,
    pub sigma: f64,
    pub p_corr_train: f64,
    pub ood_policy: OodPolicy,
    pub n_train: usize,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
}

impl Default for ShortcutSpec {
    fn default() -> Self {
        Self {
            input_dim: 64,
            alpha_c: 1.0,
            alpha_s: 2.0,
            sigma: 1.0,
            p_corr_train: 1.0,
            ood_policy: OodPolicy::Uncorrelated,
            n_train: 20_000,
            n_id: 4_000,
            n_ood: 4_000,
            seed: 0,
        }
    }
}

/// Unit causal and shortcut directions.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutDirections {
    pub causal: Vec<f64>,
    pub shortcut: Vec<f64>,
}

const DIRECTION_STREAM: u64 = 100;
const SAMPLE_STREAM: u64 = 101;

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ShortcutSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim < 2 {
            return bad(format!("input_dim must be >= 2, got {}", self.input_dim));
        }
        for (name, v) in [("alpha_c", self.alpha_c), ("alpha_s", self.alpha_s), ("sigma", self.sigma)] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.alpha_s <= self.alpha_c {
            return bad(format!(
                "alpha_s ({}) must exceed alpha_c ({})",
                self.alpha_s, self.alpha_c
            ));
        }
        if !(0.0..=1.0).contains(&self.p_corr_train) {
            return bad(format!("p_corr_train must lie in [0, 1], got {}", self.p_corr_train));
        }
        Ok(())
    }

    pub fn directions(&self) -> ShortcutDirections {
        let mut rng = substream(self.seed, DIRECTION_STREAM);
        let d = self.input_dim;
        let mut causal: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut shortcut: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut causal);
        // Two Gram-Schmidt passes keep the residual overlap at rounding level.
        for _ in 0..2 {
            let p = dot(&causal, &shortcut);
            shortcut.iter_mut().zip(&causal).for_each(|(s, c)| *s -= p * c);
            normalize(&mut shortcut);
        }
        ShortcutDirections { causal, shortcut }
    }

    /// Accuracy of the Bayes classifier that sees only the causal direction.
    pub fn bayes_causal_accuracy(&self) -> f64 {
        Normal::standard().cdf(self.alpha_c / self.sigma)
    }

    fn corr_probability(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Train | Domain::IdTest => self.p_corr_train,
            Domain::OodTest => match self.ood_policy {
                OodPolicy::Uncorrelated => 0.5,
                OodPolicy::Flipped => 0.0,
            },
        }
    }

    /// Exact `log p(fake|x) - log p(real|x)` for a sample of `domain`.
    pub fn true_log_odds(&self, dirs: &ShortcutDirections, x: &[f64], domain: Domain) -> Result<f64> {
        if self.sigma <= 0.0 {
            return Err(Error::Config("true posterior needs sigma > 0".into()));
        }
        if x.len() != self.input_dim {
            return Err(Error::dim("true_log_odds", self.input_dim, x.len()));
        }
        let var = self.sigma * self.sigma;
        let c = dot(x, &dirs.causal);
        let t = self.alpha_s * dot(x, &dirs.shortcut) / var;
        let p = self.corr_probability(domain);
        let ln = |w: f64| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
        let lse = |a: f64, b: f64| {
            let m = a.max(b);
            if m == f64::NEG_INFINITY {
                m
            } else {
                m + ((a - m).exp() + (b - m).exp()).ln()
            }
        };
        let fake = lse(ln(p) + t, ln(1.0 - p) - t);
        let real = lse(ln(p) - t, ln(1.0 - p) + t);
        Ok(2.0 * self.alpha_c * c / var + fake - real)
    }

    /// Generate train, in-distribution and OOD records, in that order.
    pub fn generate(&self) -> Result<FeatureSet> {
        self.validate()?;
        let dirs = self.directions();
        let mut rng = substream(self.seed, SAMPLE_STREAM);
        let mut records = Vec::with_capacity(self.n_train + self.n_id + self.n_ood);
        let plan = [
            (Domain::Train, self.n_train),
            (Domain::IdTest, self.n_id),
            (Domain::OodTest, self.n_ood),
        ];
        for (domain, n) in plan {
            let p = self.corr_probability(domain);
            for _ in 0..n {
                let label = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
                let y = label.sign();
                let s = if rng.random_bool(p) { y } else { -y };
                let x = (0..self.input_dim)
                    .map(|i| {
                        let n: f64 = rng.sample(StandardNormal);
                        let v = self.alpha_c * y * dirs.causal[i]
                            + self.alpha_s * s * dirs.shortcut[i]
                            + self.sigma * n;
                        v as f32
                    })
                    .collect();
                records.push(FeatureRecord { x, label, domain });
            }
        }
        FeatureSet::new(self.input_dim, records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ShortcutSpec {
        ShortcutSpec {
            n_train: 10_000,
            n_id: 2_000,
            n_ood: 10_000,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn directions_orthonormal() {
        for seed in 0..20 {
            let d = small(seed).directions();
            assert!((dot(&d.causal, &d.causal) - 1.0).abs() <= 1e-12);
            assert!((dot(&d.shortcut, &d.shortcut) - 1.0).abs() <= 1e-12);
            assert!(dot(&d.causal, &d.shortcut).abs() <= 1e-12);
        }
    }

    #[test]
    fn noiseless_construction() {
        let spec = ShortcutSpec {
            sigma: 0.0,
            n_train: 50,
            n_id: 0,
            n_ood: 0,
            ..Default::default()
        };
        let d = spec.directions();
        let set = spec.generate().unwrap();
        let r = set.records.iter().find(|r| r.label == Label::Fake).unwrap();
        for i in 0..spec.input_dim {
            let want = (d.causal[i] * spec.alpha_c + d.shortcut[i] * spec.alpha_s) as f32;
            assert_eq!(r.x[i], want);
        }
    }

    #[test]
    fn label_balance_and_shortcut_correlation() {
        let spec = ShortcutSpec {
            p_corr_train: 0.8,
            ..small(3)
        };
        let dirs = spec.directions();
        let set = spec.generate().unwrap();
        for domain in Domain::ALL {
            let recs: Vec<_> = set.domain(domain).collect();
            let n = recs.len() as f64;
            let fakes = recs.iter().filter(|r| r.label == Label::Fake).count() as f64;
            assert!((fakes / n - 0.5).abs() <= 3.0 * n.sqrt() / (2.0 * n), "{domain:?}");

            let agree: f64 = recs
                .iter()
                .map(|r| {
                    let s = dot(&r.x_f64(), &dirs.shortcut).signum();
                    s * r.label.sign()
                })
                .sum::<f64>()
                / n;
            // E[sign<x,u_s> y'] = (2p - 1)(2 Phi(alpha_s / sigma) - 1)
            let p = spec.corr_probability(domain);
            let phi = Normal::standard().cdf(spec.alpha_s / spec.sigma);
            let expected = (2.0 * p - 1.0) * (2.0 * phi - 1.0);
            let se = (1.0 - expected * expected).sqrt() / n.sqrt();
            assert!((agree - expected).abs() <= 3.0 * se, "{domain:?}: {agree} vs {expected}");
        }
    }

    #[test]
    fn probes_match_closed_forms() {
        let spec = small(5);
        let dirs = spec.directions();
        let set = spec.generate().unwrap();
        let acc = |domain: Domain, dir: &[f64]| {
            let recs: Vec<_> = set.domain(domain).collect();
            recs.iter()
                .filter(|r| (dot(&r.x_f64(), dir) >= 0.0) == (r.label == Label::Fake))
                .count() as f64
                / recs.len() as f64
        };
        // Causal probe on OOD: Phi(1) = 0.8413.
        let bayes = spec.bayes_causal_accuracy();
        assert!((bayes - 0.841345).abs() < 1e-6);
        assert!((acc(Domain::OodTest, &dirs.causal) - bayes).abs() <= 0.01);
        // Shortcut probe: Phi(2) = 0.9772 on train, chance on uncorrelated OOD.
        assert!((acc(Domain::Train, &dirs.shortcut) - 0.97725).abs() <= 0.01);
        assert!((acc(Domain::OodTest, &dirs.shortcut) - 0.5).abs() <= 0.02);
    }

    #[test]
    fn true_posterior_special_cases() {
        let spec = ShortcutSpec::default();
        let dirs = spec.directions();
        let x: Vec<f64> = dirs
            .causal
            .iter()
            .zip(&dirs.shortcut)
            .map(|(c, s)| 0.3 * c - 0.7 * s)
            .collect();
        // p = 1: log-odds = 2 <x, alpha_c u_c + alpha_s u_s> / sigma^2
        let lo = spec.true_log_odds(&dirs, &x, Domain::Train).unwrap();
        assert!((lo - 2.0 * (0.3 - 2.0 * 0.7)).abs() < 1e-12);
        // Uncorrelated OOD: the shortcut term cancels.
        let lo = spec.true_log_odds(&dirs, &x, Domain::OodTest).unwrap();
        assert!((lo - 0.6).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = ShortcutSpec {
            alpha_s: 0.5,
            ..Default::default()
        };
        assert!(matches!(s.generate(), Err(Error::Config(_))));
        let s = ShortcutSpec {
            p_corr_train: 1.5,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = small(9).generate().unwrap();
        let b = small(9).generate().unwrap();
        assert_eq!(a, b);
    }
}
