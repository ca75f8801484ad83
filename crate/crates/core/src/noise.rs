//! Conditional Gaussian noise generation and feature perturbation.
//!
//! In `pin` mode a single-token cross-attention block maps the visual
//! feature `f` and the label anchor `t` to per-dimension Gaussian parameters:
//!
//! ```text
//! q = Wq f,  k = Wk t,  v = Wv t,  a = softmax_rows(q k^T) v
//! mu = Wmu^T a,  var = softplus(Wvar^T a)
//! eps = mu + var * xi,  xi ~ N(0, I)
//! ```
//!
//! All five weight matrices are stored H x d; the two output projections use
//! the transpose.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{NoiseModeTag, RunConfig};
use crate::encoder::gaussian_matrix;
use crate::error::{Error, Result};
use crate::numeric::{self, Mat64, Vec64};
use crate::tape::{GradTape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGenParams {
    pub w_q: Mat64,
    pub w_k: Mat64,
    pub w_v: Mat64,
    pub w_mu: Mat64,
    pub w_var: Mat64,
}

impl NoiseGenParams {
    pub fn init(feature_dim: usize, r_attn: usize, rng: &mut impl Rng) -> Result<Self> {
        if r_attn == 0 || !feature_dim.is_multiple_of(r_attn) {
            return Err(Error::Config(format!("r_attn ({r_attn}) must divide d ({feature_dim})")));
        }
        let h = feature_dim / r_attn;
        let std = 1.0 / (feature_dim as f64).sqrt();
        let mut m = || gaussian_matrix(h, feature_dim, std, rng);
        Ok(Self {
            w_q: m(),
            w_k: m(),
            w_v: m(),
            w_mu: m(),
            w_var: m(),
        })
    }

    pub fn zeros(hidden: usize, feature_dim: usize) -> Self {
        let z = || Mat64::zeros(hidden, feature_dim);
        Self {
            w_q: z(),
            w_k: z(),
            w_v: z(),
            w_mu: z(),
            w_var: z(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// Attention output plus the intermediates needed by Jacobian code.
    pub(crate) fn attention(&self, f: &[f64], t: &[f64]) -> Result<Attention> {
        let (h, d) = (self.hidden_dim(), self.feature_dim());
        if f.len() != d || t.len() != d {
            return Err(Error::dim("gen_params", d, format!("f={}, t={}", f.len(), t.len())));
        }
        let mut q = vec![0.0; h];
        let mut k = vec![0.0; h];
        let mut v = vec![0.0; h];
        numeric::matvec(self.w_q.as_slice(), h, d, f, &mut q);
        numeric::matvec(self.w_k.as_slice(), h, d, t, &mut k);
        numeric::matvec(self.w_v.as_slice(), h, d, t, &mut v);
        let weights = numeric::outer_softmax_weights(&q, &k);
        let a = numeric::attend_with(&weights, &v);
        Ok(Attention { k, v, weights, a })
    }

    /// Gaussian mean and per-dimension scale for the pair `(f, t)`.
    pub fn gen_params(&self, f: &[f64], t: &[f64]) -> Result<(Vec64, Vec64)> {
        let att = self.attention(f, t)?;
        Ok(self.heads_from_attention(&att.a))
    }

    pub(crate) fn heads_from_attention(&self, a: &[f64]) -> (Vec64, Vec64) {
        let (h, d) = (self.hidden_dim(), self.feature_dim());
        let mut mu = vec![0.0; d];
        let mut pre = vec![0.0; d];
        numeric::matvec_t(self.w_mu.as_slice(), h, d, a, &mut mu);
        numeric::matvec_t(self.w_var.as_slice(), h, d, a, &mut pre);
        let var = pre.into_iter().map(numeric::softplus_scalar).collect();
        (Vec64::from_raw(mu), Vec64::from_raw(var))
    }
}

pub(crate) struct Attention {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub weights: Vec<f64>,
    pub a: Vec<f64>,
}

/// A reparameterized Gaussian draw. `eps == mu + var * xi` holds exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNoise {
    pub mu: Vec64,
    pub var: Vec64,
    pub eps: Vec64,
    pub xi: Vec64,
}

impl GaussianNoise {
    pub fn from_xi(mu: Vec64, var: Vec64, xi: Vec64) -> Result<Self> {
        if mu.len() != var.len() || var.len() != xi.len() {
            return Err(Error::dim("GaussianNoise", mu.len(), format!("var={}, xi={}", var.len(), xi.len())));
        }
        if var.iter().any(|v| *v < 0.0) {
            return Err(Error::Usage("noise scale must be non-negative".into()));
        }
        let eps = mu.iter().zip(var.iter()).zip(xi.iter()).map(|((m, s), x)| m + s * x).collect();
        Ok(Self {
            mu,
            var,
            eps: Vec64::from_raw(eps),
            xi,
        })
    }
}

pub fn standard_normal_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Draw `xi ~ N(0, I)` from `rng` and reparameterize.
pub fn sample_noise(mu: Vec64, var: Vec64, rng: &mut impl Rng) -> Result<GaussianNoise> {
    let xi = Vec64::from_raw(standard_normal_vec(mu.len(), rng));
    GaussianNoise::from_xi(mu, var, xi)
}

/// Resolved perturbation rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseMode {
    Pin,
    Random { sigma: f64 },
    Sample { beta: f64, sigma: f64 },
    None,
}

impl NoiseMode {
    /// Resolve the configured mode. Unset scales must already be resolved.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("{name} is unresolved; train() fills it from the data")))
        };
        Ok(match cfg.noise_mode {
            NoiseModeTag::Pin => NoiseMode::Pin,
            NoiseModeTag::Random => NoiseMode::Random {
                sigma: need(cfg.sigma_random, "sigma_random")?,
            },
            NoiseModeTag::Sample => NoiseMode::Sample {
                beta: cfg.beta_sample,
                sigma: need(cfg.sigma_sample, "sigma_sample")?,
            },
            NoiseModeTag::None => NoiseMode::None,
        })
    }

    pub fn draws_xi(&self) -> bool {
        !matches!(self, NoiseMode::None)
    }
}

/// Per-batch statistics some modes need.
#[derive(Clone, Debug, Default)]
pub struct BatchContext {
    pub feature_mean: Option<Vec<f64>>,
}

impl BatchContext {
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut sum: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for f in features {
            if sum.is_empty() {
                sum = vec![0.0; f.len()];
            }
            sum.iter_mut().zip(f).for_each(|(s, x)| *s += x);
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        sum.iter_mut().for_each(|s| *s /= n as f64);
        Self {
            feature_mean: Some(sum),
        }
    }
}

/// Mean and scale of the noise distribution for one feature.
pub fn noise_distribution(
    f: &[f64],
    t: &[f64],
    mode: NoiseMode,
    ctx: &BatchContext,
    theta: &NoiseGenParams,
) -> Result<Option<(Vec64, Vec64)>> {
    let d = f.len();
    Ok(match mode {
        NoiseMode::None => None,
        NoiseMode::Pin => Some(theta.gen_params(f, t)?),
        NoiseMode::Random { sigma } => Some((Vec64::zeros(d), Vec64::filled(d, sigma))),
        NoiseMode::Sample { beta, sigma } => {
            let mean = ctx
                .feature_mean
                .as_ref()
                .ok_or_else(|| Error::Usage("sample mode needs the batch feature mean".into()))?;
            if mean.len() != d {
                return Err(Error::dim("perturb batch mean", d, mean.len()));
            }
            let mu = mean.iter().map(|m| beta * m).collect();
            Some((Vec64::from_raw(mu), Vec64::filled(d, sigma)))
        }
    })
}

/// `f_tilde = f + eps` under `mode`; `None` mode returns `f` unchanged.
pub fn perturb(
    f: &Vec64,
    t: &Vec64,
    mode: NoiseMode,
    ctx: &BatchContext,
    theta: &NoiseGenParams,
    rng: &mut impl Rng,
) -> Result<(Vec64, Option<GaussianNoise>)> {
    match noise_distribution(f, t, mode, ctx, theta)? {
        None => Ok((f.clone(), None)),
        Some((mu, var)) => {
            let noise = sample_noise(mu, var, rng)?;
            let ft = f.iter().zip(noise.eps.iter()).map(|(a, b)| a + b).collect();
            Ok((Vec64::from_raw(ft), Some(noise)))
        }
    }
}

/// Tape handles for the generator weights.
#[derive(Clone, Copy, Debug)]
pub struct NoiseGenVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_mu: Var,
    pub w_var: Var,
}

impl NoiseGenVars {
    pub fn register(tape: &mut GradTape, p: &NoiseGenParams) -> Self {
        Self {
            w_q: tape.param_mat(&p.w_q),
            w_k: tape.param_mat(&p.w_k),
            w_v: tape.param_mat(&p.w_v),
            w_mu: tape.param_mat(&p.w_mu),
            w_var: tape.param_mat(&p.w_var),
        }
    }

    /// Records `(mu, var)` for `(f, t)` on the tape.
    pub fn gen_params(&self, tape: &mut GradTape, f: Var, t: Var) -> Result<(Var, Var)> {
        let q = tape.affine(self.w_q, f)?;
        let k = tape.affine(self.w_k, t)?;
        let v = tape.affine(self.w_v, t)?;
        let a = tape.attend(q, k, v)?;
        let mu = tape.affine_t(self.w_mu, a)?;
        let pre = tape.affine_t(self.w_var, a)?;
        let var = tape.softplus(pre)?;
        Ok((mu, var))
    }
}
