//! The joint objective `L = L_base + lambda * L_VPN`.
//!
//! `L_base` is the BCE of the clean head on `f`; `L_VPN` is the Monte Carlo
//! mean over `m` noise draws of the BCE of the noisy head on `f + eps`. Batch
//! losses are means over samples.
//!
//! Two evaluation routes exist: [`total_loss`] records everything on a
//! [`GradTape`] and returns exact gradients, while [`batch_loss_value`]
//! recomputes the same scalar from the plain forward functions and serves as
//! the finite-difference oracle.

use crate::config::RunConfig;
use crate::data::{FeatureRecord, Label};
use crate::encoder::{EncoderVars, TextAnchors};
use crate::error::{Error, Result};
use crate::model::{GradTable, LinearHead, Params};
use crate::noise::{self, BatchContext, NoiseGenParams, NoiseGenVars, NoiseMode};
use crate::numeric::{self, Mat64};
use crate::rng::{StreamId, Streams};
use crate::tape::{GradTape, Var};

/// A training sample widened to 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Label,
}

impl From<&FeatureRecord> for Sample {
    fn from(r: &FeatureRecord) -> Self {
        Self {
            x: r.x_f64(),
            label: r.label,
        }
    }
}

/// Randomness consumed by one sample in one step: the adapter dropout mask
/// and `m` standard-normal vectors for the noise branch.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleDraws {
    pub mask: Option<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
}

/// Settings of the loss that do not live in the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub lambda: f64,
    pub m: usize,
    pub mode: NoiseMode,
}

impl LossSettings {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            lambda: cfg.lambda_vpn,
            m: cfg.m_noise,
            mode: NoiseMode::from_config(cfg)?,
        })
    }
}

/// Draw per-sample masks (dropout stream) and `xi` (xi stream) for a batch.
pub fn draw_batch(
    n: usize,
    params: &Params,
    settings: &LossSettings,
    streams: &mut Streams,
) -> Vec<SampleDraws> {
    let d = params.encoder.feature_dim();
    (0..n)
        .map(|_| {
            let mask = (params.encoder.dropout_rate > 0.0)
                .then(|| params.encoder.draw_mask(streams.get(StreamId::Dropout)));
            let xi = if settings.mode.draws_xi() {
                (0..settings.m)
                    .map(|_| noise::standard_normal_vec(d, streams.get(StreamId::Xi)))
                    .collect()
            } else {
                Vec::new()
            };
            SampleDraws { mask, xi }
        })
        .collect()
}

/// `BCE(h_clean(f), y)`.
pub fn loss_base(f: &[f64], y: Label, head: &LinearHead) -> f64 {
    numeric::bce_with_logit(head.logit(f), y)
}

/// `L_VPN` for one sample with explicit noise draws (`xi.len()` is `m`).
#[allow(clippy::too_many_arguments)]
pub fn loss_vpn_with_xi(
    f: &[f64],
    y: Label,
    t: &[f64],
    theta: &NoiseGenParams,
    head: &LinearHead,
    mode: NoiseMode,
    ctx: &BatchContext,
    xi: &[Vec<f64>],
) -> Result<f64> {
    match noise::noise_distribution(f, t, mode, ctx, theta)? {
        None => Ok(loss_base(f, y, head)),
        Some((mu, var)) => {
            if xi.is_empty() {
                return Err(Error::Usage("loss_vpn needs m >= 1 noise draws".into()));
            }
            let mut total = 0.0;
            for x in xi {
                if x.len() != f.len() {
                    return Err(Error::dim("loss_vpn xi", f.len(), x.len()));
                }
                let ft: Vec<f64> = (0..f.len()).map(|i| f[i] + (mu[i] + var[i] * x[i])).collect();
                total += loss_base(&ft, y, head);
            }
            Ok(total / xi.len() as f64)
        }
    }
}

/// `L_VPN` for one sample, drawing `m` noise vectors from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn loss_vpn(
    f: &[f64],
    y: Label,
    t: &[f64],
    theta: &NoiseGenParams,
    head: &LinearHead,
    mode: NoiseMode,
    ctx: &BatchContext,
    m: usize,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::Usage("m must be >= 1".into()));
    }
    let xi: Vec<Vec<f64>> = if mode.draws_xi() {
        (0..m).map(|_| noise::standard_normal_vec(f.len(), rng)).collect()
    } else {
        Vec::new()
    };
    loss_vpn_with_xi(f, y, t, theta, head, mode, ctx, &xi)
}

/// Loss values and gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: f64,
    pub loss_base: f64,
    pub loss_vpn: f64,
    /// Clean-head predictions matching the label (threshold 0.5, ties fake).
    pub correct: usize,
    pub n: usize,
    pub grads: GradTable,
}

struct Handles {
    encoder: EncoderVars,
    noise: NoiseGenVars,
    head_w: Var,
    head_b: Var,
    noisy_w: Var,
    noisy_b: Var,
    t_real: Var,
    t_fake: Var,
}

impl Handles {
    fn register(tape: &mut GradTape, params: &Params, anchors: &TextAnchors) -> Self {
        Self {
            encoder: EncoderVars::register(tape, &params.encoder),
            noise: NoiseGenVars::register(tape, &params.noise_gen),
            head_w: tape.param_vec(&params.heads.clean.weight),
            head_b: tape.param_scalar(params.heads.clean.bias),
            noisy_w: tape.param_vec(&params.heads.noisy.weight),
            noisy_b: tape.param_scalar(params.heads.noisy.bias),
            t_real: tape.constant_vec(&anchors.real),
            t_fake: tape.constant_vec(&anchors.fake),
        }
    }

    fn anchor(&self, y: Label) -> Var {
        match y {
            Label::Real => self.t_real,
            Label::Fake => self.t_fake,
        }
    }

    fn gradients(&self, g: &crate::tape::Gradients) -> GradTable {
        GradTable {
            tensors: vec![
                g.wrt(self.encoder.lora_b),
                g.wrt(self.encoder.lora_a),
                g.wrt(self.noise.w_q),
                g.wrt(self.noise.w_k),
                g.wrt(self.noise.w_v),
                g.wrt(self.noise.w_mu),
                g.wrt(self.noise.w_var),
                g.wrt(self.head_w),
                g.wrt(self.head_b),
                g.wrt(self.noisy_w),
                g.wrt(self.noisy_b),
            ],
        }
    }
}

fn head_logit(tape: &mut GradTape, w: Var, b: Var, f: Var) -> Result<Var> {
    let z = tape.dot(w, f)?;
    tape.add(z, b)
}

/// Records the noisy branch for one feature node and returns the per-draw
/// BCE nodes. In sample mode the mean comes from `batch_mean` when it is on
/// the tape, otherwise from `ctx` as a constant.
#[allow(clippy::too_many_arguments)]
fn record_noisy_branch(
    tape: &mut GradTape,
    h: &Handles,
    f: Var,
    t: Var,
    y: Label,
    mode: NoiseMode,
    ctx: &BatchContext,
    batch_mean: Option<Var>,
    xi: &[Vec<f64>],
) -> Result<Vec<Var>> {
    let d = tape.shape(f).0;
    let mut out = Vec::new();
    match mode {
        NoiseMode::None => {
            let z = head_logit(tape, h.noisy_w, h.noisy_b, f)?;
            out.push(tape.bce_with_logit(z, y)?);
        }
        NoiseMode::Pin => {
            let (mu, var) = h.noise.gen_params(tape, f, t)?;
            for x in xi {
                let xv = tape.constant_vec(x);
                let spread = tape.mul(var, xv)?;
                let eps = tape.add(mu, spread)?;
                let ft = tape.add(f, eps)?;
                let z = head_logit(tape, h.noisy_w, h.noisy_b, ft)?;
                out.push(tape.bce_with_logit(z, y)?);
            }
        }
        NoiseMode::Sample { beta, sigma } if batch_mean.is_some() => {
            let mu = tape.scale(batch_mean.unwrap(), beta)?;
            for x in xi {
                let spread: Vec<f64> = x.iter().map(|v| sigma * v).collect();
                let sv = tape.constant_vec(&spread);
                let eps = tape.add(mu, sv)?;
                let ft = tape.add(f, eps)?;
                let z = head_logit(tape, h.noisy_w, h.noisy_b, ft)?;
                out.push(tape.bce_with_logit(z, y)?);
            }
        }
        NoiseMode::Random { .. } | NoiseMode::Sample { .. } => {
            let (mu, var) = fixed_distribution(d, mode, ctx)?;
            for x in xi {
                let eps: Vec<f64> = (0..d).map(|i| mu[i] + var[i] * x[i]).collect();
                let ev = tape.constant_vec(&eps);
                let ft = tape.add(f, ev)?;
                let z = head_logit(tape, h.noisy_w, h.noisy_b, ft)?;
                out.push(tape.bce_with_logit(z, y)?);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("noisy branch needs m >= 1 noise draws".into()));
    }
    Ok(out)
}

/// `(mu, var)` for the modes whose noise does not depend on `f` through the
/// tape: random mode, and sample mode with the batch mean taken from `ctx`.
fn fixed_distribution(d: usize, mode: NoiseMode, ctx: &BatchContext) -> Result<(Vec<f64>, Vec<f64>)> {
    match mode {
        NoiseMode::Random { sigma } => Ok((vec![0.0; d], vec![sigma; d])),
        NoiseMode::Sample { beta, sigma } => {
            let mean = ctx
                .feature_mean
                .as_ref()
                .ok_or_else(|| Error::Usage("sample mode needs the batch feature mean".into()))?;
            if mean.len() != d {
                return Err(Error::dim("perturb batch mean", d, mean.len()));
            }
            Ok((mean.iter().map(|m| beta * m).collect(), vec![sigma; d]))
        }
        _ => Err(Error::Usage("mode has no fixed distribution".into())),
    }
}

fn check_batch(batch: &[Sample], draws: &[SampleDraws]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if batch.len() != draws.len() {
        return Err(Error::dim("batch draws", batch.len(), draws.len()));
    }
    Ok(())
}

/// Mean batch loss and its exact gradient with respect to every trainable
/// tensor. Gradients reach `theta` and the adapter through both the direct
/// feature path and the noise's dependence on the feature.
pub fn total_loss(
    params: &Params,
    anchors: &TextAnchors,
    batch: &[Sample],
    draws: &[SampleDraws],
    settings: &LossSettings,
) -> Result<BatchLoss> {
    check_batch(batch, draws)?;
    let n = batch.len();
    let mut tape = GradTape::new();
    let h = Handles::register(&mut tape, params, anchors);

    let mut features = Vec::with_capacity(n);
    for (s, dr) in batch.iter().zip(draws) {
        let x = tape.constant_vec(&s.x);
        let mask = dr.mask.as_ref().map(|m| tape.constant_vec(m));
        features.push(h.encoder.encode(&mut tape, x, mask)?);
    }
    let batch_mean = match settings.mode {
        NoiseMode::Sample { .. } => {
            let mut sum = features[0];
            for f in &features[1..] {
                sum = tape.add(sum, *f)?;
            }
            Some(tape.scale(sum, 1.0 / n as f64)?)
        }
        _ => None,
    };
    let ctx = BatchContext::default();

    let mut terms = Vec::with_capacity(n * (1 + settings.m));
    let (mut base_sum, mut vpn_sum, mut correct) = (0.0, 0.0, 0usize);
    for ((s, dr), &f) in batch.iter().zip(draws).zip(&features) {
        let z = head_logit(&mut tape, h.head_w, h.head_b, f)?;
        if (tape.scalar(z) >= 0.0) == (s.label == Label::Fake) {
            correct += 1;
        }
        let lb = tape.bce_with_logit(z, s.label)?;
        base_sum += tape.scalar(lb);
        terms.push((lb, 1.0 / n as f64));

        let noisy = record_noisy_branch(&mut tape, &h, f, h.anchor(s.label), s.label, settings.mode, &ctx, batch_mean, &dr.xi)?;
        let w = settings.lambda / (n * noisy.len()) as f64;
        let mut vpn = 0.0;
        for l in noisy {
            vpn += tape.scalar(l);
            terms.push((l, w));
        }
        vpn_sum += vpn / dr.xi.len().max(1) as f64;
    }
    let root = tape.weighted_sum(&terms)?;
    let total = tape.scalar(root);
    let grads = tape.backward(root)?;
    Ok(BatchLoss {
        total,
        loss_base: base_sum / n as f64,
        loss_vpn: vpn_sum / n as f64,
        correct,
        n,
        grads: h.gradients(&grads),
    })
}

/// Value-only evaluation of the same batch objective: `(total, base, vpn)`.
pub fn batch_loss_value(
    params: &Params,
    anchors: &TextAnchors,
    batch: &[Sample],
    draws: &[SampleDraws],
    settings: &LossSettings,
) -> Result<(f64, f64, f64)> {
    check_batch(batch, draws)?;
    let features = batch
        .iter()
        .zip(draws)
        .map(|(s, dr)| params.encoder.encode_with_mask(&s.x, dr.mask.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let ctx = match settings.mode {
        NoiseMode::Sample { .. } => BatchContext::from_features(features.iter().map(|f| f.as_slice())),
        _ => BatchContext::default(),
    };
    let (mut base, mut vpn) = (0.0, 0.0);
    for ((s, dr), f) in batch.iter().zip(draws).zip(&features) {
        base += loss_base(f, s.label, &params.heads.clean);
        vpn += loss_vpn_with_xi(
            f,
            s.label,
            anchors.anchor_for(s.label),
            &params.noise_gen,
            &params.heads.noisy,
            settings.mode,
            &ctx,
            &dr.xi,
        )?;
    }
    let n = batch.len() as f64;
    let (base, vpn) = (base / n, vpn / n);
    Ok((base + settings.lambda * vpn, base, vpn))
}

// ---------------------------------------------------------------------------
// Feature-space gradient identities.
// ---------------------------------------------------------------------------

/// Jacobians `d mu / d f` and `d var / d f` (both d x d) of the generator.
///
/// With `c_i = Cov_{P_i}(k, v)` under attention row `i`, `da/df = diag(c) Wq`,
/// so `dmu/df = Wmu^T diag(c) Wq` and
/// `dvar/df = diag(sigmoid(Wvar^T a)) Wvar^T diag(c) Wq`.
pub fn noise_jacobians(f: &[f64], t: &[f64], theta: &NoiseGenParams) -> Result<(Mat64, Mat64)> {
    let att = theta.attention(f, t)?;
    let (h, d) = (theta.hidden_dim(), theta.feature_dim());
    let c: Vec<f64> = (0..h)
        .map(|i| {
            let row = &att.weights[i * h..(i + 1) * h];
            let ek = numeric::dot(row, &att.k);
            let ev = numeric::dot(row, &att.v);
            let ekv: f64 = row.iter().zip(&att.k).zip(&att.v).map(|((p, k), v)| p * k * v).sum();
            ekv - ek * ev
        })
        .collect();
    // da/df, H x d
    let mut da = vec![0.0; h * d];
    for i in 0..h {
        for j in 0..d {
            da[i * d + j] = c[i] * theta.w_q.get(i, j);
        }
    }
    let mut pre = vec![0.0; d];
    numeric::matvec_t(theta.w_var.as_slice(), h, d, &att.a, &mut pre);

    let mut dmu = vec![0.0; d * d];
    let mut dvar = vec![0.0; d * d];
    for r in 0..d {
        let slope = numeric::sigmoid(pre[r]);
        for j in 0..d {
            let mut sm = 0.0;
            let mut sv = 0.0;
            for i in 0..h {
                sm += theta.w_mu.get(i, r) * da[i * d + j];
                sv += theta.w_var.get(i, r) * da[i * d + j];
            }
            dmu[r * d + j] = sm;
            dvar[r * d + j] = slope * sv;
        }
    }
    Ok((Mat64::from_raw(d, d, dmu), Mat64::from_raw(d, d, dvar)))
}

/// Result of comparing the hand-assembled total feature gradient with the
/// tape's end-to-end `dL/df`.
#[derive(Clone, Debug)]
pub struct FeatureGradientReport {
    pub assembled: Vec<f64>,
    pub tape: Vec<f64>,
    pub max_rel_discrepancy: f64,
}

/// `||a - b||_inf / ||b||_inf` (absolute when `b` vanishes).
pub fn max_rel_discrepancy(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Checks `g_final = g_clean + lambda * mean_j[(I + d eps_j/df)^T g_noisy_j]`
/// with `d eps/df = dmu/df + diag(xi) dvar/df`, for one sample `(f, y)` with
/// fixed draws `xi`.
#[allow(clippy::too_many_arguments)]
pub fn feature_gradient_identity(
    f: &[f64],
    y: Label,
    t: &[f64],
    params: &Params,
    lambda: f64,
    mode: NoiseMode,
    ctx: &BatchContext,
    xi: &[Vec<f64>],
) -> Result<FeatureGradientReport> {
    let d = f.len();
    let heads = &params.heads;

    // Tape route.
    let mut tape = GradTape::new();
    let fv = tape.param_vec(f);
    let tv = tape.constant_vec(t);
    let h = Handles {
        encoder: EncoderVars::register(&mut tape, &params.encoder),
        noise: NoiseGenVars::register(&mut tape, &params.noise_gen),
        head_w: tape.param_vec(&heads.clean.weight),
        head_b: tape.param_scalar(heads.clean.bias),
        noisy_w: tape.param_vec(&heads.noisy.weight),
        noisy_b: tape.param_scalar(heads.noisy.bias),
        t_real: tv,
        t_fake: tv,
    };
    let z = head_logit(&mut tape, h.head_w, h.head_b, fv)?;
    let lb = tape.bce_with_logit(z, y)?;
    let noisy = record_noisy_branch(&mut tape, &h, fv, tv, y, mode, ctx, None, xi)?;
    let mut terms = vec![(lb, 1.0)];
    let w = lambda / noisy.len() as f64;
    terms.extend(noisy.iter().map(|l| (*l, w)));
    let root = tape.weighted_sum(&terms)?;
    let g_tape = tape.backward(root)?.wrt(fv);

    // Assembled route.
    let g_clean: Vec<f64> = {
        let r = numeric::sigmoid(heads.clean.logit(f)) - y.target();
        heads.clean.weight.iter().map(|w| r * w).collect()
    };
    let noisy_grad = |ft: &[f64]| -> Vec<f64> {
        let r = numeric::sigmoid(heads.noisy.logit(ft)) - y.target();
        heads.noisy.weight.iter().map(|w| r * w).collect()
    };
    let dist = noise::noise_distribution(f, t, mode, ctx, &params.noise_gen)?;
    let jac = match mode {
        NoiseMode::Pin => Some(noise_jacobians(f, t, &params.noise_gen)?),
        _ => None,
    };
    let mut acc = vec![0.0; d];
    let draws: Vec<Option<&Vec<f64>>> = match &dist {
        None => vec![None],
        Some(_) => xi.iter().map(Some).collect(),
    };
    for x in &draws {
        let ft: Vec<f64> = match (&dist, x) {
            (Some((mu, var)), Some(x)) => (0..d).map(|i| f[i] + (mu[i] + var[i] * x[i])).collect(),
            _ => f.to_vec(),
        };
        let gn = noisy_grad(&ft);
        // (I + J)^T gn
        let mut term = gn.clone();
        if let (Some((dmu, dvar)), Some(x)) = (&jac, x) {
            for r in 0..d {
                let a = gn[r];
                let b = gn[r] * x[r];
                for (j, t) in term.iter_mut().enumerate() {
                    *t += a * dmu.get(r, j) + b * dvar.get(r, j);
                }
            }
        }
        acc.iter_mut().zip(term).for_each(|(a, t)| *a += t);
    }
    let scale = lambda / draws.len() as f64;
    let assembled: Vec<f64> = g_clean.iter().zip(&acc).map(|(c, a)| c + scale * a).collect();
    let max_rel_discrepancy = max_rel_discrepancy(&assembled, &g_tape);
    Ok(FeatureGradientReport {
        assembled,
        tape: g_tape,
        max_rel_discrepancy,
    })
}

/// Comparison of the tape's `dL_VPN/dmu` with the analytic `dl/d f_tilde`.
#[derive(Clone, Debug)]
pub struct MeanAlignmentReport {
    pub grad_mu: Vec<f64>,
    pub grad_f_tilde: Vec<f64>,
    pub max_abs_err: f64,
}

/// Mean-alignment identity for one pin-mode sample and one fixed `xi`.
pub fn mean_alignment(f: &[f64], y: Label, t: &[f64], params: &Params, xi: &[f64]) -> Result<MeanAlignmentReport> {
    let d = f.len();
    if xi.len() != d {
        return Err(Error::dim("mean_alignment xi", d, xi.len()));
    }
    let mut tape = GradTape::new();
    let fv = tape.param_vec(f);
    let tv = tape.constant_vec(t);
    let noise = NoiseGenVars::register(&mut tape, &params.noise_gen);
    let nw = tape.param_vec(&params.heads.noisy.weight);
    let nb = tape.param_scalar(params.heads.noisy.bias);
    let (mu, var) = noise.gen_params(&mut tape, fv, tv)?;
    let xv = tape.constant_vec(xi);
    let spread = tape.mul(var, xv)?;
    let eps = tape.add(mu, spread)?;
    let ft = tape.add(fv, eps)?;
    let f_tilde = tape.value(ft).to_vec();
    let z = head_logit(&mut tape, nw, nb, ft)?;
    let loss = tape.bce_with_logit(z, y)?;
    let grad_mu = tape.backward(loss)?.wrt(mu);

    let r = numeric::sigmoid(params.heads.noisy.logit(&f_tilde)) - y.target();
    let grad_f_tilde: Vec<f64> = params.heads.noisy.weight.iter().map(|w| r * w).collect();
    let max_abs_err = grad_mu
        .iter()
        .zip(&grad_f_tilde)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(MeanAlignmentReport {
        grad_mu,
        grad_f_tilde,
        max_abs_err,
    })
}

/// Monte Carlo loss inflation under zero-mean noise versus the second-order
/// prediction `1/2 sum_i H_ii var_i^2`.
#[derive(Clone, Debug)]
pub struct CurvatureReport {
    pub measured: f64,
    pub predicted: f64,
    pub rel_err: f64,
    pub hessian_diag: Vec<f64>,
    pub draws: usize,
}

const HESSIAN_STEP: f64 = 1e-4;

/// Diagonal of the input Hessian of `BCE(head(f), y)` by second-order
/// central differences.
pub fn hessian_diag_fd(f: &[f64], y: Label, head: &LinearHead) -> Vec<f64> {
    let l0 = loss_base(f, y, head);
    let mut p = f.to_vec();
    (0..f.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + HESSIAN_STEP;
            let up = loss_base(&p, y, head);
            p[i] = orig - HESSIAN_STEP;
            let dn = loss_base(&p, y, head);
            p[i] = orig;
            (up - 2.0 * l0 + dn) / (HESSIAN_STEP * HESSIAN_STEP)
        })
        .collect()
}

/// Full input Hessian of `BCE(head(f), y)` by central differences.
pub fn hessian_fd(f: &[f64], y: Label, head: &LinearHead) -> Mat64 {
    let d = f.len();
    let h = HESSIAN_STEP;
    let mut out = vec![0.0; d * d];
    let mut p = f.to_vec();
    let diag = hessian_diag_fd(f, y, head);
    for i in 0..d {
        out[i * d + i] = diag[i];
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                p[i] += si * h;
                p[j] += sj * h;
                let v = loss_base(&p, y, head);
                p[i] -= si * h;
                p[j] -= sj * h;
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h * h);
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
    Mat64::from_raw(d, d, out)
}

/// Antithetic Monte Carlo estimate of `E[l(f + mu + var*xi)] - l(f)` using
/// `draws` standard-normal vectors, each paired with its negation.
pub fn noisy_loss_inflation(
    f: &[f64],
    y: Label,
    head: &LinearHead,
    mu: &[f64],
    var: &[f64],
    draws: usize,
    rng: &mut impl rand::Rng,
) -> f64 {
    let d = f.len();
    let l0 = loss_base(f, y, head);
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut sum = 0.0;
    for _ in 0..draws {
        let xi = noise::standard_normal_vec(d, rng);
        for i in 0..d {
            plus[i] = f[i] + mu[i] + var[i] * xi[i];
            minus[i] = f[i] + mu[i] - var[i] * xi[i];
        }
        sum += 0.5 * (loss_base(&plus, y, head) + loss_base(&minus, y, head)) - l0;
    }
    sum / draws as f64
}

/// Curvature identity at `mu = 0` with the given per-dimension scale.
pub fn curvature_check(
    f: &[f64],
    y: Label,
    head: &LinearHead,
    var: &[f64],
    draws: usize,
    rng: &mut impl rand::Rng,
) -> CurvatureReport {
    let hessian_diag = hessian_diag_fd(f, y, head);
    let predicted = 0.5 * hessian_diag.iter().zip(var).map(|(h, s)| h * s * s).sum::<f64>();
    let measured = noisy_loss_inflation(f, y, head, &vec![0.0; f.len()], var, draws, rng);
    CurvatureReport {
        measured,
        predicted,
        rel_err: (measured - predicted).abs() / predicted.abs(),
        hessian_diag,
        draws,
    }
}

/// Second-order prediction for `mu != 0`:
/// `grad . mu + 1/2 (mu^T H mu + sum_i H_ii var_i^2)`.
pub fn curvature_check_general(
    f: &[f64],
    y: Label,
    head: &LinearHead,
    mu: &[f64],
    var: &[f64],
    draws: usize,
    rng: &mut impl rand::Rng,
) -> CurvatureReport {
    let d = f.len();
    let hess = hessian_fd(f, y, head);
    let r = numeric::sigmoid(head.logit(f)) - y.target();
    let grad_term: f64 = head.weight.iter().zip(mu).map(|(w, m)| r * w * m).sum();
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += mu[i] * hess.get(i, j) * mu[j];
        }
    }
    let hessian_diag: Vec<f64> = (0..d).map(|i| hess.get(i, i)).collect();
    let trace_term: f64 = hessian_diag.iter().zip(var).map(|(h, s)| h * s * s).sum();
    let predicted = grad_term + 0.5 * (quad + trace_term);
    let measured = noisy_loss_inflation(f, y, head, mu, var, draws, rng);
    CurvatureReport {
        measured,
        predicted,
        rel_err: (measured - predicted).abs() / predicted.abs(),
        hessian_diag,
        draws,
    }
}
