//! Self-checks of the gradient machinery and of the analytic identities.
//!
//! Every check evaluates at a probe point: the given parameters plus seeded
//! Gaussian jitter, so that zero-initialized tensors (adapter `B`, heads) do
//! not make any gradient trivially zero.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{Domain, ShortcutSpec};
use crate::model::{GradTable, ParamGroup, Params, TRAINABLE};
use crate::noise::{self, BatchContext};
use crate::objective::{self, LossSettings, Sample, SampleDraws};
use crate::rng::{substream, StreamId, Streams};
use crate::train::{self, TrainState};

/// Stream number of the probe generator, outside the four training streams.
const PROBE_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    /// Adds `bias` to every analytic gradient entry of `group` before the
    /// finite-difference comparison.
    GradientBias { group: ParamGroup, bias: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Std of the jitter added to every trainable tensor.
    pub probe_scale: f64,
    pub batch_size: usize,
    pub fd_step: f64,
    pub fd_tolerance: f64,
    pub identity_states: usize,
    pub identity_tolerance: f64,
    pub alignment_tolerance: f64,
    pub curvature_draws: usize,
    pub curvature_tolerance: f64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            probe_scale: 0.1,
            batch_size: 32,
            fd_step: 1e-5,
            fd_tolerance: 1e-6,
            identity_states: 100,
            identity_tolerance: 1e-8,
            alignment_tolerance: 1e-12,
            curvature_draws: 100_000,
            curvature_tolerance: 0.05,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<4} {:<26} error {:.3e}  tolerance {:.1e}",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance
            );
        }
        s
    }
}

/// `||a - n||_inf / max(||a||_inf, ||n||_inf, 1e-8)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// Central finite differences of the batch objective for every trainable
/// scalar, with the draws held fixed.
pub fn finite_difference_gradients(
    params: &Params,
    anchors: &crate::encoder::TextAnchors,
    batch: &[Sample],
    draws: &[SampleDraws],
    settings: &LossSettings,
    h: f64,
) -> crate::Result<GradTable> {
    let sizes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
    let coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    let values = coords
        .par_iter()
        .map_init(
            || params.clone(),
            |p, &(t, i)| {
                let orig = p.trainable()[t][i];
                p.trainable_mut()[t][i] = orig + h;
                let up = objective::batch_loss_value(p, anchors, batch, draws, settings).map(|v| v.0);
                p.trainable_mut()[t][i] = orig - h;
                let dn = objective::batch_loss_value(p, anchors, batch, draws, settings).map(|v| v.0);
                p.trainable_mut()[t][i] = orig;
                Ok((up? - dn?) / (2.0 * h))
            },
        )
        .collect::<crate::Result<Vec<f64>>>()?;
    let mut it = values.into_iter();
    Ok(GradTable {
        tensors: sizes.iter().map(|&n| it.by_ref().take(n).collect()).collect(),
    })
}

fn probe(state: &TrainState, scale: f64, rng: &mut impl Rng) -> Params {
    let mut p = state.params.clone();
    p.jitter(scale, rng);
    p
}

/// Runs every check against `state`, using `batch` as the sample pool.
pub fn verify_all(state: &TrainState, batch: &[Sample], options: &VerifyOptions) -> crate::Result<VerificationReport> {
    if batch.is_empty() {
        return Err(crate::Error::Usage("verification needs at least one sample".into()));
    }
    let cfg = &state.config;
    let settings = LossSettings::from_config(cfg)?;
    let mut rng = substream(cfg.seed, PROBE_STREAM);
    let mut checks = Vec::new();

    // Gradients of the full objective against finite differences.
    let params = probe(state, options.probe_scale, &mut rng);
    let mut streams = Streams::new(cfg.seed);
    let draws = objective::draw_batch(batch.len(), &params, &settings, &mut streams);
    let mut analytic = objective::total_loss(&params, &state.anchors, batch, &draws, &settings)?.grads;
    if let Some(Fault::GradientBias { group, bias }) = options.fault {
        for ((_, g), t) in TRAINABLE.iter().zip(analytic.tensors.iter_mut()) {
            if *g == group {
                t.iter_mut().for_each(|x| *x += bias);
            }
        }
    }
    let numeric = finite_difference_gradients(&params, &state.anchors, batch, &draws, &settings, options.fd_step)?;
    for g in ParamGroup::ALL {
        checks.push(CheckResult::new(
            format!("gradient/{}", g.name()),
            relative_error(&analytic.group(g), &numeric.group(g)),
            options.fd_tolerance,
        ));
    }

    // Total feature-gradient identity over independent probe states.
    let d = cfg.feature_dim;
    let mut worst = 0.0f64;
    for i in 0..options.identity_states {
        let p = probe(state, options.probe_scale, &mut rng);
        let s = &batch[i % batch.len()];
        let feats: Vec<Vec<f64>> = batch
            .iter()
            .map(|b| p.encoder.encode_with_mask(&b.x, None).map(|v| v.into_inner()))
            .collect::<crate::Result<_>>()?;
        let ctx = BatchContext::from_features(feats.iter().map(|f| f.as_slice()));
        let f = &feats[i % batch.len()];
        let xi: Vec<Vec<f64>> = (0..cfg.m_noise).map(|_| noise::standard_normal_vec(d, &mut rng)).collect();
        let rep = objective::feature_gradient_identity(
            f,
            s.label,
            state.anchors.anchor_for(s.label),
            &p,
            cfg.lambda_vpn,
            settings.mode,
            &ctx,
            &xi,
        )?;
        worst = worst.max(rep.max_rel_discrepancy);
    }
    checks.push(CheckResult::new("feature_gradient_identity", worst, options.identity_tolerance));

    // Mean alignment of the generator's mean gradient.
    let p = probe(state, options.probe_scale, &mut rng);
    let mut worst = 0.0f64;
    for s in batch {
        let f = p.encoder.encode_with_mask(&s.x, None)?;
        let xi = noise::standard_normal_vec(d, &mut rng);
        let rep = objective::mean_alignment(&f, s.label, state.anchors.anchor_for(s.label), &p, &xi)?;
        worst = worst.max(rep.max_abs_err);
    }
    checks.push(CheckResult::new("mean_alignment", worst, options.alignment_tolerance));

    // Curvature penalty of zero-mean noise.
    let feats: Vec<Vec<f64>> = batch
        .iter()
        .map(|b| p.encoder.encode_with_mask(&b.x, None).map(|v| v.into_inner()))
        .collect::<crate::Result<_>>()?;
    let c = 1e-2 * train::rms_norm(feats.iter().map(|f| f.as_slice()));
    let rep = objective::curvature_check(
        &feats[0],
        batch[0].label,
        &p.heads.noisy,
        &vec![c; d],
        options.curvature_draws,
        &mut rng,
    );
    checks.push(CheckResult::new("curvature", rep.rel_err, options.curvature_tolerance));

    // Inference must not touch any random stream.
    let before: Vec<u128> = StreamId::ALL.iter().map(|id| state.streams.position(*id)).collect();
    let mut moved = 0.0;
    for s in batch {
        state.predict(&s.x)?;
    }
    for (id, b) in StreamId::ALL.iter().zip(before) {
        if state.streams.position(*id) != b {
            moved += 1.0;
        }
    }
    checks.push(CheckResult::new("stream_audit", moved, 0.0));

    Ok(VerificationReport { checks })
}

/// Verification at a fresh initialization: a small planted-shortcut sample
/// of `options.batch_size` records drawn with the config's seed.
pub fn verify_fresh(config: &RunConfig, options: &VerifyOptions) -> crate::Result<VerificationReport> {
    config.validate()?;
    let spec = ShortcutSpec {
        input_dim: config.input_dim,
        n_train: options.batch_size,
        n_id: 0,
        n_ood: 0,
        seed: config.seed,
        ..Default::default()
    };
    let data = spec.generate()?;
    let state = TrainState::init(config, &data)?;
    let batch: Vec<Sample> = data.domain(Domain::Train).map(Sample::from).collect();
    verify_all(&state, &batch, options)
}

