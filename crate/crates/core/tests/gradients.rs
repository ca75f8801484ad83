use pin_core::config::{NoiseModeTag, RunConfig};
use pin_core::data::{Domain, Label, ShortcutSpec};
use pin_core::model::ParamGroup;
use pin_core::noise::{self, BatchContext, NoiseMode};
use pin_core::objective::{self, LossSettings, Sample, SampleDraws};
use pin_core::rng::{substream, Streams};
use pin_core::train::TrainState;
use pin_core::verify::{self, finite_difference_gradients, relative_error};

fn small_config(mode: NoiseModeTag) -> RunConfig {
    RunConfig {
        input_dim: 12,
        feature_dim: 8,
        r_attn: 2,
        lora_rank: 3,
        lora_alpha: 3.0,
        noise_mode: mode,
        ..Default::default()
    }
}

fn probe(cfg: &RunConfig, n: usize, seed: u64) -> (TrainState, Vec<Sample>) {
    let data = ShortcutSpec {
        input_dim: cfg.input_dim,
        n_train: n,
        n_id: 0,
        n_ood: 0,
        seed,
        ..Default::default()
    }
    .generate()
    .unwrap();
    let mut state = TrainState::init(cfg, &data).unwrap();
    state.params.jitter(0.2, &mut substream(seed, 50));
    let batch = data.domain(Domain::Train).map(Sample::from).collect();
    (state, batch)
}

fn check_fd(cfg: &RunConfig) {
    let (state, batch) = probe(cfg, 6, 3);
    let settings = LossSettings::from_config(&state.config).unwrap();
    let draws = objective::draw_batch(batch.len(), &state.params, &settings, &mut Streams::new(9));
    let analytic = objective::total_loss(&state.params, &state.anchors, &batch, &draws, &settings).unwrap();
    let value = objective::batch_loss_value(&state.params, &state.anchors, &batch, &draws, &settings).unwrap();
    assert!((analytic.total - value.0).abs() < 1e-13);
    assert!((analytic.loss_base - value.1).abs() < 1e-13);
    assert!((analytic.loss_vpn - value.2).abs() < 1e-13);
    let numeric = finite_difference_gradients(&state.params, &state.anchors, &batch, &draws, &settings, 1e-5).unwrap();
    for g in ParamGroup::ALL {
        let e = relative_error(&analytic.grads.group(g), &numeric.group(g));
        assert!(e <= 1e-6, "{:?} group {} rel err {e}", cfg.noise_mode, g.name());
    }
}

#[test]
fn finite_differences_every_mode() {
    for mode in NoiseModeTag::ALL {
        check_fd(&small_config(mode));
    }
}

#[test]
fn finite_differences_several_draws_no_dropout() {
    check_fd(&RunConfig {
        m_noise: 3,
        dropout_rate: 0.0,
        lambda_vpn: 0.7,
        ..small_config(NoiseModeTag::Pin)
    });
}

#[test]
fn lambda_zero_decouples_noise_branch() {
    let cfg = RunConfig {
        lambda_vpn: 0.0,
        ..small_config(NoiseModeTag::Pin)
    };
    let (state, batch) = probe(&cfg, 5, 1);
    let settings = LossSettings::from_config(&state.config).unwrap();
    let draws = objective::draw_batch(batch.len(), &state.params, &settings, &mut Streams::new(1));
    let out = objective::total_loss(&state.params, &state.anchors, &batch, &draws, &settings).unwrap();
    assert!(out.grads.group(ParamGroup::NoiseGen).iter().all(|g| *g == 0.0));
    assert!(out.grads.group(ParamGroup::NoiseHead).iter().all(|g| *g == 0.0));
    assert!(out.grads.group(ParamGroup::CleanHead).iter().any(|g| *g != 0.0));
}

#[test]
fn one_sample_none_mode_sums_both_heads() {
    let cfg = RunConfig {
        lambda_vpn: 1.0,
        dropout_rate: 0.0,
        ..small_config(NoiseModeTag::None)
    };
    let (state, batch) = probe(&cfg, 1, 2);
    let settings = LossSettings::from_config(&state.config).unwrap();
    let draws = vec![SampleDraws { mask: None, xi: vec![] }];
    let out = objective::total_loss(&state.params, &state.anchors, &batch, &draws, &settings).unwrap();
    let f = state.params.encoder.encode_with_mask(&batch[0].x, None).unwrap();
    let expected = objective::loss_base(&f, batch[0].label, &state.params.heads.clean)
        + objective::loss_base(&f, batch[0].label, &state.params.heads.noisy);
    assert!((out.total - expected).abs() < 1e-15);
}

#[test]
fn loss_examples() {
    let head = pin_core::model::LinearHead::zeros(3);
    assert!((objective::loss_base(&[1.0, -2.0, 3.0], Label::Real, &head) - std::f64::consts::LN_2).abs() < 1e-15);
    let head = pin_core::model::LinearHead {
        weight: pin_core::Vec64::new(vec![1.0, 0.0]).unwrap(),
        bias: 0.0,
    };
    assert!((objective::loss_base(&[2.0, 5.0], Label::Fake, &head) - 0.126928).abs() < 1e-6);
    assert!(objective::loss_base(&[20.0, 0.0], Label::Fake, &head) < 1e-4);
}

#[test]
fn vpn_is_deterministic_and_none_mode_reduces_to_base() {
    let cfg = small_config(NoiseModeTag::Pin);
    let (state, batch) = probe(&cfg, 2, 4);
    let p = &state.params;
    let f = p.encoder.encode_with_mask(&batch[0].x, None).unwrap();
    let t = state.anchors.anchor_for(batch[0].label);
    let ctx = BatchContext::default();
    let run = |seed| {
        objective::loss_vpn(&f, batch[0].label, t, &p.noise_gen, &p.heads.noisy, NoiseMode::Pin, &ctx, 4, &mut substream(seed, 4))
            .unwrap()
    };
    assert_eq!(run(1).to_bits(), run(1).to_bits());
    assert_ne!(run(1), run(2));
    let none = objective::loss_vpn(&f, batch[0].label, t, &p.noise_gen, &p.heads.noisy, NoiseMode::None, &ctx, 1, &mut substream(0, 0))
        .unwrap();
    assert_eq!(none, objective::loss_base(&f, batch[0].label, &p.heads.noisy));
}

#[test]
fn noise_jacobians_match_finite_differences() {
    let cfg = small_config(NoiseModeTag::Pin);
    let (state, batch) = probe(&cfg, 1, 5);
    let theta = &state.params.noise_gen;
    let f = state.params.encoder.encode_with_mask(&batch[0].x, None).unwrap().into_inner();
    let t = &state.anchors.fake;
    let (dmu, dvar) = objective::noise_jacobians(&f, t, theta).unwrap();
    let h = 1e-6;
    let d = f.len();
    for j in 0..d {
        let mut up = f.clone();
        let mut dn = f.clone();
        up[j] += h;
        dn[j] -= h;
        let (mu_u, var_u) = theta.gen_params(&up, t).unwrap();
        let (mu_d, var_d) = theta.gen_params(&dn, t).unwrap();
        for r in 0..d {
            let fd_mu = (mu_u[r] - mu_d[r]) / (2.0 * h);
            let fd_var = (var_u[r] - var_d[r]) / (2.0 * h);
            assert!((fd_mu - dmu.get(r, j)).abs() < 1e-8, "dmu[{r},{j}]");
            assert!((fd_var - dvar.get(r, j)).abs() < 1e-8, "dvar[{r},{j}]");
        }
    }
}

#[test]
fn feature_gradient_identity_cases() {
    let cfg = small_config(NoiseModeTag::Pin);
    let (state, batch) = probe(&cfg, 4, 6);
    let mut rng = substream(6, 9);
    for s in &batch {
        let f = state.params.encoder.encode_with_mask(&s.x, None).unwrap();
        let t = state.anchors.anchor_for(s.label);
        let xi: Vec<Vec<f64>> = (0..2).map(|_| noise::standard_normal_vec(f.len(), &mut rng)).collect();
        let ctx = BatchContext::default();
        let general =
            objective::feature_gradient_identity(&f, s.label, t, &state.params, 0.2, NoiseMode::Pin, &ctx, &xi).unwrap();
        assert!(general.max_rel_discrepancy <= 1e-8);

        let clean_only =
            objective::feature_gradient_identity(&f, s.label, t, &state.params, 0.0, NoiseMode::Pin, &ctx, &xi).unwrap();
        assert!(clean_only.max_rel_discrepancy <= 1e-12);

        let frozen = objective::feature_gradient_identity(
            &f,
            s.label,
            t,
            &state.params,
            0.2,
            NoiseMode::Random { sigma: 0.0 },
            &ctx,
            &xi,
        )
        .unwrap();
        assert!(frozen.max_rel_discrepancy <= 1e-12);
    }
}

#[test]
fn curvature_expansion_with_nonzero_mean() {
    let cfg = small_config(NoiseModeTag::Pin);
    let (state, batch) = probe(&cfg, 1, 7);
    let f = state.params.encoder.encode_with_mask(&batch[0].x, None).unwrap();
    let d = f.len();
    let mut rng = substream(7, 1);
    let mu: Vec<f64> = noise::standard_normal_vec(d, &mut rng).iter().map(|x| 0.01 * x).collect();
    let var = vec![0.02; d];
    let rep = objective::curvature_check_general(&f, batch[0].label, &state.params.heads.noisy, &mu, &var, 100_000, &mut rng);
    assert!(rep.rel_err < 0.05, "{rep:?}");
}

#[test]
fn verification_suite_passes_and_flags_faults() {
    let cfg = small_config(NoiseModeTag::Pin);
    let opts = verify::VerifyOptions {
        batch_size: 8,
        identity_states: 20,
        curvature_draws: 50_000,
        ..Default::default()
    };
    let report = verify::verify_fresh(&cfg, &opts).unwrap();
    assert!(report.all_passed(), "{}", report.to_text());

    let zero = RunConfig {
        lambda_vpn: 0.0,
        ..cfg.clone()
    };
    let report = verify::verify_fresh(&zero, &opts).unwrap();
    assert!(report.get("feature_gradient_identity").unwrap().measured <= 1e-12);

    for group in ParamGroup::ALL {
        let faulty = verify::VerifyOptions {
            fault: Some(verify::Fault::GradientBias { group, bias: 1e-3 }),
            ..opts.clone()
        };
        let report = verify::verify_fresh(&cfg, &faulty).unwrap();
        assert_eq!(report.failed(), vec![format!("gradient/{}", group.name())]);
    }
}
