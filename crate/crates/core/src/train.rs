//! Training loop, inference and curve logs.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::data::{Domain, FeatureRecord, FeatureSet};
use crate::encoder::TextAnchors;
use crate::error::{Error, Result};
use crate::model::Params;
use crate::numeric;
use crate::objective::{self, LossSettings, Sample};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{StreamId, Streams};

/// One optimizer step of the curve log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub loss_base: f64,
    pub loss_vpn: f64,
    pub loss_total: f64,
    pub batch_acc: f64,
}

pub const CURVE_HEADER: &str = "step,loss_base,loss_vpn,loss_total,batch_acc";

/// Everything a run carries between steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Config with every data-dependent default resolved.
    pub config: RunConfig,
    pub params: Params,
    pub anchors: TextAnchors,
    pub adam: Adam,
    pub streams: Streams,
    pub curves: Vec<CurveRow>,
}

/// Root mean square of the norms of `features`.
pub fn rms_norm<'a>(features: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in features {
        sum += f.iter().map(|x| x * x).sum::<f64>();
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

impl TrainState {
    /// Seeded initialization. Draw order on the init stream: projection,
    /// adapter `A`, the five generator matrices, then synthetic anchors (drawn
    /// even when the data file supplies its own, which then take precedence).
    ///
    /// Unset `sigma_random` becomes 1% of the RMS norm of the initial training
    /// features; unset `sigma_sample` copies it.
    pub fn init(config: &RunConfig, data: &FeatureSet) -> Result<Self> {
        config.validate()?;
        if data.dim != config.input_dim {
            return Err(Error::Config(format!(
                "input_dim is {} but the data has width {}",
                config.input_dim, data.dim
            )));
        }
        let mut streams = Streams::new(config.seed);
        let params = Params::init(config, streams.get(StreamId::Init))?;
        let mut anchors = TextAnchors::synthetic(config.feature_dim, streams.get(StreamId::Init));
        if let Some(rows) = &data.anchors {
            anchors = TextAnchors::from_rows(rows, config.feature_dim)?;
        }

        let mut config = config.clone();
        if config.sigma_random.is_none() || config.sigma_sample.is_none() {
            let feats: Vec<Vec<f64>> = data
                .domain(Domain::Train)
                .map(|r| params.encoder.encode_with_mask(&r.x_f64(), None).map(|v| v.into_inner()))
                .collect::<Result<_>>()?;
            let sigma = 0.01 * rms_norm(feats.iter().map(|f| f.as_slice()));
            let random = *config.sigma_random.get_or_insert(sigma);
            config.sigma_sample.get_or_insert(random);
        }

        let adam = Adam::new(AdamConfig::from_config(&config), &params);
        Ok(Self {
            config,
            params,
            anchors,
            adam,
            streams,
            curves: Vec::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Runs the configured number of epochs over the training domain,
    /// calling `on_step` after every optimizer step.
    pub fn fit(&mut self, data: &FeatureSet, mut on_step: impl FnMut(&CurveRow)) -> Result<()> {
        let settings = LossSettings::from_config(&self.config)?;
        let train: Vec<Sample> = data.domain(Domain::Train).map(Sample::from).collect();
        if train.is_empty() && self.config.epochs > 0 {
            return Err(Error::Usage("no training records".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        for _ in 0..self.config.epochs {
            order.shuffle(self.streams.get(StreamId::Shuffle));
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
                let draws = objective::draw_batch(batch.len(), &self.params, &settings, &mut self.streams);
                let out = objective::total_loss(&self.params, &self.anchors, &batch, &draws, &settings)?;
                self.adam.step(&mut self.params, &out.grads)?;
                let row = CurveRow {
                    step: self.adam.step,
                    loss_base: out.loss_base,
                    loss_vpn: out.loss_vpn,
                    loss_total: out.total,
                    batch_acc: out.correct as f64 / out.n as f64,
                };
                on_step(&row);
                self.curves.push(row);
            }
        }
        Ok(())
    }

    /// `P(fake | x)` from the clean head on the eval-mode feature. No noise
    /// and no random stream is involved.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let f = self.params.encoder.encode_with_mask(x, None)?;
        Ok(numeric::sigmoid(self.params.heads.clean.logit(&f)))
    }

    /// Clean-head logits for many records, in input order.
    pub fn logits(&self, records: &[&FeatureRecord]) -> Result<Vec<f64>> {
        records
            .par_iter()
            .map(|r| {
                let f = self.params.encoder.encode_with_mask(&r.x_f64(), None)?;
                Ok(self.params.heads.clean.logit(&f))
            })
            .collect()
    }

    pub fn predict_many(&self, records: &[&FeatureRecord]) -> Result<Vec<f64>> {
        Ok(self.logits(records)?.into_iter().map(numeric::sigmoid).collect())
    }
}

/// Initializes and trains for the configured epochs.
pub fn train(data: &FeatureSet, config: &RunConfig) -> Result<TrainState> {
    let mut state = TrainState::init(config, data)?;
    state.fit(data, |_| {})?;
    Ok(state)
}

/// Writes the curve log: a `#` comment line with `comment`, the header, then
/// one row per step with 17 significant digits.
pub fn write_curves_csv(out: &mut impl Write, comment: &str, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(out, "# {comment}")?;
    writeln!(out, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.step, r.loss_base, r.loss_vpn, r.loss_total, r.batch_acc
        )?;
    }
    Ok(())
}

/// Parses a curve log written by [`write_curves_csv`]; comment lines are
/// skipped.
pub fn read_curves_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == CURVE_HEADER => {}
        other => return Err(Error::format(0, format!("bad curve header {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::format(i as u64 + 1, format!("bad curve row {line:?}"));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
            Ok(CurveRow {
                step: cols[0].trim().parse().map_err(|_| bad())?,
                loss_base: num(cols[1])?,
                loss_vpn: num(cols[2])?,
                loss_total: num(cols[3])?,
                batch_acc: num(cols[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ShortcutSpec;

    fn tiny_data() -> FeatureSet {
        ShortcutSpec {
            input_dim: 8,
            n_train: 96,
            n_id: 16,
            n_ood: 16,
            ..Default::default()
        }
        .generate()
        .unwrap()
    }

    fn tiny_config() -> RunConfig {
        RunConfig {
            input_dim: 8,
            feature_dim: 8,
            r_attn: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_init_state() {
        let data = tiny_data();
        let cfg = RunConfig {
            epochs: 0,
            ..tiny_config()
        };
        let s = train(&data, &cfg).unwrap();
        let fresh = TrainState::init(&cfg, &data).unwrap();
        assert_eq!(s.params, fresh.params);
        assert!(s.curves.is_empty());
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn zero_heads_predict_half() {
        let data = tiny_data();
        let s = TrainState::init(&tiny_config(), &data).unwrap();
        let before = s.streams.position(StreamId::Xi);
        for r in data.records.iter().take(5) {
            assert_eq!(s.predict(&r.x_f64()).unwrap(), 0.5);
        }
        assert_eq!(s.streams.position(StreamId::Xi), before);
    }

    #[test]
    fn sigma_resolution_fills_both() {
        let data = tiny_data();
        let s = TrainState::init(&tiny_config(), &data).unwrap();
        let r = s.config.sigma_random.unwrap();
        assert!(r > 0.0);
        assert_eq!(s.config.sigma_sample, Some(r));
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let data = tiny_data();
        let a = train(&data, &tiny_config()).unwrap();
        let b = train(&data, &tiny_config()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.curves.len(), 3);
        assert_eq!(a.curves.last().unwrap().step, 3);
    }

    #[test]
    fn lambda_zero_matches_disabled_branch() {
        let data = tiny_data();
        let pin = RunConfig {
            lambda_vpn: 0.0,
            ..tiny_config()
        };
        let none = RunConfig {
            noise_mode: crate::config::NoiseModeTag::None,
            ..pin.clone()
        };
        let a = train(&data, &pin).unwrap();
        let b = train(&data, &none).unwrap();
        assert_eq!(a.params.encoder, b.params.encoder);
        assert_eq!(a.params.heads.clean, b.params.heads.clean);
        let base_a: Vec<f64> = a.curves.iter().map(|r| r.loss_base).collect();
        let base_b: Vec<f64> = b.curves.iter().map(|r| r.loss_base).collect();
        assert_eq!(base_a, base_b);
    }

    #[test]
    fn curve_csv_round_trip() {
        let rows = vec![CurveRow {
            step: 1,
            loss_base: 0.1f64.exp(),
            loss_vpn: 1.0 / 3.0,
            loss_total: std::f64::consts::PI,
            batch_acc: 0.5,
        }];
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, "config {}", &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# config {}\nstep,loss_base"));
        assert_eq!(read_curves_csv(&text).unwrap(), rows);
    }
}
