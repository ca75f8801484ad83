//! Metrics, per-domain reports and the noise-mode ablation.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::{NoiseModeTag, RunConfig};
use crate::data::{Domain, FeatureRecord, FeatureSet, Label, ShortcutSpec};
use crate::error::{Error, Result};
use crate::numeric;
use crate::train::{self, TrainState};

/// Fraction of predictions on the right side of 0.5. A probability of
/// exactly 0.5 counts as fake.
pub fn accuracy(probs: &[f64], labels: &[Label]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dim("accuracy", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y == Label::Fake))
        .count();
    Ok(hits as f64 / probs.len() as f64)
}

/// Non-interpolated average precision with fake as the positive class.
/// Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("average_precision", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|y| **y == Label::Fake).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("average precision without positives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == Label::Fake {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Metrics for one domain. Metrics are `None` when undefined (no samples,
/// or no positives for AP).
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMetrics {
    pub domain: Domain,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub average_precision: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fingerprint: String,
    pub seed: u64,
    pub domains: Vec<DomainMetrics>,
}

impl EvalReport {
    pub fn domain(&self, d: Domain) -> &DomainMetrics {
        self.domains.iter().find(|m| m.domain == d).expect("all domains reported")
    }

    pub fn to_csv(&self, comment: &str) -> String {
        let mut s = format!("# {comment}\ndomain,n,accuracy,average_precision,fingerprint,seed\n");
        for m in &self.domains {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.domain.name(),
                m.n,
                fmt_opt(m.accuracy),
                fmt_opt(m.average_precision),
                self.fingerprint,
                self.seed
            );
        }
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = format!("config {}  seed {}\n", self.fingerprint, self.seed);
        let _ = writeln!(s, "{:<10} {:>7} {:>9} {:>9}", "domain", "n", "acc", "ap");
        for m in &self.domains {
            let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
            let _ = writeln!(
                s,
                "{:<10} {:>7} {:>9} {:>9}",
                m.domain.name(),
                m.n,
                pct(m.accuracy),
                pct(m.average_precision)
            );
        }
        s
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.16e}"))
}

fn records_of(data: &FeatureSet, d: Domain) -> Vec<&FeatureRecord> {
    data.domain(d).collect()
}

/// Clean-head metrics on every domain of `data`.
pub fn evaluate(state: &TrainState, data: &FeatureSet) -> Result<EvalReport> {
    let mut domains = Vec::new();
    for d in Domain::ALL {
        let recs = records_of(data, d);
        let labels: Vec<Label> = recs.iter().map(|r| r.label).collect();
        let probs = state.predict_many(&recs)?;
        domains.push(DomainMetrics {
            domain: d,
            n: recs.len(),
            accuracy: accuracy(&probs, &labels).ok(),
            average_precision: average_precision(&probs, &labels).ok(),
        });
    }
    Ok(EvalReport {
        fingerprint: state.config.fingerprint(),
        seed: state.config.seed,
        domains,
    })
}

/// Model cross-entropy against the entropy of the exact posterior on one
/// domain of the planted-shortcut benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsCheck {
    pub domain: Domain,
    pub n: usize,
    /// Mean `-log q(y|x)` under the clean head.
    pub cross_entropy: f64,
    /// Mean `-log p(y|x)` under the true posterior.
    pub posterior_entropy: f64,
    /// Standard error of `posterior_entropy`.
    pub std_err: f64,
}

impl GibbsCheck {
    /// `cross_entropy >= posterior_entropy - 3 * std_err`.
    pub fn holds(&self) -> bool {
        self.cross_entropy >= self.posterior_entropy - 3.0 * self.std_err
    }
}

/// Gibbs-inequality sanity check per non-empty domain. `spec` must be the
/// generator that produced `data`.
pub fn gibbs_check(state: &TrainState, data: &FeatureSet, spec: &ShortcutSpec) -> Result<Vec<GibbsCheck>> {
    let dirs = spec.directions();
    let mut out = Vec::new();
    for d in Domain::ALL {
        let recs = records_of(data, d);
        if recs.is_empty() {
            continue;
        }
        let logits = state.logits(&recs)?;
        let n = recs.len() as f64;
        let mut ce = 0.0;
        let mut true_nll = Vec::with_capacity(recs.len());
        for (r, z) in recs.iter().zip(&logits) {
            ce += numeric::bce_with_logit(*z, r.label);
            let t = spec.true_log_odds(&dirs, &r.x_f64(), d)?;
            true_nll.push(numeric::bce_with_logit(t, r.label));
        }
        let mean = true_nll.iter().sum::<f64>() / n;
        let var = if recs.len() > 1 {
            true_nll.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        out.push(GibbsCheck {
            domain: d,
            n: recs.len(),
            cross_entropy: ce / n,
            posterior_entropy: mean,
            std_err: (var / n).sqrt(),
        });
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One trained model of an ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub mode: NoiseModeTag,
    pub seed: u64,
    pub state: TrainState,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub mode: NoiseModeTag,
    pub seeds: Vec<u64>,
    pub ood_accuracy: Vec<f64>,
    pub ood_average_precision: Vec<f64>,
    pub median_accuracy: f64,
    pub median_average_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: NoiseModeTag) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_csv(&self, comment: &str) -> String {
        let mut s = format!("# {comment}\nmode,seed,ood_accuracy,ood_average_precision\n");
        for r in &self.rows {
            for ((seed, a), p) in r.seeds.iter().zip(&r.ood_accuracy).zip(&r.ood_average_precision) {
                let _ = writeln!(s, "{},{},{:.16e},{:.16e}", r.mode.name(), seed, a, p);
            }
            let _ = writeln!(
                s,
                "{},median,{:.16e},{:.16e}",
                r.mode.name(),
                r.median_accuracy,
                r.median_average_precision
            );
        }
        s
    }

    pub fn pretty(&self) -> String {
        let mut s = format!("{:<8} {:>12} {:>12}\n", "mode", "ood acc", "ood ap");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>12.2} {:>12.2}",
                r.mode.name(),
                100.0 * r.median_accuracy,
                100.0 * r.median_average_precision
            );
        }
        s
    }
}

/// Trains one model per `(mode, seed)` in parallel. Runs sharing a seed see
/// the same data order. Results come back in `modes x seeds` order.
pub fn ablation_runs(
    data: &FeatureSet,
    base: &RunConfig,
    modes: &[NoiseModeTag],
    seeds: &[u64],
) -> Result<Vec<AblationRun>> {
    let jobs: Vec<(NoiseModeTag, u64)> = modes
        .iter()
        .flat_map(|m| seeds.iter().map(move |s| (*m, *s)))
        .collect();
    jobs.par_iter()
        .map(|&(mode, seed)| {
            let cfg = RunConfig {
                noise_mode: mode,
                seed,
                ..base.clone()
            };
            let state = train::train(data, &cfg)?;
            let report = evaluate(&state, data)?;
            Ok(AblationRun {
                mode,
                seed,
                state,
                report,
            })
        })
        .collect()
}

/// Summarizes ablation runs into per-mode medians of OOD accuracy and AP.
pub fn summarize(runs: &[AblationRun], modes: &[NoiseModeTag]) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &mode in modes {
        let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
        let metric = |f: fn(&DomainMetrics) -> Option<f64>, what: &str| -> Result<Vec<f64>> {
            mine.iter()
                .map(|r| {
                    f(r.report.domain(Domain::OodTest))
                        .ok_or_else(|| Error::UndefinedMetric(format!("OOD {what} for mode {}", mode.name())))
                })
                .collect()
        };
        let acc = metric(|m| m.accuracy, "accuracy")?;
        let ap = metric(|m| m.average_precision, "average precision")?;
        rows.push(AblationRow {
            mode,
            seeds: mine.iter().map(|r| r.seed).collect(),
            median_accuracy: median(&acc),
            median_average_precision: median(&ap),
            ood_accuracy: acc,
            ood_average_precision: ap,
        });
    }
    Ok(AblationTable { rows })
}

/// Trains every `(mode, seed)` pair and reports per-mode median OOD metrics.
pub fn run_ablation(
    data: &FeatureSet,
    base: &RunConfig,
    modes: &[NoiseModeTag],
    seeds: &[u64],
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(Error::Usage(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let runs = ablation_runs(data, base, modes, seeds)?;
    summarize(&runs, modes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake as F, Real as R};

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[F, R]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.5], &[F]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.6, 0.6, 0.4, 0.4], &[F, R, F, R]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn average_precision_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[F, F, R]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[F, R, F]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.3], &[F, R]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.3, 0.3], &[R, F]).unwrap(), 0.5);
        assert!(matches!(
            average_precision(&[0.3], &[R]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
