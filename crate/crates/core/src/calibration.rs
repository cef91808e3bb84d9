//! Simulation-based constraint tightening: run the two-layer scheme with a
//! given back-off, record the worst violations of the original constraints,
//! and turn them into a new back-off.

use serde::{Deserialize, Serialize};

use crate::closed_loop::{grid_episodes, run_episodes, DisturbanceLaw, EpisodeOutcome, EpisodeSpec, GridSpec, PlantSim, Scheme};
use crate::error::{check_dim, Error, Result};
use crate::model::{UncertaintyDecl, UncertaintyKind};
use crate::scenario_tree::sample_box_values;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    #[serde(default = "unit")]
    pub safety_factor: f64,
    /// Back-offs are rounded up to a multiple of this.
    #[serde(default = "precision")]
    pub precision: f64,
    /// Upper limit on calibrate-and-rerun rounds.
    #[serde(default = "rounds")]
    pub max_rounds: usize,
    /// Random additive sequences per vertex on top of the constant extremes.
    #[serde(default = "random_seeds")]
    pub random_seeds: usize,
}

fn unit() -> f64 {
    1.0
}
fn precision() -> f64 {
    1e-9
}
fn rounds() -> usize {
    5
}
fn random_seeds() -> usize {
    3
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            safety_factor: unit(),
            precision: precision(),
            max_rounds: rounds(),
            random_seeds: random_seeds(),
        }
    }
}

impl CalibrationSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.safety_factor >= 0.0 && self.safety_factor.is_finite()) {
            return Err(Error::InvalidArgument("safety factor must be finite and nonnegative".into()));
        }
        if !(self.precision > 0.0) {
            return Err(Error::InvalidArgument("rounding precision must be positive".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::InvalidArgument("at least one calibration round is needed".into()));
        }
        Ok(())
    }
}

/// Violation statistics of one batch against the original constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub delta: Vec<f64>,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub violating_episodes: Vec<usize>,
    pub violating_steps: Vec<usize>,
    pub max_violation: Vec<f64>,
}

impl VerificationReport {
    pub fn from_outcomes(delta: &[f64], outcomes: &[EpisodeOutcome], n_c: usize) -> Self {
        let mut r = VerificationReport {
            delta: delta.to_vec(),
            episodes: outcomes.len(),
            failed_episodes: 0,
            violating_episodes: vec![0; n_c],
            violating_steps: vec![0; n_c],
            max_violation: vec![0.0; n_c],
        };
        for o in outcomes {
            match &o.result {
                Ok((s, _)) => {
                    if s.failed() {
                        r.failed_episodes += 1;
                    }
                    for i in 0..n_c {
                        r.violating_steps[i] += s.violating_steps[i];
                        if s.violated(i) {
                            r.violating_episodes[i] += 1;
                        }
                        r.max_violation[i] = r.max_violation[i].max(s.max_violation[i]);
                    }
                }
                Err(_) => r.failed_episodes += 1,
            }
        }
        r
    }

    pub fn clean(&self) -> bool {
        self.violating_episodes.iter().all(|&v| v == 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TighteningReport {
    pub constraints: Vec<String>,
    pub safety_factor: f64,
    /// Max violation recorded in the calibration run that produced `delta`.
    pub max_violation: Vec<f64>,
    pub delta: Vec<f64>,
    /// One entry per calibration batch, in order.
    pub rounds: Vec<VerificationReport>,
    /// Rerun with the final `delta`, if one was made.
    pub verification: Option<VerificationReport>,
}

/// `factor * v` rounded up to a multiple of `precision`.
pub fn backoff(v: f64, factor: f64, precision: f64) -> f64 {
    let raw = factor * v;
    if raw <= 0.0 {
        return 0.0;
    }
    let q = (raw / precision).ceil() * precision;
    // guard against the quotient landing one ulp below
    if q < raw {
        q + precision
    } else {
        q
    }
}

/// Default calibration batch: the parametric box vertices and nominal, each
/// with constant-lower, constant-upper and `random_seeds` uniform additive
/// sequences.
pub fn calibration_episodes(decl: &UncertaintyDecl, random_seeds: usize, master_seed: u64) -> Result<Vec<EpisodeSpec>> {
    let dims = decl.indices_of(UncertaintyKind::Parametric);
    let points = if dims.is_empty() {
        vec![decl.nominal()]
    } else {
        sample_box_values(decl, &dims, true)?.vectors
    };
    let mut out = Vec::new();
    for p in points {
        let mut laws = vec![DisturbanceLaw::ConstantLower, DisturbanceLaw::ConstantUpper];
        laws.extend(std::iter::repeat_n(DisturbanceLaw::Uniform, random_seeds));
        for law in laws {
            let index = out.len();
            out.push(EpisodeSpec {
                index,
                parameters: p.clone(),
                seed: crate::closed_loop::derive_seed(master_seed ^ 0xCA1B, index as u64),
                law,
            });
        }
    }
    Ok(out)
}

fn with_delta(scheme: &Scheme, delta: &[f64]) -> Scheme {
    let mut s = scheme.clone();
    s.pair.primary.delta = delta.to_vec();
    s
}

/// Runs the batch with the scheme's current back-off and sets
/// `delta_i = safety_factor * max violation_i`.
pub fn calibrate_tightening(
    scheme: &Scheme,
    template: &PlantSim,
    episodes: &[EpisodeSpec],
    settings: &CalibrationSettings,
    workers: usize,
) -> Result<TighteningReport> {
    settings.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("calibration needs at least one episode".into()));
    }
    let n_c = template.model.n_c();
    let delta0 = scheme.pair.primary.delta.clone();
    check_dim("scheme tightening", n_c, delta0.len())?;
    let outcomes = run_episodes(template, scheme, episodes, workers, false)?;
    let round = VerificationReport::from_outcomes(&delta0, &outcomes, n_c);
    if round.failed_episodes > 0 {
        log::warn!(
            "{} of {} calibration episodes failed; using the completed ones",
            round.failed_episodes,
            round.episodes
        );
    }
    let delta = round
        .max_violation
        .iter()
        .map(|&v| backoff(v, settings.safety_factor, settings.precision))
        .collect();
    Ok(TighteningReport {
        constraints: template.model.constraints.iter().map(|c| c.name.clone()).collect(),
        safety_factor: settings.safety_factor,
        max_violation: round.max_violation.clone(),
        delta,
        rounds: vec![round],
        verification: None,
    })
}

/// Calibrates from zero back-off, then reruns with the new back-off until
/// the batch is clean or `max_rounds` batches have run. Violations that
/// persist are added to the recorded maximum, so `max_violation` is the
/// cumulative worst case across rounds and `delta` stays `factor` times it.
pub fn calibrate_iteratively(
    scheme: &Scheme,
    template: &PlantSim,
    episodes: &[EpisodeSpec],
    settings: &CalibrationSettings,
    workers: usize,
) -> Result<TighteningReport> {
    let n_c = template.model.n_c();
    let base = with_delta(scheme, &vec![0.0; n_c]);
    let mut report = calibrate_tightening(&base, template, episodes, settings, workers)?;
    while report.rounds.len() < settings.max_rounds && report.delta.iter().any(|&d| d > 0.0) {
        let outcomes = run_episodes(template, &with_delta(scheme, &report.delta), episodes, workers, false)?;
        let round = VerificationReport::from_outcomes(&report.delta, &outcomes, n_c);
        let clean = round.clean();
        for i in 0..n_c {
            report.max_violation[i] += round.max_violation[i];
            report.delta[i] = backoff(report.max_violation[i], settings.safety_factor, settings.precision);
        }
        report.rounds.push(round);
        if clean {
            break;
        }
    }
    Ok(report)
}

/// Reruns the grid with `delta` applied and reports violations of the
/// original constraints.
pub fn verify_tightening(
    scheme: &Scheme,
    template: &PlantSim,
    grid: &GridSpec,
    delta: &[f64],
    master_seed: u64,
    workers: usize,
) -> Result<VerificationReport> {
    let n_c = template.model.n_c();
    check_dim("tightening", n_c, delta.len())?;
    let episodes = grid_episodes(&template.uncertainty, grid, master_seed)?;
    let outcomes = run_episodes(template, &with_delta(scheme, delta), &episodes, workers, false)?;
    Ok(VerificationReport::from_outcomes(delta, &outcomes, n_c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_arithmetic() {
        assert_eq!(backoff(0.0, 1.0, 1e-9), 0.0);
        assert!((backoff(0.3, 1.0, 1e-9) - 0.3).abs() < 1e-9);
        assert!((backoff(0.3, 1.5, 1e-9) - 0.45).abs() < 1e-9);
        assert!(backoff(0.3, 1.5, 1e-9) >= 0.45);
        assert_eq!(backoff(0.01, 1.0, 0.1), 0.1);
    }

    #[test]
    fn settings_validation() {
        assert!(CalibrationSettings::default().validate().is_ok());
        let bad = CalibrationSettings {
            safety_factor: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn calibration_batch_layout() {
        let b = crate::model::benchmark_reactor();
        let eps = calibration_episodes(&b.uncertainty, 3, 1).unwrap();
        // k in {0.5, 1, 1.5}, five additive laws each
        assert_eq!(eps.len(), 15);
        assert_eq!(eps.iter().filter(|e| e.law == DisturbanceLaw::ConstantUpper).count(), 3);
        assert!(eps.iter().all(|e| e.parameters[1] == 0.0));
    }
}
