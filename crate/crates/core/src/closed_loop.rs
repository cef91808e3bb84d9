//! Closed-loop simulation of the two-layer scheme and its baselines, batch
//! grids over the parametric uncertainty, and scheme comparison metrics.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{
    AncillaryController, ControllerPair, PrimaryController, SchemeKind, TreeTrajectory,
};
use crate::error::{check_dim, Error, Result};
use crate::estimator::{estimate_box, estimate_finite, propagate_primary, EstimateResult};
use crate::model::{ModelSpec, UncertaintyDecl, UncertaintyKind};
use crate::nlp::SolveStatus;

/// How additive disturbances are drawn at each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceLaw {
    #[default]
    Uniform,
    ConstantLower,
    ConstantUpper,
    Nominal,
}

/// The simulated plant for one episode.
#[derive(Clone, Debug)]
pub struct PlantSim {
    pub model: ModelSpec,
    pub uncertainty: UncertaintyDecl,
    /// True uncertainty vector; additive entries are replaced by draws.
    pub parameters: Vec<f64>,
    pub law: DisturbanceLaw,
    pub max_steps: usize,
    /// Stop once `x[i] >= target`.
    pub stop: Option<(usize, f64)>,
    pub x0: Vec<f64>,
}

impl PlantSim {
    pub fn validate(&self) -> Result<()> {
        check_dim("plant parameters", self.model.n_d, self.parameters.len())?;
        check_dim("plant uncertainty", self.model.n_d, self.uncertainty.n_d())?;
        check_dim("plant initial state", self.model.n_x, self.x0.len())?;
        if !self.uncertainty.contains(&self.parameters) {
            return Err(Error::InvalidArgument(format!(
                "plant parameters {:?} outside the uncertainty box",
                self.parameters
            )));
        }
        Ok(())
    }

    /// Realized uncertainty for one step.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut d = self.parameters.clone();
        for (i, p) in self.uncertainty.params.iter().enumerate() {
            if p.kind != UncertaintyKind::Additive {
                continue;
            }
            d[i] = match self.law {
                DisturbanceLaw::Uniform if p.lower < p.upper => rng.random_range(p.lower..=p.upper),
                DisturbanceLaw::Uniform | DisturbanceLaw::Nominal => p.nominal,
                DisturbanceLaw::ConstantLower => p.lower,
                DisturbanceLaw::ConstantUpper => p.upper,
            };
        }
        d
    }

    fn stopped(&self, x: &[f64]) -> bool {
        self.stop.is_some_and(|(i, target)| x[i] >= target)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Finite,
    Box,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub kind: EstimatorKind,
    /// Diagonal regularization weights; empty means none.
    #[serde(default)]
    pub weights: Vec<f64>,
}

/// A named controller scheme ready to be run in closed loop.
#[derive(Clone, Debug)]
pub struct Scheme {
    pub name: String,
    pub pair: ControllerPair,
    pub estimator: EstimatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum EpisodeEnd {
    /// Stop predicate reached.
    Target,
    MaxSteps,
    Failed(String),
}

/// Per-step record of one episode: `T` inputs and `T + 1` states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopTrace {
    pub x: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    /// Root input of the primary solve at each step.
    pub v: Vec<Vec<f64>>,
    /// `dbar[t]` is the estimate of the step `t - 1` uncertainty; `None` at
    /// `t = 0` and for single-layer schemes.
    pub dbar: Vec<Option<Vec<f64>>>,
    /// Realized uncertainty applied on step `t`.
    pub d: Vec<Vec<f64>>,
    /// `max(0, g_i(x(t), u(t)))`, with the last applied input at the final state.
    pub violations: Vec<Vec<f64>>,
    pub t_primary_ms: Vec<f64>,
    pub t_ancillary_ms: Vec<f64>,
    pub non_optimal_solves: usize,
    pub end: EpisodeEnd,
}

impl ClosedLoopTrace {
    fn new() -> Self {
        ClosedLoopTrace {
            x: Vec::new(),
            z: Vec::new(),
            u: Vec::new(),
            v: Vec::new(),
            dbar: Vec::new(),
            d: Vec::new(),
            violations: Vec::new(),
            t_primary_ms: Vec::new(),
            t_ancillary_ms: Vec::new(),
            non_optimal_solves: 0,
            end: EpisodeEnd::MaxSteps,
        }
    }

    pub fn steps(&self) -> usize {
        self.u.len()
    }

    /// Steps with a positive violation of constraint `i`.
    pub fn violating_steps(&self, i: usize) -> usize {
        self.violations.iter().filter(|v| v[i] > 0.0).count()
    }

    pub fn max_violation(&self, i: usize) -> f64 {
        self.violations.iter().map(|v| v[i]).fold(0.0, f64::max)
    }

    /// Largest `|z(t) - f(z(t-1), v(t-1), dbar(t))|` over the trace; zero when
    /// the primary state was propagated as recorded.
    pub fn primary_recomputation_error(&self, model: &ModelSpec) -> Result<f64> {
        let mut worst = 0.0f64;
        for t in 1..self.z.len() {
            let Some(d) = &self.dbar[t] else { continue };
            let z = propagate_primary(model, &self.z[t - 1], &self.v[t - 1], d)?;
            for (a, b) in z.iter().zip(&self.z[t]) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

fn record_violations(model: &ModelSpec, trace: &mut ClosedLoopTrace, x: &[f64], u: &[f64]) -> Result<()> {
    trace.violations.push(model.violations(x, u)?);
    Ok(())
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Runs one episode. Controller failures end the episode and are recorded
/// in [`ClosedLoopTrace::end`]; only malformed inputs return an error.
pub fn run_episode(plant: &PlantSim, scheme: &Scheme, seed: u64) -> Result<ClosedLoopTrace> {
    plant.validate()?;
    let model = &plant.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primary = PrimaryController::new(scheme.pair.primary.clone(), model)?;
    let two_layer = scheme.pair.kind != SchemeKind::MultiStage;
    let mut ancillary = match (&scheme.pair.ancillary, two_layer) {
        (Some(a), true) => Some(AncillaryController::new(a.clone(), model)?),
        (None, true) => {
            return Err(Error::InvalidArgument(format!(
                "scheme {} needs an ancillary controller",
                scheme.name
            )))
        }
        _ => None,
    };
    let candidates = scheme.pair.primary.tree.realizations.clone();
    let est_weights = &scheme.estimator.weights;
    if !est_weights.is_empty() {
        check_dim("estimator weights", model.n_d, est_weights.len())?;
    }

    let mut trace = ClosedLoopTrace::new();
    let mut x = plant.x0.clone();
    let mut z = plant.x0.clone();
    let mut prev_est: Option<EstimateResult> = None;
    let mut reference: Option<TreeTrajectory>;

    for t in 0.. {
        trace.x.push(x.clone());
        if t > 0 {
            // Estimate the last step's uncertainty and propagate the primary state.
            if two_layer {
                let (xp, up) = (&trace.x[t - 1], &trace.u[t - 1]);
                let prev = prev_est.as_ref().map(|e| e.d_bar.as_slice());
                let est = match scheme.estimator.kind {
                    EstimatorKind::Finite => {
                        estimate_finite(model, xp, up, &x, &candidates, prev, est_weights)?
                    }
                    EstimatorKind::Box => {
                        let p = prev.map(<[f64]>::to_vec).unwrap_or_else(|| plant.uncertainty.nominal());
                        estimate_box(model, xp, up, &x, &plant.uncertainty, &p, est_weights)?
                    }
                };
                z = propagate_primary(model, &z, &trace.v[t - 1], &est.d_bar)?;
                trace.dbar.push(Some(est.d_bar.clone()));
                prev_est = Some(est);
            } else {
                z = x.clone();
                trace.dbar.push(None);
            }
        } else {
            trace.dbar.push(None);
        }
        trace.z.push(z.clone());

        let done = plant.stopped(&x) || t >= plant.max_steps;
        if done {
            trace.end = if plant.stopped(&x) {
                EpisodeEnd::Target
            } else {
                EpisodeEnd::MaxSteps
            };
            let u_last = trace.u.last().cloned().unwrap_or_else(|| model.input_bounds.iter().map(|b| b.mid()).collect());
            record_violations(model, &mut trace, &x, &u_last)?;
            break;
        }

        let prev_v = if two_layer { trace.v.last() } else { trace.u.last() };
        let start = Instant::now();
        let pr = match primary.solve(model, &z, prev_v.map(Vec::as_slice)) {
            Ok(r) => r,
            Err(e) => {
                trace.end = EpisodeEnd::Failed(format!("t = {t}: {e}"));
                let u_last = trace.u.last().cloned().unwrap_or_else(|| model.input_bounds.iter().map(|b| b.mid()).collect());
                record_violations(model, &mut trace, &x, &u_last)?;
                break;
            }
        };
        trace.t_primary_ms.push(ms(start));
        if pr.report.status != SolveStatus::Optimal {
            trace.non_optimal_solves += 1;
        }
        let v = pr.trajectory.root_input().to_vec();
        reference = Some(pr.trajectory);

        let u = match (&mut ancillary, t) {
            (Some(anc), t) if t > 0 => {
                let start = Instant::now();
                let ar = anc.solve(model, &x, reference.as_ref().expect("reference"))?;
                trace.t_ancillary_ms.push(ms(start));
                if ar.report.status != SolveStatus::Optimal {
                    trace.non_optimal_solves += 1;
                }
                ar.input
            }
            _ => {
                trace.t_ancillary_ms.push(0.0);
                v.clone()
            }
        };
        debug_assert!(u.iter().zip(&model.input_bounds).all(|(ui, b)| b.contains(*ui)));

        record_violations(model, &mut trace, &x, &u)?;
        let d = plant.draw(&mut rng);
        let next = model.step(&x, &u, &d)?;
        trace.u.push(u);
        trace.v.push(v);
        trace.d.push(d);
        x = next;
    }
    Ok(trace)
}

/// Episode seed derived from the master seed by a SplitMix64 step.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` evenly spaced points over `[lo, hi]`; a single point sits at `nominal`.
pub fn linspace(lo: f64, hi: f64, n: usize, nominal: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![nominal],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Uniform grid over the parametric uncertainties with `seeds_per_point`
/// additive-noise sequences per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Points per parametric dimension, in declaration order.
    pub points: Vec<usize>,
    #[serde(default = "one")]
    pub seeds_per_point: usize,
    #[serde(default)]
    pub law: DisturbanceLaw,
}

fn one() -> usize {
    1
}

/// One episode's inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub index: usize,
    pub parameters: Vec<f64>,
    pub seed: u64,
    pub law: DisturbanceLaw,
}

pub fn grid_episodes(decl: &UncertaintyDecl, grid: &GridSpec, master_seed: u64) -> Result<Vec<EpisodeSpec>> {
    let dims = decl.indices_of(UncertaintyKind::Parametric);
    check_dim("grid points", dims.len(), grid.points.len())?;
    if grid.points.contains(&0) || grid.seeds_per_point == 0 {
        return Err(Error::InvalidArgument("grid must be nonempty".into()));
    }
    let mut points = vec![decl.nominal()];
    for (&dim, &n) in dims.iter().zip(&grid.points) {
        let p = &decl.params[dim];
        let vals = linspace(p.lower, p.upper, n, p.nominal);
        points = points
            .iter()
            .flat_map(|base| {
                vals.iter().map(move |&v| {
                    let mut d = base.clone();
                    d[dim] = v;
                    d
                })
            })
            .collect();
    }
    let mut out = Vec::with_capacity(points.len() * grid.seeds_per_point);
    for p in points {
        for _ in 0..grid.seeds_per_point {
            let index = out.len();
            out.push(EpisodeSpec {
                index,
                parameters: p.clone(),
                seed: derive_seed(master_seed, index as u64),
                law: grid.law,
            });
        }
    }
    Ok(out)
}

/// Scalar results of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scheme: String,
    pub index: usize,
    pub seed: u64,
    pub parameters: Vec<f64>,
    pub steps: usize,
    pub end: EpisodeEnd,
    pub max_violation: Vec<f64>,
    pub violating_steps: Vec<usize>,
    pub avg_primary_ms: f64,
    pub avg_ancillary_ms: f64,
    /// Mean of primary plus ancillary time per control step.
    pub avg_step_ms: f64,
    pub non_optimal_solves: usize,
}

impl EpisodeSummary {
    pub fn from_trace(scheme: &str, spec: &EpisodeSpec, trace: &ClosedLoopTrace, n_c: usize) -> Self {
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let step: Vec<f64> = trace
            .t_primary_ms
            .iter()
            .zip(&trace.t_ancillary_ms)
            .map(|(a, b)| a + b)
            .collect();
        EpisodeSummary {
            scheme: scheme.to_string(),
            index: spec.index,
            seed: spec.seed,
            parameters: spec.parameters.clone(),
            steps: trace.steps(),
            end: trace.end.clone(),
            max_violation: (0..n_c).map(|i| trace.max_violation(i)).collect(),
            violating_steps: (0..n_c).map(|i| trace.violating_steps(i)).collect(),
            avg_primary_ms: mean(&trace.t_primary_ms),
            avg_ancillary_ms: mean(&trace.t_ancillary_ms),
            avg_step_ms: mean(&step),
            non_optimal_solves: trace.non_optimal_solves,
        }
    }

    pub fn failed(&self) -> bool {
        matches!(self.end, EpisodeEnd::Failed(_))
    }

    pub fn violated(&self, i: usize) -> bool {
        self.violating_steps[i] > 0
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub spec: EpisodeSpec,
    /// Malformed-input errors; controller failures live in the summary.
    pub result: std::result::Result<(EpisodeSummary, Option<ClosedLoopTrace>), String>,
}

/// Runs the episodes on `workers` threads (0 uses the rayon default).
/// Results come back in episode order.
pub fn run_episodes(
    template: &PlantSim,
    scheme: &Scheme,
    episodes: &[EpisodeSpec],
    workers: usize,
    keep_traces: bool,
) -> Result<Vec<EpisodeOutcome>> {
    let n_c = template.model.n_c();
    let run = |spec: &EpisodeSpec| {
        let plant = PlantSim {
            parameters: spec.parameters.clone(),
            law: spec.law,
            ..template.clone()
        };
        let result = run_episode(&plant, scheme, spec.seed)
            .map(|trace| {
                let s = EpisodeSummary::from_trace(&scheme.name, spec, &trace, n_c);
                (s, keep_traces.then_some(trace))
            })
            .map_err(|e| e.to_string());
        EpisodeOutcome {
            spec: spec.clone(),
            result,
        }
    };
    if workers == 1 {
        return Ok(episodes.iter().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    Ok(pool.install(|| episodes.par_iter().map(run).collect()))
}

pub fn run_batch_grid(
    template: &PlantSim,
    scheme: &Scheme,
    grid: &GridSpec,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<EpisodeOutcome>> {
    let episodes = grid_episodes(&template.uncertainty, grid, master_seed)?;
    run_episodes(template, scheme, &episodes, workers, false)
}

/// One row of the scheme comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: String,
    pub scenarios: usize,
    pub episodes: usize,
    pub failed_episodes: usize,
    /// Mean steps to reach the stop target (the batch-time analog).
    pub avg_steps: f64,
    /// Episodes with at least one violation, per constraint.
    pub violating_episodes: Vec<usize>,
    pub max_violation: Vec<f64>,
    /// Mean controller time per control step, milliseconds.
    pub avg_step_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub constraints: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

pub fn summarize(scheme: &Scheme, outcomes: &[EpisodeOutcome], n_c: usize) -> ComparisonRow {
    let summaries: Vec<&EpisodeSummary> = outcomes.iter().filter_map(|o| o.result.as_ref().ok().map(|r| &r.0)).collect();
    let ok: Vec<&&EpisodeSummary> = summaries.iter().filter(|s| !s.failed()).collect();
    let mean = |f: &dyn Fn(&EpisodeSummary) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|s| f(s)).sum::<f64>() / ok.len() as f64
        }
    };
    ComparisonRow {
        scheme: scheme.name.clone(),
        scenarios: scheme.pair.scenario_count(),
        episodes: outcomes.len(),
        failed_episodes: outcomes.len() - ok.len(),
        avg_steps: mean(&|s| s.steps as f64),
        violating_episodes: (0..n_c).map(|i| summaries.iter().filter(|s| s.violated(i)).count()).collect(),
        max_violation: (0..n_c)
            .map(|i| summaries.iter().map(|s| s.max_violation[i]).fold(0.0, f64::max))
            .collect(),
        avg_step_ms: mean(&|s| s.avg_step_ms),
    }
}

/// Runs every scheme on the same grid and seeds.
pub fn compare_schemes(
    schemes: &[Scheme],
    template: &PlantSim,
    grid: &GridSpec,
    master_seed: u64,
    workers: usize,
) -> Result<(ComparisonTable, Vec<Vec<EpisodeOutcome>>)> {
    let n_c = template.model.n_c();
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for s in schemes {
        let outcomes = run_batch_grid(template, s, grid, master_seed, workers)?;
        rows.push(summarize(s, &outcomes, n_c));
        all.push(outcomes);
    }
    Ok((
        ComparisonTable {
            constraints: template.model.constraints.iter().map(|c| c.name.clone()).collect(),
            rows,
        },
        all,
    ))
}
