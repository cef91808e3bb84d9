//! Experiment configuration: a JSON document describing the model, the
//! uncertainty, the controllers, the schemes to compare and the episode grid.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ad::Ad;
use crate::calibration::{CalibrationSettings, TighteningReport};
use crate::closed_loop::{EstimatorConfig, GridSpec, PlantSim, Scheme};
use crate::controllers::{make_pair, AncillaryConfig, AncillaryMode, SchemeKind, SchemeOptions};
use crate::error::{Error, Result};
use crate::model::{builtin, Benchmark, Interval, UncertainParam, UncertaintyDecl, UncertaintyKind, MODEL_NAMES};
use crate::nlp::SqpSettings;
use crate::scenario_tree::{naive_scenario_count, sample_levels, state_node_count, RealizationSet};

/// Models known only by their bounds and uncertainty; they can be inspected
/// with `tree-info` but not simulated.
pub const DECLARED_MODELS: &[&str] = &["polymerization"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub uncertainty: Vec<UncertaintyEntry>,
    pub tree: TreeSection,
    pub primary: PrimarySection,
    pub ancillary: AncillarySection,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    pub schemes: Vec<SchemeSpec>,
    pub simulation: SimulationSection,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub sqp: SqpSettings,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    /// Sampling interval; `None` keeps the model's own.
    #[serde(default)]
    pub dt: Option<f64>,
    /// `[lo, hi]` per input.
    pub input_bounds: Vec<[f64; 2]>,
    /// Required for declared-only models, optional otherwise.
    #[serde(default)]
    pub state_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyEntry {
    pub name: String,
    pub nominal: f64,
    pub lower: f64,
    pub upper: f64,
    pub significant: bool,
    pub kind: UncertaintyKind,
    /// Tree levels for this dimension; `None` samples the bounds (and nominal).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub horizon: usize,
    pub robust_horizon: usize,
    /// 3 samples `{lower, nominal, upper}`, 2 only the bounds.
    #[serde(default = "three")]
    pub values_per_dim: usize,
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageCostSpec {
    /// The built-in model's own cost.
    ModelDefault,
    /// `-x[product_state] + sum_i r_i (v_i - v_prev_i)^2`, terminal
    /// `-terminal_weight * x[product_state]`.
    Economic {
        product_state: usize,
        move_penalty: Vec<f64>,
        #[serde(default)]
        terminal_weight: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimarySection {
    pub stage_cost: StageCostSpec,
    /// Back-off per path constraint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    /// Tightening report to take the back-off from, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AncillarySection {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(default)]
    pub mode: AncillaryMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub name: String,
    pub kind: SchemeKind,
    /// Overrides the primary back-off for this scheme.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust_horizon: Option<usize>,
    /// Branched dimensions of a multi-stage scheme; all by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSpec {
    pub state: usize,
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub seed: u64,
    pub max_steps: usize,
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    /// `None` keeps the model's stop rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopSpec>,
}

fn cfg_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.into_inner().to_string();
        // name the missing field itself rather than its parent
        if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        cfg_err(if path == "." { "<root>".into() } else { path }, message)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file; a relative calibration reference is resolved
/// against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(c) = &cfg.primary.calibration {
        if c.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.primary.calibration = Some(base.join(c));
        }
    }
    Ok(cfg)
}

/// Dimensions of a model as declared by the configuration.
struct Dims {
    n_x: usize,
    n_u: usize,
    n_d: usize,
    n_c: Option<usize>,
}

impl ExperimentConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_declared_only(&self) -> bool {
        DECLARED_MODELS.contains(&self.model.name.as_str())
    }

    fn dims(&self) -> Result<Dims> {
        let n_u = self.model.input_bounds.len();
        let n_d = self.uncertainty.len();
        if self.is_declared_only() {
            if self.model.state_names.is_empty() {
                return Err(cfg_err("model.state_names", "declared models must name their states"));
            }
            return Ok(Dims {
                n_x: self.model.state_names.len(),
                n_u,
                n_d,
                n_c: None,
            });
        }
        let b = builtin(&self.model.name, self.model.dt)?;
        Ok(Dims {
            n_x: b.model.n_x,
            n_u: b.model.n_u,
            n_d: b.model.n_d,
            n_c: Some(b.model.n_c()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let known = MODEL_NAMES.contains(&self.model.name.as_str()) || self.is_declared_only();
        if !known {
            return Err(cfg_err(
                "model.name",
                format!(
                    "unknown model `{}`; expected one of {:?}",
                    self.model.name,
                    [MODEL_NAMES, DECLARED_MODELS].concat()
                ),
            ));
        }
        if let Some(dt) = self.model.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(cfg_err("model.dt", "must be positive"));
            }
        }
        let dims = self.dims()?;
        if self.model.input_bounds.len() != dims.n_u || dims.n_u == 0 {
            return Err(cfg_err(
                "model.input_bounds",
                format!("expected {} intervals, got {}", dims.n_u, self.model.input_bounds.len()),
            ));
        }
        for (i, [lo, hi]) in self.model.input_bounds.iter().enumerate() {
            if !(lo <= hi) {
                return Err(cfg_err(format!("model.input_bounds[{i}]"), "lower bound exceeds upper bound"));
            }
        }
        if !self.model.state_names.is_empty() && self.model.state_names.len() != dims.n_x {
            return Err(cfg_err("model.state_names", format!("expected {} names", dims.n_x)));
        }

        if self.uncertainty.len() != dims.n_d {
            return Err(cfg_err("uncertainty", format!("expected {} entries, got {}", dims.n_d, self.uncertainty.len())));
        }
        for (i, u) in self.uncertainty.iter().enumerate() {
            if !(u.lower <= u.nominal && u.nominal <= u.upper) {
                return Err(cfg_err(format!("uncertainty[{i}]"), "needs lower <= nominal <= upper"));
            }
            if let Some(vals) = &u.values {
                if vals.is_empty() {
                    return Err(cfg_err(format!("uncertainty[{i}].values"), "must not be empty"));
                }
                if let Some(v) = vals.iter().find(|&&v| !(u.lower <= v && v <= u.upper)) {
                    return Err(cfg_err(format!("uncertainty[{i}].values"), format!("{v} outside [{}, {}]", u.lower, u.upper)));
                }
            }
        }
        if !self.uncertainty.iter().any(|u| u.significant) {
            return Err(cfg_err("uncertainty", "at least one uncertainty must be significant"));
        }

        let t = &self.tree;
        if t.horizon == 0 {
            return Err(cfg_err("tree.horizon", "must be at least 1"));
        }
        if t.robust_horizon == 0 || t.robust_horizon > t.horizon {
            return Err(cfg_err("tree.robust_horizon", "must lie in 1..=horizon"));
        }
        if !(t.values_per_dim == 2 || t.values_per_dim == 3) {
            return Err(cfg_err("tree.values_per_dim", "must be 2 or 3"));
        }

        match &self.primary.stage_cost {
            StageCostSpec::ModelDefault if self.is_declared_only() => {
                return Err(cfg_err("primary.stage_cost", "declared models have no default cost"));
            }
            StageCostSpec::Economic {
                product_state,
                move_penalty,
                terminal_weight,
            } => {
                if *product_state >= dims.n_x {
                    return Err(cfg_err("primary.stage_cost.product_state", "out of range"));
                }
                if move_penalty.len() != dims.n_u || move_penalty.iter().any(|&r| !(r >= 0.0)) {
                    return Err(cfg_err(
                        "primary.stage_cost.move_penalty",
                        format!("expected {} nonnegative weights", dims.n_u),
                    ));
                }
                if !terminal_weight.is_finite() {
                    return Err(cfg_err("primary.stage_cost.terminal_weight", "must be finite"));
                }
            }
            _ => {}
        }
        if self.primary.delta.is_some() && self.primary.calibration.is_some() {
            return Err(cfg_err("primary", "give either `delta` or `calibration`, not both"));
        }
        let check_delta = |path: String, d: &[f64]| -> Result<()> {
            if let Some(n_c) = dims.n_c {
                if d.len() != n_c {
                    return Err(cfg_err(path, format!("expected {n_c} entries, got {}", d.len())));
                }
            }
            if d.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(cfg_err(path, "entries must be finite and nonnegative"));
            }
            Ok(())
        };
        if let Some(d) = &self.primary.delta {
            check_delta("primary.delta".into(), d)?;
        }

        let a = &self.ancillary;
        if a.q.len() != dims.n_x || a.q.iter().any(|&v| !(v >= 0.0)) {
            return Err(cfg_err("ancillary.q", format!("expected {} nonnegative entries", dims.n_x)));
        }
        if a.r.len() != dims.n_u || a.r.iter().any(|&v| !(v >= 0.0)) {
            return Err(cfg_err("ancillary.r", format!("expected {} nonnegative entries", dims.n_u)));
        }
        if let Some(p) = &a.p {
            if p.len() != dims.n_x || p.iter().any(|&v| !(v >= 0.0)) {
                return Err(cfg_err("ancillary.p", format!("expected {} nonnegative entries", dims.n_x)));
            }
        }
        if !self.estimator.weights.is_empty() && self.estimator.weights.len() != dims.n_d {
            return Err(cfg_err("estimator.weights", format!("expected {} entries", dims.n_d)));
        }

        if self.schemes.is_empty() {
            return Err(cfg_err("schemes", "at least one scheme is needed"));
        }
        for (i, s) in self.schemes.iter().enumerate() {
            if self.schemes[..i].iter().any(|o| o.name == s.name) {
                return Err(cfg_err(format!("schemes[{i}].name"), format!("duplicate scheme `{}`", s.name)));
            }
            if let Some(d) = &s.delta {
                check_delta(format!("schemes[{i}].delta"), d)?;
            }
            if let Some(nr) = s.robust_horizon {
                if nr == 0 || nr > t.horizon {
                    return Err(cfg_err(format!("schemes[{i}].robust_horizon"), "must lie in 1..=horizon"));
                }
            }
            if let Some(dims_) = &s.dims {
                if s.kind != SchemeKind::MultiStage {
                    return Err(cfg_err(format!("schemes[{i}].dims"), "only multi-stage schemes take branching dims"));
                }
                if dims_.is_empty() || dims_.iter().any(|&d| d >= dims.n_d) {
                    return Err(cfg_err(format!("schemes[{i}].dims"), format!("need indices below {}", dims.n_d)));
                }
            }
        }

        let sim = &self.simulation;
        let n_par = self.uncertainty.iter().filter(|u| u.kind == UncertaintyKind::Parametric).count();
        if sim.grid.points.len() != n_par {
            return Err(cfg_err("simulation.grid.points", format!("expected {n_par} entries, one per parametric uncertainty")));
        }
        if sim.grid.points.contains(&0) {
            return Err(cfg_err("simulation.grid.points", "entries must be positive"));
        }
        if sim.grid.seeds_per_point == 0 {
            return Err(cfg_err("simulation.grid.seeds_per_point", "must be positive"));
        }
        if let Some(x0) = &sim.initial_state {
            if x0.len() != dims.n_x {
                return Err(cfg_err("simulation.initial_state", format!("expected {} entries", dims.n_x)));
            }
        }
        if let Some(s) = &sim.stop {
            if s.state >= dims.n_x {
                return Err(cfg_err("simulation.stop.state", "out of range"));
            }
        }
        self.calibration
            .validate()
            .map_err(|e| cfg_err("calibration", e.to_string()))?;
        Ok(())
    }

    pub fn uncertainty_decl(&self) -> Result<UncertaintyDecl> {
        UncertaintyDecl::new(
            self.uncertainty
                .iter()
                .map(|u| UncertainParam {
                    name: u.name.clone(),
                    nominal: u.nominal,
                    lower: u.lower,
                    upper: u.upper,
                    significant: u.significant,
                    kind: u.kind,
                })
                .collect(),
        )
    }

    fn levels(&self, dim: usize) -> Vec<f64> {
        let u = &self.uncertainty[dim];
        match &u.values {
            Some(v) => v.clone(),
            None if self.tree.values_per_dim == 3 => vec![u.lower, u.nominal, u.upper],
            None => vec![u.lower, u.upper],
        }
    }

    /// Realization set of a scheme's primary tree.
    pub fn realizations(&self, spec: &SchemeSpec) -> Result<RealizationSet> {
        let decl = self.uncertainty_decl()?;
        let dims = match spec.kind {
            SchemeKind::Tube => return Ok(RealizationSet::nominal_only(&decl)),
            SchemeKind::Tems => decl.significant_indices(),
            SchemeKind::MultiStage => spec.dims.clone().unwrap_or_else(|| (0..decl.n_d()).collect()),
        };
        let levels: Vec<Vec<f64>> = dims.iter().map(|&d| self.levels(d)).collect();
        sample_levels(&decl, &dims, &levels)
    }

    /// The TEMS tree summary together with the naive full-branching count.
    pub fn tree_info(&self) -> Result<TreeInfo> {
        let spec = SchemeSpec {
            name: "tems".into(),
            kind: SchemeKind::Tems,
            delta: None,
            robust_horizon: None,
            dims: None,
        };
        let s = self.realizations(&spec)?.len();
        let n_r = self.tree.robust_horizon;
        let scenarios = s
            .checked_pow(n_r as u32)
            .ok_or_else(|| Error::Overflow("scenario count".into()))?;
        Ok(TreeInfo {
            scenarios,
            state_nodes: state_node_count(s, self.tree.horizon, n_r),
            naive_full_branching: naive_scenario_count(
                self.tree.values_per_dim as u64,
                self.uncertainty.len() as u64,
                n_r as u64,
            )?,
            horizon: self.tree.horizon,
            robust_horizon: n_r,
            realizations: s,
        })
    }

    /// The runnable benchmark described by the config.
    pub fn benchmark(&self) -> Result<Benchmark> {
        if self.is_declared_only() {
            return Err(cfg_err(
                "model.name",
                format!("`{}` has no executable dynamics", self.model.name),
            ));
        }
        let mut b = builtin(&self.model.name, self.model.dt)?;
        b.model.input_bounds = self.model.input_bounds.iter().map(|&[lo, hi]| Interval::new(lo, hi)).collect();
        if !self.model.state_names.is_empty() {
            b.model.state_names = self.model.state_names.clone();
        }
        b.uncertainty = self.uncertainty_decl()?;
        if let StageCostSpec::Economic {
            product_state,
            move_penalty,
            terminal_weight,
        } = &self.primary.stage_cost
        {
            let (p, r, tw) = (*product_state, move_penalty.clone(), *terminal_weight);
            b.stage_cost = Arc::new(move |z: &[Ad], v: &[Ad], v_prev: &[Ad]| {
                let mut c = -&z[p];
                for (i, ri) in r.iter().enumerate() {
                    if *ri != 0.0 {
                        c = c + (&v[i] - &v_prev[i]).square() * *ri;
                    }
                }
                c
            });
            b.terminal_cost = Arc::new(move |z: &[Ad]| -&z[p] * tw);
        }
        if let Some(x0) = &self.simulation.initial_state {
            b.x0 = x0.clone();
        }
        if let Some(s) = &self.simulation.stop {
            b.stop = Some((s.state, s.target));
        }
        Ok(b)
    }

    /// Back-off from `primary.delta`, the referenced tightening report, or zero.
    pub fn primary_delta(&self) -> Result<Vec<f64>> {
        if let Some(d) = &self.primary.delta {
            return Ok(d.clone());
        }
        if let Some(path) = &self.primary.calibration {
            let text = std::fs::read_to_string(path)
                .map_err(|e| cfg_err("primary.calibration", format!("{}: {e}", path.display())))?;
            let report: TighteningReport = serde_json::from_str(&text)?;
            return Ok(report.delta);
        }
        Ok(vec![0.0; self.benchmark()?.model.n_c()])
    }

    pub fn ancillary_config(&self) -> AncillaryConfig {
        let mut a = AncillaryConfig::new(self.ancillary.q.clone(), self.ancillary.r.clone());
        a.p = self.ancillary.p.clone();
        a.mode = self.ancillary.mode;
        a.sqp = self.sqp.clone();
        a
    }

    /// Builds one scheme; `delta` overrides every configured back-off.
    pub fn build_scheme(&self, spec: &SchemeSpec, delta: Option<&[f64]>) -> Result<Scheme> {
        let bench = self.benchmark()?;
        let delta = match (delta, &spec.delta) {
            (Some(d), _) => d.to_vec(),
            (None, Some(d)) => d.clone(),
            (None, None) => self.primary_delta()?,
        };
        let options = SchemeOptions {
            horizon: self.tree.horizon,
            robust_horizon: spec.robust_horizon.unwrap_or(self.tree.robust_horizon),
            include_nominal: self.tree.values_per_dim == 3,
            multi_stage_dims: spec.dims.clone(),
            delta,
        };
        let pair = make_pair(spec.kind, &bench, self.realizations(spec)?, &options, &self.ancillary_config(), &self.sqp)?;
        Ok(Scheme {
            name: spec.name.clone(),
            pair,
            estimator: self.estimator.clone(),
        })
    }

    pub fn build_schemes(&self) -> Result<Vec<Scheme>> {
        self.schemes.iter().map(|s| self.build_scheme(s, None)).collect()
    }

    /// The scheme named `name`, or the first TEMS scheme.
    pub fn scheme_spec(&self, name: Option<&str>) -> Result<&SchemeSpec> {
        match name {
            Some(n) => self
                .schemes
                .iter()
                .find(|s| s.name == n)
                .ok_or_else(|| Error::InvalidArgument(format!("no scheme named `{n}`"))),
            None => self
                .schemes
                .iter()
                .find(|s| s.kind == SchemeKind::Tems)
                .or(self.schemes.first())
                .ok_or_else(|| Error::InvalidArgument("no schemes configured".into())),
        }
    }

    /// Plant template at the nominal parameters.
    pub fn plant(&self) -> Result<PlantSim> {
        let b = self.benchmark()?;
        Ok(PlantSim {
            parameters: b.uncertainty.nominal(),
            uncertainty: b.uncertainty,
            model: b.model,
            law: self.simulation.grid.law,
            max_steps: self.simulation.max_steps,
            stop: b.stop,
            x0: b.x0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeInfo {
    pub scenarios: usize,
    pub state_nodes: usize,
    pub naive_full_branching: u64,
    pub horizon: usize,
    pub robust_horizon: usize,
    pub realizations: usize,
}

impl TreeInfo {
    pub fn line(&self) -> String {
        format!(
            "scenarios: {}, state nodes: {}, naive full-branching: {}",
            self.scenarios, self.state_nodes, self.naive_full_branching
        )
    }
}
