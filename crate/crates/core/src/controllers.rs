//! Primary (scenario-tree) and ancillary (tracking) controllers, constraint
//! tightening and the baseline schemes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ad::Ad;
use crate::error::{check_dim, Error, Result};
use crate::model::{Benchmark, Constraint, Interval, ModelSpec, StageCostFn, TerminalCostFn};
use crate::nlp::{
    simulate_guess, transcribe, LeafCostFn, NodeCostFn, SolveStatus, SqpSettings, SqpSolver, TreeOcp, VariableLayout,
};
use crate::scenario_tree::{build_tree, sample_box_values, sample_box_vertices, RealizationSet, ScenarioTree};

/// `[a, b]` tightened by `(lo, hi)` to `[a + lo, b - hi]`.
pub fn tighten_interval(bound: Interval, delta: (f64, f64)) -> Result<Interval> {
    if !(delta.0 >= 0.0 && delta.1 >= 0.0) {
        return Err(Error::InvalidArgument(format!("tightening {delta:?} must be nonnegative")));
    }
    let t = Interval::new(bound.lo + delta.0, bound.hi - delta.1);
    if t.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "tightening [{}, {}] by {delta:?} leaves an empty interval",
            bound.lo, bound.hi
        )));
    }
    Ok(t)
}

pub fn tighten_intervals(bounds: &[Interval], delta: &[(f64, f64)]) -> Result<Vec<Interval>> {
    check_dim("interval tightening", bounds.len(), delta.len())?;
    bounds.iter().zip(delta).map(|(b, d)| tighten_interval(*b, *d)).collect()
}

/// `g_i` becomes `g_i + delta_i`.
pub fn tighten_constraints(constraints: &[Constraint], delta: &[f64]) -> Result<Vec<Constraint>> {
    check_dim("constraint tightening", constraints.len(), delta.len())?;
    if delta.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidArgument("tightening must be nonnegative".into()));
    }
    Ok(constraints
        .iter()
        .zip(delta)
        .map(|(c, &d)| {
            let g = c.g.clone();
            Constraint {
                name: c.name.clone(),
                g: Arc::new(move |x: &[Ad], u: &[Ad]| g(x, u) + d),
            }
        })
        .collect())
}

/// Optimal states and inputs on every node of a tree.
#[derive(Clone, Debug)]
pub struct TreeTrajectory {
    pub tree: Arc<ScenarioTree>,
    pub states: Vec<Vec<f64>>,
    /// `None` on leaves.
    pub inputs: Vec<Option<Vec<f64>>>,
    pub objective: f64,
}

impl TreeTrajectory {
    pub fn new(tree: Arc<ScenarioTree>, states: Vec<Vec<f64>>, inputs: Vec<Option<Vec<f64>>>, objective: f64) -> Result<Self> {
        check_dim("trajectory states", tree.num_nodes(), states.len())?;
        check_dim("trajectory inputs", tree.num_nodes(), inputs.len())?;
        for (id, u) in inputs.iter().enumerate() {
            if u.is_some() == tree.is_leaf(id) {
                return Err(Error::InvalidArgument(format!("node {id} input presence does not match the tree")));
            }
        }
        Ok(TreeTrajectory {
            tree,
            states,
            inputs,
            objective,
        })
    }

    fn from_solution(tree: Arc<ScenarioTree>, layout: &VariableLayout, x: &[f64], objective: f64) -> Self {
        let states = (0..tree.num_nodes()).map(|i| layout.state_values(x, i).to_vec()).collect();
        let inputs = (0..tree.num_nodes()).map(|i| layout.input_values(x, i).map(<[f64]>::to_vec)).collect();
        TreeTrajectory {
            tree,
            states,
            inputs,
            objective,
        }
    }

    pub fn root_state(&self) -> &[f64] {
        &self.states[self.tree.root()]
    }

    pub fn root_input(&self) -> &[f64] {
        self.inputs[self.tree.root()].as_deref().expect("root carries an input")
    }

    /// States along scenario `p`, stages `0..=N`.
    pub fn scenario_states(&self, p: usize) -> Vec<&[f64]> {
        self.tree.scenario_path(p).iter().map(|&n| self.states[n].as_slice()).collect()
    }

    /// Largest `|child - f(parent, input, d_r)|` over all edges.
    pub fn dynamics_residual(&self, model: &ModelSpec) -> Result<f64> {
        let mut worst = 0.0f64;
        for id in 0..self.tree.num_nodes() {
            let node = self.tree.node(id);
            let (Some(par), Some(r)) = (node.parent, node.realization) else { continue };
            let u = self.inputs[par].as_ref().expect("parent input");
            let next = model.step(&self.states[par], u, &self.tree.realizations.vectors[r])?;
            for (a, b) in next.iter().zip(&self.states[id]) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok(worst)
    }
}

/// Solver outcome attached to every controller call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub max_violation: f64,
}

#[derive(Clone)]
pub struct PrimaryConfig {
    pub tree: Arc<ScenarioTree>,
    pub stage_cost: StageCostFn,
    pub terminal_cost: Option<TerminalCostFn>,
    /// Tightened state set Z.
    pub state_box: Vec<Interval>,
    /// Tightened input set V.
    pub input_box: Vec<Interval>,
    pub terminal_box: Vec<Interval>,
    /// Back-off on the model's path constraints.
    pub delta: Vec<f64>,
    pub sqp: SqpSettings,
}

impl std::fmt::Debug for PrimaryConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PrimaryConfig")
            .field("scenarios", &self.tree.num_scenarios())
            .field("horizon", &self.tree.horizon)
            .field("state_box", &self.state_box)
            .field("input_box", &self.input_box)
            .field("terminal_box", &self.terminal_box)
            .field("delta", &self.delta)
            .finish()
    }
}

impl PrimaryConfig {
    /// Untightened sets with `Z_f = Z`.
    pub fn new(model: &ModelSpec, tree: ScenarioTree, stage_cost: StageCostFn) -> Self {
        PrimaryConfig {
            tree: Arc::new(tree),
            stage_cost,
            terminal_cost: None,
            state_box: model.state_bounds.clone(),
            input_box: model.input_bounds.clone(),
            terminal_box: model.state_bounds.clone(),
            delta: vec![0.0; model.n_c()],
            sqp: SqpSettings::default(),
        }
    }

    /// Checks `Z_f ⊆ Z ⊆ X`, `V ⊆ U` and dimensions.
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        check_dim("state box", model.n_x, self.state_box.len())?;
        check_dim("terminal box", model.n_x, self.terminal_box.len())?;
        check_dim("input box", model.n_u, self.input_box.len())?;
        check_dim("tightening", model.n_c(), self.delta.len())?;
        let subset = |inner: &[Interval], outer: &[Interval], what: &str| {
            if inner.iter().zip(outer).all(|(i, o)| o.contains_interval(i)) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{what} is not contained in its outer set")))
            }
        };
        subset(&self.state_box, &model.state_bounds, "state box Z")?;
        subset(&self.terminal_box, &self.state_box, "terminal box Z_f")?;
        subset(&self.input_box, &model.input_bounds, "input box V")?;
        if self.delta.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidArgument("tightening must be nonnegative".into()));
        }
        for r in &self.tree.realizations.vectors {
            check_dim("realization", model.n_d, r.len())?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PrimaryResult {
    pub trajectory: TreeTrajectory,
    pub report: SolveReport,
}

/// Multi-stage controller on the primary system with warm-start memory.
#[derive(Clone, Debug)]
pub struct PrimaryController {
    pub config: PrimaryConfig,
    solver: SqpSolver,
    last: Option<Vec<f64>>,
}

impl PrimaryController {
    pub fn new(config: PrimaryConfig, model: &ModelSpec) -> Result<Self> {
        config.validate(model)?;
        Ok(PrimaryController {
            solver: SqpSolver::new(config.sqp.clone()),
            config,
            last: None,
        })
    }

    pub fn reset(&mut self) {
        self.solver.reset();
        self.last = None;
    }

    pub fn solve(&mut self, model: &ModelSpec, z0: &[f64], previous_input: Option<&[f64]>) -> Result<PrimaryResult> {
        check_dim("primary initial state", model.n_x, z0.len())?;
        if z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("primary initial state".into()));
        }
        let tree = self.config.tree.clone();
        let cost = self.config.stage_cost.clone();
        let mut ocp = TreeOcp::new(model, Arc::new(move |_, z, v, vp| cost(z, v, vp)), z0.to_vec());
        ocp.terminal_cost = self
            .config
            .terminal_cost
            .clone()
            .map(|vf| -> LeafCostFn { Arc::new(move |_, z| vf(z)) });
        ocp.state_box = self.config.state_box.clone();
        ocp.input_box = self.config.input_box.clone();
        ocp.terminal_box = self.config.terminal_box.clone();
        ocp.delta = self.config.delta.clone();
        ocp.previous_input = previous_input.map(<[f64]>::to_vec);
        let (mut problem, layout) = transcribe(&tree, model, &ocp)?;

        let mut guess = match &self.last {
            Some(old) if old.len() == problem.n_vars => shift_guess(&tree, &layout, old),
            _ => problem.initial_guess.clone(),
        };
        guess[layout.state(tree.root())].copy_from_slice(z0);
        simulate_guess(&tree, model, &layout, &mut guess)?;
        problem.initial_guess = guess;

        let sol = self.solver.solve(&problem)?;
        let report = SolveReport {
            status: sol.status,
            iterations: sol.iterations,
            kkt_residual: sol.kkt_residual,
            max_violation: sol.max_violation,
        };
        match sol.status {
            SolveStatus::Infeasible => {
                self.last = None;
                self.solver.reset();
                return Err(Error::Infeasible(format!(
                    "primary problem from z0 = {z0:?}: residual violation {:.3e} after {} iterations{}",
                    sol.max_violation,
                    sol.iterations,
                    sol.message.map(|m| format!(" ({m})")).unwrap_or_default()
                )));
            }
            SolveStatus::MaxIter => log::debug!(
                "primary solve hit the iteration limit (kkt residual {:.3e})",
                sol.kkt_residual
            ),
            SolveStatus::Optimal => {}
        }
        self.last = Some(sol.x.clone());
        Ok(PrimaryResult {
            trajectory: TreeTrajectory::from_solution(tree, &layout, &sol.x, sol.objective),
            report,
        })
    }
}

/// Moves every scenario one stage forward, repeating the last stage.
fn shift_guess(tree: &ScenarioTree, layout: &VariableLayout, old: &[f64]) -> Vec<f64> {
    let n = tree.horizon;
    let mut x = old.to_vec();
    for id in 0..tree.num_nodes() {
        let k = tree.node(id).stage;
        let p = tree.first_scenario_through(id);
        let src = tree.scenario_node(p, (k + 1).min(n));
        x[layout.state(id)].copy_from_slice(layout.state_values(old, src));
        if let Some(r) = layout.input(id) {
            let src = tree.scenario_node(p, (k + 1).min(n - 1));
            x[r].copy_from_slice(layout.input_values(old, src).expect("input node"));
        }
    }
    x
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AncillaryMode {
    #[default]
    FullTree,
    NominalOnly,
}

/// Tracking controller weights. Only input bounds are enforced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AncillaryConfig {
    pub mode: AncillaryMode,
    /// Diagonal of Q.
    pub q: Vec<f64>,
    /// Diagonal of R.
    pub r: Vec<f64>,
    /// Diagonal of the terminal weight; `None` uses Q.
    pub p: Option<Vec<f64>>,
    /// Node weights; `None` uses the reference tree's weights.
    pub weights: Option<Vec<f64>>,
    pub sqp: SqpSettings,
}

impl AncillaryConfig {
    pub fn new(q: Vec<f64>, r: Vec<f64>) -> Self {
        AncillaryConfig {
            mode: AncillaryMode::FullTree,
            q,
            r,
            p: None,
            weights: None,
            sqp: SqpSettings::default(),
        }
    }

    pub fn terminal_weight(&self) -> &[f64] {
        self.p.as_deref().unwrap_or(&self.q)
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        check_dim("ancillary Q", model.n_x, self.q.len())?;
        check_dim("ancillary R", model.n_u, self.r.len())?;
        check_dim("ancillary P", model.n_x, self.terminal_weight().len())?;
        if self.q.iter().chain(&self.r).chain(self.terminal_weight()).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("ancillary weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AncillaryResult {
    /// Input to apply, the root input of the tracking solution.
    pub input: Vec<f64>,
    pub trajectory: TreeTrajectory,
    pub report: SolveReport,
}

#[derive(Clone, Debug)]
pub struct AncillaryController {
    pub config: AncillaryConfig,
    solver: SqpSolver,
}

impl AncillaryController {
    pub fn new(config: AncillaryConfig, model: &ModelSpec) -> Result<Self> {
        config.validate(model)?;
        Ok(AncillaryController {
            solver: SqpSolver::new(config.sqp.clone()),
            config,
        })
    }

    pub fn reset(&mut self) {
        self.solver.reset();
    }

    pub fn solve(&mut self, model: &ModelSpec, x0: &[f64], reference: &TreeTrajectory) -> Result<AncillaryResult> {
        check_dim("ancillary initial state", model.n_x, x0.len())?;
        if x0 == reference.root_state() {
            // The reference is feasible with zero tracking cost, which is the
            // global minimum of a nonnegative objective.
            let input = reference
                .root_input()
                .iter()
                .zip(&model.input_bounds)
                .map(|(u, b)| b.clamp(*u))
                .collect();
            return Ok(AncillaryResult {
                input,
                trajectory: reference.clone(),
                report: SolveReport {
                    status: SolveStatus::Optimal,
                    iterations: 0,
                    kkt_residual: 0.0,
                    max_violation: 0.0,
                },
            });
        }
        let (tree, ref_node): (Arc<ScenarioTree>, Vec<usize>) = match self.config.mode {
            AncillaryMode::FullTree => (reference.tree.clone(), (0..reference.tree.num_nodes()).collect()),
            AncillaryMode::NominalOnly => {
                let rt = &reference.tree;
                let p = rt.nominal_scenario().ok_or_else(|| {
                    Error::InvalidArgument("nominal-only tracking needs a nominal scenario in the reference".into())
                })?;
                let nom = rt.realizations.vectors[rt.realizations.nominal_index.expect("nominal scenario")].clone();
                let path = build_tree(RealizationSet::new(vec![nom], Some(0))?, rt.horizon, 1)?;
                (Arc::new(path), rt.scenario_path(p).to_vec())
            }
        };
        let mut tree_owned;
        let tree = match &self.config.weights {
            Some(w) => {
                tree_owned = (*tree).clone();
                tree_owned.set_weights(w)?;
                Arc::new(tree_owned)
            }
            None => tree,
        };

        let z_ref: Arc<Vec<Vec<f64>>> = Arc::new(ref_node.iter().map(|&n| reference.states[n].clone()).collect());
        let v_ref: Arc<Vec<Option<Vec<f64>>>> = Arc::new(ref_node.iter().map(|&n| reference.inputs[n].clone()).collect());
        let (q, r, pw) = (self.config.q.clone(), self.config.r.clone(), self.config.terminal_weight().to_vec());
        let (zs, vs) = (z_ref.clone(), v_ref.clone());
        let stage: NodeCostFn = Arc::new(move |node, x, u, _| {
            let z = &zs[node];
            let v = vs[node].as_ref().expect("reference input on non-leaf");
            let mut c = Ad::constant(0.0);
            for i in 0..x.len() {
                if q[i] != 0.0 {
                    c += (&x[i] - z[i]).square() * q[i];
                }
            }
            for i in 0..u.len() {
                if r[i] != 0.0 {
                    c += (&u[i] - v[i]).square() * r[i];
                }
            }
            c
        });
        let zs = z_ref.clone();
        let terminal: LeafCostFn = Arc::new(move |node, x| {
            let z = &zs[node];
            let mut c = Ad::constant(0.0);
            for i in 0..x.len() {
                if pw[i] != 0.0 {
                    c += (&x[i] - z[i]).square() * pw[i];
                }
            }
            c
        });

        let mut ocp = TreeOcp::new(model, stage, x0.to_vec());
        ocp.terminal_cost = Some(terminal);
        ocp.state_box = vec![Interval::UNBOUNDED; model.n_x];
        ocp.terminal_box = vec![Interval::UNBOUNDED; model.n_x];
        ocp.path_constraints = false;
        let (mut problem, layout) = transcribe(&tree, model, &ocp)?;

        let mut guess = problem.initial_guess.clone();
        for id in 0..tree.num_nodes() {
            if let (Some(range), Some(v)) = (layout.input(id), &v_ref[id]) {
                for (k, vi) in range.enumerate() {
                    guess[vi] = ocp.input_box[k].clamp(v[k]);
                }
            }
        }
        guess[layout.state(tree.root())].copy_from_slice(x0);
        simulate_guess(&tree, model, &layout, &mut guess)?;
        problem.initial_guess = guess;

        let sol = self.solver.solve(&problem)?;
        if sol.status != SolveStatus::Optimal {
            log::debug!(
                "ancillary solve ended with {:?} (kkt residual {:.3e})",
                sol.status,
                sol.kkt_residual
            );
        }
        let trajectory = TreeTrajectory::from_solution(tree, &layout, &sol.x, sol.objective);
        // Clip round-off so the applied input is inside U exactly.
        let input = trajectory
            .root_input()
            .iter()
            .zip(&model.input_bounds)
            .map(|(u, b)| b.clamp(*u))
            .collect();
        Ok(AncillaryResult {
            input,
            trajectory,
            report: SolveReport {
                status: sol.status,
                iterations: sol.iterations,
                kkt_residual: sol.kkt_residual,
                max_violation: sol.max_violation,
            },
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Tems,
    MultiStage,
    Tube,
}

impl SchemeKind {
    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::Tems => "tems",
            SchemeKind::MultiStage => "multi_stage",
            SchemeKind::Tube => "tube",
        }
    }
}

/// Tree and tightening choices for building a scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeOptions {
    pub horizon: usize,
    pub robust_horizon: usize,
    /// Sample `{lower, nominal, upper}` rather than only the vertices.
    #[serde(default = "yes")]
    pub include_nominal: bool,
    /// Dimensions branched by the multi-stage baseline; `None` means all.
    #[serde(default)]
    pub multi_stage_dims: Option<Vec<usize>>,
    /// Back-off used by the two-layer schemes.
    #[serde(default)]
    pub delta: Vec<f64>,
}

fn yes() -> bool {
    true
}

/// A primary controller and, for two-layer schemes, an ancillary one.
#[derive(Clone, Debug)]
pub struct ControllerPair {
    pub kind: SchemeKind,
    pub primary: PrimaryConfig,
    pub ancillary: Option<AncillaryConfig>,
}

impl ControllerPair {
    pub fn scenario_count(&self) -> usize {
        self.primary.tree.num_scenarios()
    }
}

/// Builds TEMS or one of its two degenerate baselines.
///
/// * `tems`: tree over the significant uncertainties, tightened, with the ancillary layer.
/// * `multi_stage`: tree over `multi_stage_dims` (all by default), untightened, no ancillary layer.
/// * `tube`: nominal single-scenario primary, tightened, with the ancillary layer.
pub fn make_baseline(
    kind: SchemeKind,
    bench: &Benchmark,
    options: &SchemeOptions,
    ancillary: &AncillaryConfig,
    sqp: &SqpSettings,
) -> Result<ControllerPair> {
    let decl = &bench.uncertainty;
    let realizations = match kind {
        SchemeKind::Tems => sample_box_vertices(decl, options.include_nominal)?,
        SchemeKind::MultiStage => {
            let dims = options
                .multi_stage_dims
                .clone()
                .unwrap_or_else(|| (0..decl.n_d()).collect());
            sample_box_values(decl, &dims, options.include_nominal)?
        }
        SchemeKind::Tube => RealizationSet::nominal_only(decl),
    };
    make_pair(kind, bench, realizations, options, ancillary, sqp)
}

/// Builds a scheme over an explicit realization set.
pub fn make_pair(
    kind: SchemeKind,
    bench: &Benchmark,
    realizations: RealizationSet,
    options: &SchemeOptions,
    ancillary: &AncillaryConfig,
    sqp: &SqpSettings,
) -> Result<ControllerPair> {
    let robust = if realizations.len() == 1 { 1 } else { options.robust_horizon };
    let tree = build_tree(realizations, options.horizon, robust.min(options.horizon))?;
    let mut primary = PrimaryConfig::new(&bench.model, tree, bench.stage_cost.clone());
    primary.terminal_cost = Some(bench.terminal_cost.clone());
    primary.sqp = sqp.clone();
    let two_layer = kind != SchemeKind::MultiStage;
    if two_layer && !options.delta.is_empty() {
        check_dim("scheme tightening", bench.model.n_c(), options.delta.len())?;
        primary.delta = options.delta.clone();
    }
    primary.validate(&bench.model)?;
    let ancillary = if two_layer {
        let mut a = ancillary.clone();
        a.sqp = sqp.clone();
        a.validate(&bench.model)?;
        Some(a)
    } else {
        None
    };
    Ok(ControllerPair {
        kind,
        primary,
        ancillary,
    })
}
