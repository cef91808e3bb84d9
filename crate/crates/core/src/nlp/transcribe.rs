//! Multiple-shooting transcription of a scenario-tree optimal control
//! problem. Inputs live on tree nodes, so scenarios sharing a node share the
//! input variable.

use std::sync::Arc;

use crate::ad::{self, Ad};
use crate::error::{check_dim, Error, Result};
use crate::model::{Interval, ModelSpec};
use crate::scenario_tree::ScenarioTree;

use super::problem::{Element, NlpProblem};

/// Stage cost `l(node, z, v, v_prev)`, weighted by the node weight.
pub type NodeCostFn = Arc<dyn Fn(usize, &[Ad], &[Ad], &[Ad]) -> Ad + Send + Sync>;
/// Terminal cost `V_f(leaf, z)`.
pub type LeafCostFn = Arc<dyn Fn(usize, &[Ad]) -> Ad + Send + Sync>;

#[derive(Clone)]
pub struct TreeOcp {
    pub stage_cost: NodeCostFn,
    pub terminal_cost: Option<LeafCostFn>,
    /// Bounds on non-root, non-leaf states.
    pub state_box: Vec<Interval>,
    pub input_box: Vec<Interval>,
    /// Bounds on leaf states.
    pub terminal_box: Vec<Interval>,
    /// Add the model's path constraints `g_i + delta_i <= 0`.
    pub path_constraints: bool,
    pub delta: Vec<f64>,
    /// Also constrain the (pinned) root state.
    pub constrain_root: bool,
    pub initial_state: Vec<f64>,
    /// Input applied before the root; `None` makes the root move free.
    pub previous_input: Option<Vec<f64>>,
}

impl TreeOcp {
    /// Bounds default to the model's sets, no tightening.
    pub fn new(model: &ModelSpec, stage_cost: NodeCostFn, initial_state: Vec<f64>) -> Self {
        TreeOcp {
            stage_cost,
            terminal_cost: None,
            state_box: model.state_bounds.clone(),
            input_box: model.input_bounds.clone(),
            terminal_box: model.state_bounds.clone(),
            path_constraints: true,
            delta: vec![0.0; model.n_c()],
            constrain_root: false,
            initial_state,
            previous_input: None,
        }
    }
}

/// Where each node's blocks sit in the decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VariableLayout {
    pub n_x: usize,
    pub n_u: usize,
    pub n_vars: usize,
    state_offset: Vec<usize>,
    input_offset: Vec<Option<usize>>,
    /// `(node, constraint index)` for each inequality row.
    pub ineq_rows: Vec<(usize, usize)>,
}

impl VariableLayout {
    pub fn new(tree: &ScenarioTree, n_x: usize, n_u: usize) -> Self {
        let mut off = 0;
        let mut state_offset = Vec::with_capacity(tree.num_nodes());
        for _ in 0..tree.num_nodes() {
            state_offset.push(off);
            off += n_x;
        }
        let mut input_offset = Vec::with_capacity(tree.num_nodes());
        for id in 0..tree.num_nodes() {
            if tree.is_leaf(id) {
                input_offset.push(None);
            } else {
                input_offset.push(Some(off));
                off += n_u;
            }
        }
        VariableLayout {
            n_x,
            n_u,
            n_vars: off,
            state_offset,
            input_offset,
            ineq_rows: Vec::new(),
        }
    }

    pub fn state(&self, node: usize) -> std::ops::Range<usize> {
        let o = self.state_offset[node];
        o..o + self.n_x
    }

    /// Input block of a non-leaf node.
    pub fn input(&self, node: usize) -> Option<std::ops::Range<usize>> {
        self.input_offset[node].map(|o| o..o + self.n_u)
    }

    pub fn input_of_scenario(&self, tree: &ScenarioTree, scenario: usize, stage: usize) -> Option<std::ops::Range<usize>> {
        if stage >= tree.horizon {
            return None;
        }
        self.input(tree.scenario_node(scenario, stage))
    }

    pub fn state_values<'a>(&self, x: &'a [f64], node: usize) -> &'a [f64] {
        &x[self.state(node)]
    }

    pub fn input_values<'a>(&self, x: &'a [f64], node: usize) -> Option<&'a [f64]> {
        self.input(node).map(|r| &x[r])
    }
}

fn contiguous(r: std::ops::Range<usize>) -> Vec<usize> {
    r.collect()
}

pub fn transcribe(tree: &ScenarioTree, model: &ModelSpec, ocp: &TreeOcp) -> Result<(NlpProblem, VariableLayout)> {
    let (n_x, n_u, n_d) = (model.n_x, model.n_u, model.n_d);
    check_dim("initial state", n_x, ocp.initial_state.len())?;
    check_dim("state box", n_x, ocp.state_box.len())?;
    check_dim("terminal box", n_x, ocp.terminal_box.len())?;
    check_dim("input box", n_u, ocp.input_box.len())?;
    check_dim("tightening", model.n_c(), ocp.delta.len())?;
    if let Some(p) = &ocp.previous_input {
        check_dim("previous input", n_u, p.len())?;
    }
    if ocp.delta.iter().any(|d| !(*d >= 0.0)) {
        return Err(Error::InvalidArgument("tightening must be nonnegative".into()));
    }
    for (i, v) in tree.realizations.vectors.iter().enumerate() {
        if v.len() != n_d {
            return Err(Error::Dimension {
                what: format!("realization {i}"),
                expected: n_d,
                got: v.len(),
            });
        }
    }

    let mut layout = VariableLayout::new(tree, n_x, n_u);
    let mut p = NlpProblem::new(layout.n_vars);

    // Bounds and cold-start guess.
    for id in 0..tree.num_nodes() {
        let sr = layout.state(id);
        let bx = if id == tree.root() {
            None
        } else if tree.is_leaf(id) {
            Some(&ocp.terminal_box)
        } else {
            Some(&ocp.state_box)
        };
        for (i, vi) in sr.enumerate() {
            if let Some(b) = bx {
                p.lower[vi] = b[i].lo;
                p.upper[vi] = b[i].hi;
            }
            p.initial_guess[vi] = ocp.initial_state[i];
        }
        if let Some(ur) = layout.input(id) {
            for (i, vi) in ur.enumerate() {
                p.lower[vi] = ocp.input_box[i].lo;
                p.upper[vi] = ocp.input_box[i].hi;
                p.initial_guess[vi] = ocp.input_box[i].mid();
            }
        }
    }

    // Objective.
    for id in 0..tree.num_nodes() {
        let node = tree.node(id);
        if let Some(ur) = layout.input(id) {
            let w = node.weight;
            let cost = ocp.stage_cost.clone();
            let mut vars = contiguous(layout.state(id));
            vars.extend(ur);
            match (node.parent, &ocp.previous_input) {
                (Some(par), _) => {
                    vars.extend(layout.input(par).expect("parent has an input"));
                    p.objective.push(Element::scalar(vars, move |a| {
                        cost(id, &a[..n_x], &a[n_x..n_x + n_u], &a[n_x + n_u..]) * w
                    }));
                }
                (None, Some(prev)) => {
                    let prev = ad::constants(prev);
                    p.objective.push(Element::scalar(vars, move |a| {
                        cost(id, &a[..n_x], &a[n_x..n_x + n_u], &prev) * w
                    }));
                }
                (None, None) => {
                    p.objective.push(Element::scalar(vars, move |a| {
                        cost(id, &a[..n_x], &a[n_x..n_x + n_u], &a[n_x..n_x + n_u]) * w
                    }));
                }
            }
        } else if let Some(vf) = &ocp.terminal_cost {
            let vf = vf.clone();
            p.objective.push(Element::scalar(contiguous(layout.state(id)), move |a| vf(id, a)));
        }
    }

    // Root pin.
    let z0 = ocp.initial_state.clone();
    p.equalities.push(Element::new(contiguous(layout.state(tree.root())), n_x, move |a| {
        a.iter().zip(&z0).map(|(z, c)| z - *c).collect()
    }));

    // Dynamics, one block per edge.
    for id in 0..tree.num_nodes() {
        let node = tree.node(id);
        let Some(par) = node.parent else { continue };
        let r = node.realization.expect("non-root nodes carry a realization");
        let d = ad::constants(&tree.realizations.vectors[r]);
        let mut vars = contiguous(layout.state(id));
        vars.extend(layout.state(par));
        vars.extend(layout.input(par).expect("parent has an input"));
        let f = model.dynamics().clone();
        p.equalities.push(Element::new(vars, n_x, move |a| {
            let next = f(&a[n_x..2 * n_x], &a[2 * n_x..], &d);
            a[..n_x].iter().zip(next).map(|(z, fz)| z - &fz).collect()
        }));
    }

    // Path constraints g_i(z, v) + delta_i <= 0; leaves reuse the parent input.
    if ocp.path_constraints {
        for id in 0..tree.num_nodes() {
            if id == tree.root() && !ocp.constrain_root {
                continue;
            }
            let input_node = if tree.is_leaf(id) {
                tree.node(id).parent.expect("leaf below root")
            } else {
                id
            };
            for (ci, c) in model.constraints.iter().enumerate() {
                let mut vars = contiguous(layout.state(id));
                vars.extend(layout.input(input_node).expect("input node"));
                let g = c.g.clone();
                let delta = ocp.delta[ci];
                p.inequalities.push(Element::scalar(vars, move |a| g(&a[..n_x], &a[n_x..]) + delta));
                layout.ineq_rows.push((id, ci));
            }
        }
    }

    Ok((p, layout))
}

/// Forward-simulates the tree from the initial state with the node inputs
/// in `x`, overwriting the state blocks so the guess is dynamics-consistent.
pub fn simulate_guess(tree: &ScenarioTree, model: &ModelSpec, layout: &VariableLayout, x: &mut [f64]) -> Result<()> {
    for id in 0..tree.num_nodes() {
        let node = tree.node(id);
        let Some(par) = node.parent else { continue };
        let r = node.realization.expect("non-root nodes carry a realization");
        let zp = layout.state_values(x, par).to_vec();
        let vp = layout.input_values(x, par).expect("parent input").to_vec();
        let next = model.step(&zp, &vp, &tree.realizations.vectors[r])?;
        x[layout.state(id)].copy_from_slice(&next);
    }
    Ok(())
}
