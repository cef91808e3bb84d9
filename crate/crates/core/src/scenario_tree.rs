//! Scenario trees over a finite set of uncertainty realizations.
//!
//! Nodes are numbered breadth-first; the children of a node follow the order
//! of the realization list. Up to the robust horizon every node branches
//! into all `s` realizations; afterwards each node has one child that keeps
//! the realization of its parent edge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UncertaintyDecl;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealizationSet {
    pub vectors: Vec<Vec<f64>>,
    /// Position of the nominal vector, if it is part of the set.
    pub nominal_index: Option<usize>,
}

impl RealizationSet {
    pub fn new(vectors: Vec<Vec<f64>>, nominal_index: Option<usize>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::InvalidArgument("realization set is empty".into()));
        }
        let n = vectors[0].len();
        if vectors.iter().any(|v| v.len() != n) {
            return Err(Error::InvalidArgument("realizations differ in length".into()));
        }
        if let Some(i) = nominal_index {
            if i >= vectors.len() {
                return Err(Error::InvalidArgument(format!("nominal index {i} out of range")));
            }
        }
        Ok(RealizationSet {
            vectors,
            nominal_index,
        })
    }

    /// The single-element set `{d_nom}`.
    pub fn nominal_only(decl: &UncertaintyDecl) -> Self {
        RealizationSet {
            vectors: vec![decl.nominal()],
            nominal_index: Some(0),
        }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn within(&self, decl: &UncertaintyDecl) -> bool {
        self.vectors.iter().all(|v| decl.contains(v))
    }
}

/// Samples `{lower, nominal, upper}` (or `{lower, upper}`) of every
/// significant dimension and takes the Cartesian product, holding the other
/// dimensions at nominal.
pub fn sample_box_vertices(decl: &UncertaintyDecl, include_nominal: bool) -> Result<RealizationSet> {
    let dims = decl.significant_indices();
    if dims.is_empty() {
        return Err(Error::InvalidArgument(
            "scenario sampling needs at least one significant uncertainty".into(),
        ));
    }
    sample_box_values(decl, &dims, include_nominal)
}

/// Same as [`sample_box_vertices`] but branching on an explicit list of
/// dimensions, which may include non-significant ones.
pub fn sample_box_values(
    decl: &UncertaintyDecl,
    dims: &[usize],
    include_nominal: bool,
) -> Result<RealizationSet> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no dimensions to branch on".into()));
    }
    if let Some(&bad) = dims.iter().find(|&&i| i >= decl.n_d()) {
        return Err(Error::InvalidArgument(format!("uncertainty index {bad} out of range")));
    }
    let levels: Vec<Vec<f64>> = dims
        .iter()
        .map(|&i| {
            let p = &decl.params[i];
            if include_nominal {
                vec![p.lower, p.nominal, p.upper]
            } else {
                vec![p.lower, p.upper]
            }
        })
        .collect();
    sample_levels(decl, dims, &levels)
}

/// Cartesian product of explicit per-dimension `levels` over `dims`, other
/// dimensions at nominal. Duplicate vectors are dropped.
pub fn sample_levels(decl: &UncertaintyDecl, dims: &[usize], levels: &[Vec<f64>]) -> Result<RealizationSet> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("no dimensions to branch on".into()));
    }
    if let Some(&bad) = dims.iter().find(|&&i| i >= decl.n_d()) {
        return Err(Error::InvalidArgument(format!("uncertainty index {bad} out of range")));
    }
    if dims.len() != levels.len() || levels.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every branched dimension needs at least one level".into()));
    }
    for (&i, vals) in dims.iter().zip(levels) {
        let p = &decl.params[i];
        if let Some(v) = vals.iter().find(|&&v| !(p.lower <= v && v <= p.upper)) {
            return Err(Error::InvalidArgument(format!(
                "level {v} of `{}` outside [{}, {}]",
                p.name, p.lower, p.upper
            )));
        }
    }

    let nominal = decl.nominal();
    let mut vectors: Vec<Vec<f64>> = vec![nominal.clone()];
    for (&dim, vals) in dims.iter().zip(levels) {
        vectors = vectors
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
    let mut unique: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        if !unique.contains(&v) {
            unique.push(v);
        }
    }
    let nominal_index = unique.iter().position(|v| *v == nominal);
    RealizationSet::new(unique, nominal_index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub stage: usize,
    /// Position within its stage (0-based).
    pub index_in_stage: usize,
    pub parent: Option<usize>,
    /// Realization applied on the edge from the parent.
    pub realization: Option<usize>,
    pub weight: f64,
    pub children: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTree {
    pub horizon: usize,
    pub robust_horizon: usize,
    pub realizations: RealizationSet,
    nodes: Vec<Node>,
    stage_start: Vec<usize>,
    leaves: Vec<usize>,
    /// Node ids along each scenario, root first.
    paths: Vec<Vec<usize>>,
}

pub fn build_tree(realizations: RealizationSet, horizon: usize, robust_horizon: usize) -> Result<ScenarioTree> {
    if robust_horizon < 1 || robust_horizon > horizon {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= robust horizon <= horizon, got N_R = {robust_horizon}, N = {horizon}"
        )));
    }
    if realizations.is_empty() {
        return Err(Error::InvalidArgument("realization set is empty".into()));
    }
    let s = realizations.len();
    let mut nodes = vec![Node {
        stage: 0,
        index_in_stage: 0,
        parent: None,
        realization: None,
        weight: 1.0,
        children: Vec::new(),
    }];
    let mut stage_start = vec![0, 1];
    for k in 0..horizon {
        let (lo, hi) = (stage_start[k], stage_start[k + 1]);
        let mut idx = 0;
        for parent in lo..hi {
            let rs: Vec<usize> = if k < robust_horizon {
                (0..s).collect()
            } else {
                vec![nodes[parent].realization.expect("non-root node has a realization")]
            };
            for r in rs {
                let id = nodes.len();
                nodes.push(Node {
                    stage: k + 1,
                    index_in_stage: idx,
                    parent: Some(parent),
                    realization: Some(r),
                    weight: 0.0,
                    children: Vec::new(),
                });
                nodes[parent].children.push(id);
                idx += 1;
            }
        }
        stage_start.push(nodes.len());
    }
    let leaves: Vec<usize> = (stage_start[horizon]..stage_start[horizon + 1]).collect();
    let paths = leaves
        .iter()
        .map(|&leaf| {
            let mut path = vec![leaf];
            let mut cur = leaf;
            while let Some(p) = nodes[cur].parent {
                path.push(p);
                cur = p;
            }
            path.reverse();
            path
        })
        .collect();
    let mut tree = ScenarioTree {
        horizon,
        robust_horizon,
        realizations,
        nodes,
        stage_start,
        leaves,
        paths,
    };
    let w = default_weights(&tree);
    tree.set_weights(&w)?;
    Ok(tree)
}

/// Leaf-uniform weights: the share of scenarios passing through each node.
pub fn default_weights(tree: &ScenarioTree) -> Vec<f64> {
    let total = tree.leaves.len() as f64;
    let mut count = vec![0usize; tree.nodes.len()];
    for path in &tree.paths {
        for &n in path {
            count[n] += 1;
        }
    }
    count.iter().map(|&c| c as f64 / total).collect()
}

/// Weights from per-realization probabilities: product of the probabilities
/// on the branching edges leading to each node.
pub fn weights_from_probabilities(tree: &ScenarioTree, probs: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != tree.num_realizations() {
        return Err(Error::Dimension {
            what: "realization probabilities".into(),
            expected: tree.num_realizations(),
            got: probs.len(),
        });
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(
            "realization probabilities must be nonnegative and sum to 1".into(),
        ));
    }
    let mut w = vec![0.0; tree.nodes.len()];
    w[0] = 1.0;
    for id in 1..tree.nodes.len() {
        let n = &tree.nodes[id];
        let parent = n.parent.expect("non-root");
        let branching = n.stage <= tree.robust_horizon;
        let factor = if branching {
            probs[n.realization.expect("non-root")]
        } else {
            1.0
        };
        w[id] = w[parent] * factor;
    }
    Ok(w)
}

/// Number of scenarios of a fully branched tree: `values^(dims * N_R)`.
pub fn naive_scenario_count(values_per_dim: u64, n_dims: u64, robust_horizon: u64) -> Result<u64> {
    let exp = n_dims
        .checked_mul(robust_horizon)
        .and_then(|e| u32::try_from(e).ok())
        .ok_or_else(|| Error::Overflow("scenario count exponent".into()))?;
    values_per_dim
        .checked_pow(exp)
        .ok_or_else(|| Error::Overflow(format!("{values_per_dim}^{exp} scenarios")))
}

impl ScenarioTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_realizations(&self) -> usize {
        self.realizations.len()
    }

    /// Nodes carrying an input (every stage below the horizon).
    pub fn num_input_nodes(&self) -> usize {
        self.stage_start[self.horizon]
    }

    pub fn num_scenarios(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn stage_nodes(&self, k: usize) -> std::ops::Range<usize> {
        self.stage_start[k]..self.stage_start[k + 1]
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].stage == self.horizon
    }

    pub fn root(&self) -> usize {
        0
    }

    /// Node on scenario `p`'s path at stage `k`.
    pub fn scenario_node(&self, p: usize, k: usize) -> usize {
        self.paths[p][k]
    }

    pub fn scenario_path(&self, p: usize) -> &[usize] {
        &self.paths[p]
    }

    /// First scenario passing through `node`.
    pub fn first_scenario_through(&self, node: usize) -> usize {
        let stage = self.nodes[node].stage;
        self.paths
            .iter()
            .position(|p| p[stage] == node)
            .expect("every node lies on some scenario")
    }

    /// Scenario along which the nominal realization is applied on every edge.
    pub fn nominal_scenario(&self) -> Option<usize> {
        let nom = self.realizations.nominal_index?;
        self.paths.iter().position(|path| {
            path.iter()
                .skip(1)
                .all(|&n| self.nodes[n].realization == Some(nom))
        })
    }

    /// Child reached from `node` under realization `r`.
    pub fn child(&self, node: usize, r: usize) -> Result<usize> {
        let n = &self.nodes[node];
        if n.stage >= self.horizon || r >= self.num_realizations() {
            return Err(Error::UnavailableRealization {
                node,
                stage: n.stage,
                r,
            });
        }
        n.children
            .iter()
            .copied()
            .find(|&c| self.nodes[c].realization == Some(r))
            .ok_or(Error::UnavailableRealization {
                node,
                stage: n.stage,
                r,
            })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.weight).collect()
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.nodes.len() {
            return Err(Error::Dimension {
                what: "node weights".into(),
                expected: self.nodes.len(),
                got: w.len(),
            });
        }
        for (n, &wi) in self.nodes.iter_mut().zip(w) {
            n.weight = wi;
        }
        Ok(())
    }

    pub fn stage_weight_sums(&self) -> Vec<f64> {
        (0..=self.horizon)
            .map(|k| self.stage_nodes(k).map(|i| self.nodes[i].weight).sum())
            .collect()
    }

    pub fn summary(&self) -> TreeSummary {
        TreeSummary {
            horizon: self.horizon,
            robust_horizon: self.robust_horizon,
            realizations: self.num_realizations(),
            scenarios: self.num_scenarios(),
            state_nodes: self.num_nodes(),
            input_nodes: self.num_input_nodes(),
            leaf_weights: self.leaves.iter().map(|&l| self.nodes[l].weight).collect(),
            stage_weight_sums: self.stage_weight_sums(),
        }
    }
}

/// Closed-form node count `sum_{k=0..N} s^min(k, N_R)`.
pub fn state_node_count(s: usize, horizon: usize, robust_horizon: usize) -> usize {
    (0..=horizon).map(|k| s.pow(k.min(robust_horizon) as u32)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub horizon: usize,
    pub robust_horizon: usize,
    pub realizations: usize,
    pub scenarios: usize,
    pub state_nodes: usize,
    pub input_nodes: usize,
    pub leaf_weights: Vec<f64>,
    pub stage_weight_sums: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark_reactor, UncertainParam, UncertaintyKind};

    fn param(name: &str, nominal: f64, lower: f64, upper: f64, significant: bool) -> UncertainParam {
        UncertainParam {
            name: name.into(),
            nominal,
            lower,
            upper,
            significant,
            kind: UncertaintyKind::Parametric,
        }
    }

    /// Uncertainties of the polymerization example: enthalpy and rate
    /// constant significant, with the scenario values used for the tree.
    fn polymerization_decl() -> UncertaintyDecl {
        UncertaintyDecl::new(vec![
            param("dH_R", -950.0, -1235.0, -665.0, true),
            param("k0", 7.0, 4.9, 9.1, true),
            param("w_T", 0.0, -0.1, 0.1, false),
        ])
        .unwrap()
    }

    fn scalar_set(s: usize) -> RealizationSet {
        RealizationSet::new((0..s).map(|i| vec![i as f64]).collect(), Some(0)).unwrap()
    }

    #[test]
    fn vertices_with_nominal_two_significant() {
        let set = sample_box_vertices(&polymerization_decl(), true).unwrap();
        assert_eq!(set.len(), 9);
        let mut dh: Vec<f64> = set.vectors.iter().map(|v| v[0]).collect();
        dh.sort_by(f64::total_cmp);
        dh.dedup();
        assert_eq!(dh, vec![-1235.0, -950.0, -665.0]);
        let mut k0: Vec<f64> = set.vectors.iter().map(|v| v[1]).collect();
        k0.sort_by(f64::total_cmp);
        k0.dedup();
        assert_eq!(k0, vec![4.9, 7.0, 9.1]);
        assert!(set.vectors.iter().all(|v| v[2] == 0.0));
        assert_eq!(set.vectors[set.nominal_index.unwrap()], vec![-950.0, 7.0, 0.0]);
    }

    #[test]
    fn vertices_single_dimension() {
        let decl = UncertaintyDecl::new(vec![param("a", 1.0, 0.0, 2.0, true)]).unwrap();
        let set = sample_box_vertices(&decl, true).unwrap();
        assert_eq!(set.vectors, vec![vec![0.0], vec![1.0], vec![2.0]]);
        assert_eq!(set.nominal_index, Some(1));
    }

    #[test]
    fn vertices_without_nominal_are_corners() {
        let set = sample_box_vertices(&polymerization_decl(), false).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(set.nominal_index, None);
    }

    #[test]
    fn degenerate_intervals_deduplicate() {
        let decl = UncertaintyDecl::new(vec![param("a", 1.0, 1.0, 1.0, true), param("b", 0.0, -1.0, 1.0, true)]).unwrap();
        assert_eq!(sample_box_vertices(&decl, true).unwrap().len(), 3);
    }

    #[test]
    fn sampling_needs_a_significant_dimension() {
        let decl = UncertaintyDecl::new(vec![param("a", 1.0, 0.0, 2.0, false)]).unwrap();
        assert!(sample_box_vertices(&decl, true).is_err());
    }

    #[test]
    fn benchmark_scenario_counts() {
        let set = sample_box_vertices(&polymerization_decl(), true).unwrap();
        let tree = build_tree(set, 20, 1).unwrap();
        assert_eq!(tree.num_scenarios(), 9);
        assert_eq!(tree.num_nodes(), 181);

        let mut three = polymerization_decl();
        three.params[2].significant = true;
        let tree = build_tree(sample_box_vertices(&three, true).unwrap(), 20, 1).unwrap();
        assert_eq!(tree.num_scenarios(), 27);
    }

    #[test]
    fn nominal_only_tree_is_a_path() {
        let decl = benchmark_reactor().uncertainty;
        let tree = build_tree(RealizationSet::nominal_only(&decl), 7, 1).unwrap();
        assert_eq!(tree.num_scenarios(), 1);
        assert_eq!(tree.num_nodes(), 8);
        assert!(tree.weights().iter().all(|&w| w == 1.0));
        assert_eq!(tree.nominal_scenario(), Some(0));
    }

    #[test]
    fn invalid_horizons() {
        assert!(build_tree(scalar_set(3), 5, 0).is_err());
        assert!(build_tree(scalar_set(3), 5, 6).is_err());
    }

    #[test]
    fn child_lookup() {
        let tree = build_tree(scalar_set(3), 4, 1).unwrap();
        let c = tree.child(0, 1).unwrap();
        assert_eq!(tree.node(c).stage, 1);
        assert_eq!(tree.node(c).index_in_stage, 1);
        assert_eq!(tree.node(c).realization, Some(1));
        // Past the robust horizon only the inherited realization branches.
        let c2 = tree.child(c, 1).unwrap();
        assert_eq!(tree.node(c2).parent, Some(c));
        assert!(matches!(tree.child(c, 0), Err(Error::UnavailableRealization { .. })));
        let leaf = tree.leaves()[0];
        assert!(tree.child(leaf, 0).is_err());
    }

    #[test]
    fn weights_leaf_uniform() {
        let tree = build_tree(
            sample_box_vertices(&polymerization_decl(), true).unwrap(),
            3,
            1,
        )
        .unwrap();
        assert_eq!(tree.node(0).weight, 1.0);
        for &l in tree.leaves() {
            assert!((tree.node(l).weight - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_from_probabilities_sum_per_stage() {
        let mut tree = build_tree(scalar_set(3), 4, 2).unwrap();
        let w = weights_from_probabilities(&tree, &[0.2, 0.5, 0.3]).unwrap();
        tree.set_weights(&w).unwrap();
        for s in tree.stage_weight_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(weights_from_probabilities(&tree, &[0.5, 0.5]).is_err());
        assert!(weights_from_probabilities(&tree, &[0.5, 0.6, -0.1]).is_err());
    }

    #[test]
    fn naive_counts() {
        assert_eq!(naive_scenario_count(3, 10, 1).unwrap(), 59_049);
        assert_eq!(naive_scenario_count(3, 2, 1).unwrap(), 9);
        assert_eq!(naive_scenario_count(7, 4, 0).unwrap(), 1);
        assert!(matches!(naive_scenario_count(3, 100, 1), Err(Error::Overflow(_))));
        assert!(naive_scenario_count(3, u64::MAX, 2).is_err());
    }

    #[test]
    fn nominal_scenario_of_branching_tree() {
        let decl = benchmark_reactor().uncertainty;
        let tree = build_tree(sample_box_vertices(&decl, true).unwrap(), 5, 1).unwrap();
        let p = tree.nominal_scenario().unwrap();
        let path = tree.scenario_path(p);
        assert!(path[1..].iter().all(|&n| tree.node(n).realization == Some(1)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tree_structure_invariants(s in 1usize..5, horizon in 1usize..7, nr_off in 0usize..7) {
                let robust = 1 + nr_off % horizon;
                let tree = build_tree(scalar_set(s), horizon, robust).unwrap();
                prop_assert_eq!(tree.num_scenarios(), s.pow(robust as u32));
                prop_assert_eq!(tree.num_nodes(), state_node_count(s, horizon, robust));

                // explicit traversal count agrees with the closed form
                let mut stack = vec![0usize];
                let mut visited = 0;
                while let Some(n) = stack.pop() {
                    visited += 1;
                    stack.extend(tree.node(n).children.iter().copied());
                }
                prop_assert_eq!(visited, tree.num_nodes());

                for (id, node) in tree.nodes().iter().enumerate() {
                    match node.parent {
                        None => prop_assert_eq!(id, 0),
                        Some(p) => {
                            let r = node.realization.unwrap();
                            prop_assert_eq!(tree.child(p, r).unwrap(), id);
                            if node.stage > robust {
                                prop_assert_eq!(tree.node(p).realization, node.realization);
                            }
                        }
                    }
                    let expected_children = if node.stage == horizon { 0 } else if node.stage < robust { s } else { 1 };
                    prop_assert_eq!(node.children.len(), expected_children);
                    for &c in &node.children {
                        prop_assert_eq!(tree.node(c).parent, Some(id));
                    }
                }
                for sum in tree.stage_weight_sums() {
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
