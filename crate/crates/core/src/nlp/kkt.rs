use serde::{Deserialize, Serialize};

use super::problem::{DerivativeMode, Evaluation, NlpProblem};

/// Lagrange multipliers for `L = f + eq'c_eq + ineq'c_in
/// + upper'(x - ub) + lower'(lb - x)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub eq: Vec<f64>,
    pub ineq: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(problem: &NlpProblem) -> Self {
        Multipliers {
            eq: vec![0.0; problem.n_eq()],
            ineq: vec![0.0; problem.n_ineq()],
            lower: vec![0.0; problem.n_vars],
            upper: vec![0.0; problem.n_vars],
        }
    }

    pub fn fits(&self, problem: &NlpProblem) -> bool {
        self.eq.len() == problem.n_eq()
            && self.ineq.len() == problem.n_ineq()
            && self.lower.len() == problem.n_vars
            && self.upper.len() == problem.n_vars
    }

    pub fn max_abs(&self) -> f64 {
        self.eq
            .iter()
            .chain(&self.ineq)
            .chain(&self.lower)
            .chain(&self.upper)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub(crate) fn lerp(&mut self, target: &Multipliers, t: f64) {
        let mix = |a: &mut Vec<f64>, b: &Vec<f64>| {
            for (ai, bi) in a.iter_mut().zip(b) {
                *ai += t * (bi - *ai);
            }
        };
        mix(&mut self.eq, &target.eq);
        mix(&mut self.ineq, &target.ineq);
        mix(&mut self.lower, &target.lower);
        mix(&mut self.upper, &target.upper);
    }
}

/// Infinity norms of the four KKT conditions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }

    pub fn satisfied(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Evaluates the KKT residuals of `problem` at an arbitrary candidate point.
pub fn check_kkt(problem: &NlpProblem, x: &[f64], mult: &Multipliers) -> KktReport {
    let ev = problem.evaluate(x, DerivativeMode::Forward);
    kkt_at(problem, &ev, mult)
}

pub(crate) fn kkt_at(problem: &NlpProblem, ev: &Evaluation, mult: &Multipliers) -> KktReport {
    let x = &ev.x;
    let mut grad_l = ev.grad.clone();
    ev.jac_eq.add_transpose_mul(&mult.eq, &mut grad_l);
    ev.jac_in.add_transpose_mul(&mult.ineq, &mut grad_l);
    for i in 0..problem.n_vars {
        grad_l[i] += mult.upper[i] - mult.lower[i];
    }
    let stationarity = inf_norm(&grad_l);

    let mut primal = ev.max_violation().max(0.0);
    for i in 0..problem.n_vars {
        primal = primal
            .max(problem.lower[i] - x[i])
            .max(x[i] - problem.upper[i]);
    }

    let dual = mult
        .ineq
        .iter()
        .chain(&mult.lower)
        .chain(&mult.upper)
        .fold(0.0f64, |m, &v| m.max(-v));

    let mut comp = mult
        .ineq
        .iter()
        .zip(&ev.c_in)
        .fold(0.0f64, |m, (l, c)| m.max((l * c).abs()));
    for i in 0..problem.n_vars {
        let gap_u = problem.upper[i] - x[i];
        let gap_l = x[i] - problem.lower[i];
        comp = comp.max(bound_comp(mult.upper[i], gap_u));
        comp = comp.max(bound_comp(mult.lower[i], gap_l));
    }

    KktReport {
        stationarity,
        primal_feasibility: primal,
        dual_feasibility: dual,
        complementarity: comp,
    }
}

fn bound_comp(mult: f64, gap: f64) -> f64 {
    if mult == 0.0 {
        0.0
    } else if gap.is_finite() {
        (mult * gap).abs()
    } else {
        // multiplier on an absent bound
        mult.abs()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::problem::Element;

    fn shifted_square() -> NlpProblem {
        let mut p = NlpProblem::new(1);
        p.objective.push(Element::scalar(vec![0], |x| (&x[0] - 3.0).square()));
        p
    }

    #[test]
    fn stationarity_away_from_minimum() {
        let p = shifted_square();
        let r = check_kkt(&p, &[0.0], &Multipliers::zeros(&p));
        assert!((r.stationarity - 6.0).abs() < 1e-12);
        assert_eq!(r.primal_feasibility, 0.0);
        let r = check_kkt(&p, &[3.0], &Multipliers::zeros(&p));
        assert!(r.satisfied(1e-12));
    }

    #[test]
    fn inactive_constraint_with_multiplier_is_flagged() {
        let mut p = shifted_square();
        p.inequalities.push(Element::scalar(vec![0], |x| &x[0] - 5.0));
        let mut m = Multipliers::zeros(&p);
        m.ineq[0] = 0.5;
        // gradient -> 2(3-3) + 0.5 = 0.5 stationarity; complementarity |0.5 * -2|
        let r = check_kkt(&p, &[3.0], &m);
        assert!((r.complementarity - 1.0).abs() < 1e-12);
        assert!(!r.satisfied(1e-6));
    }

    #[test]
    fn negative_inequality_multiplier_is_dual_infeasible() {
        let mut p = shifted_square();
        p.inequalities.push(Element::scalar(vec![0], |x| &x[0] - 1.0));
        let mut m = Multipliers::zeros(&p);
        m.ineq[0] = -1.0;
        assert_eq!(check_kkt(&p, &[1.0], &m).dual_feasibility, 1.0);
    }

    #[test]
    fn bound_multipliers_enter_stationarity() {
        let mut p = shifted_square();
        p.upper[0] = 1.0;
        let mut m = Multipliers::zeros(&p);
        m.upper[0] = 4.0;
        assert!(check_kkt(&p, &[1.0], &m).satisfied(1e-12));
        assert!(check_kkt(&p, &[1.5], &m).primal_feasibility > 0.4);
    }
}
