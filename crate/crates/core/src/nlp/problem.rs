use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ad::{self, Ad};
use crate::error::{Error, Result};

pub type ElementFn = Arc<dyn Fn(&[Ad]) -> Vec<Ad> + Send + Sync>;

/// A function of a small subset of the decision vector. Objectives are sums
/// of scalar elements; constraint blocks stack element outputs row-wise.
#[derive(Clone)]
pub struct Element {
    pub vars: Vec<usize>,
    pub n_out: usize,
    pub f: ElementFn,
}

impl fmt::Debug for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Element")
            .field("vars", &self.vars)
            .field("n_out", &self.n_out)
            .finish()
    }
}

impl Element {
    pub fn new(vars: Vec<usize>, n_out: usize, f: impl Fn(&[Ad]) -> Vec<Ad> + Send + Sync + 'static) -> Self {
        Element {
            vars,
            n_out,
            f: Arc::new(f),
        }
    }

    pub fn scalar(vars: Vec<usize>, f: impl Fn(&[Ad]) -> Ad + Send + Sync + 'static) -> Self {
        Element::new(vars, 1, move |x| vec![f(x)])
    }

    fn gather(&self, x: &[f64]) -> Vec<f64> {
        self.vars.iter().map(|&i| x[i]).collect()
    }

    pub fn eval_values(&self, x: &[f64]) -> Vec<f64> {
        ad::values(&(self.f)(&ad::constants(&self.gather(x))))
    }

    /// Values and row-major local Jacobian (`n_out x vars.len()`).
    pub fn eval(&self, x: &[f64], mode: DerivativeMode) -> ElementEval {
        let local = self.gather(x);
        let nv = local.len();
        match mode {
            DerivativeMode::Forward => {
                let out = (self.f)(&ad::seed(&local, 0, nv));
                let mut jac = vec![0.0; self.n_out * nv];
                for (r, o) in out.iter().enumerate() {
                    for c in 0..nv {
                        jac[r * nv + c] = o.d(c);
                    }
                }
                ElementEval {
                    values: ad::values(&out),
                    jac,
                }
            }
            DerivativeMode::CentralDifference => {
                let eval_at = |p: &[f64]| ad::values(&(self.f)(&ad::constants(p)));
                let values = eval_at(&local);
                let mut jac = vec![0.0; self.n_out * nv];
                let mut p = local.clone();
                for c in 0..nv {
                    let h = FD_STEP * local[c].abs().max(1.0);
                    p[c] = local[c] + h;
                    let fp = eval_at(&p);
                    p[c] = local[c] - h;
                    let fm = eval_at(&p);
                    p[c] = local[c];
                    for r in 0..self.n_out {
                        jac[r * nv + c] = (fp[r] - fm[r]) / (2.0 * h);
                    }
                }
                ElementEval { values, jac }
            }
        }
    }
}

pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeMode {
    /// Forward-mode algorithmic differentiation.
    #[default]
    Forward,
    /// Central finite differences with relative step `1e-6`.
    CentralDifference,
}

#[derive(Clone, Debug)]
pub struct ElementEval {
    pub values: Vec<f64>,
    pub jac: Vec<f64>,
}

/// `min f(x)  s.t.  c_eq(x) = 0,  c_in(x) <= 0,  lower <= x <= upper`.
#[derive(Clone, Debug)]
pub struct NlpProblem {
    pub n_vars: usize,
    pub objective: Vec<Element>,
    pub equalities: Vec<Element>,
    pub inequalities: Vec<Element>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial_guess: Vec<f64>,
}

impl NlpProblem {
    pub fn new(n_vars: usize) -> Self {
        NlpProblem {
            n_vars,
            objective: Vec::new(),
            equalities: Vec::new(),
            inequalities: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n_vars],
            upper: vec![f64::INFINITY; n_vars],
            initial_guess: vec![0.0; n_vars],
        }
    }

    pub fn n_eq(&self) -> usize {
        self.equalities.iter().map(|e| e.n_out).sum()
    }

    pub fn n_ineq(&self) -> usize {
        self.inequalities.iter().map(|e| e.n_out).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars;
        for (what, len) in [
            ("lower bounds", self.lower.len()),
            ("upper bounds", self.upper.len()),
            ("initial guess", self.initial_guess.len()),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    what: what.into(),
                    expected: n,
                    got: len,
                });
            }
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("variable bound with lower > upper".into()));
        }
        let all = self
            .objective
            .iter()
            .chain(&self.equalities)
            .chain(&self.inequalities);
        for e in all {
            if let Some(&bad) = e.vars.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!("element references variable {bad} >= {n}")));
            }
            let out = e.eval_values(&self.initial_guess);
            if out.len() != e.n_out {
                return Err(Error::Dimension {
                    what: "element output".into(),
                    expected: e.n_out,
                    got: out.len(),
                });
            }
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("problem functions at the initial guess".into()));
            }
        }
        for e in &self.objective {
            if e.n_out != 1 {
                return Err(Error::InvalidArgument("objective elements must be scalar".into()));
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().map(|e| e.eval_values(x)[0]).sum()
    }

    pub fn eq_values(&self, x: &[f64]) -> Vec<f64> {
        self.equalities.iter().flat_map(|e| e.eval_values(x)).collect()
    }

    pub fn ineq_values(&self, x: &[f64]) -> Vec<f64> {
        self.inequalities.iter().flat_map(|e| e.eval_values(x)).collect()
    }

    pub fn evaluate(&self, x: &[f64], mode: DerivativeMode) -> Evaluation {
        let obj: Vec<ElementEval> = self.objective.iter().map(|e| e.eval(x, mode)).collect();
        let eq: Vec<ElementEval> = self.equalities.iter().map(|e| e.eval(x, mode)).collect();
        let ineq: Vec<ElementEval> = self.inequalities.iter().map(|e| e.eval(x, mode)).collect();

        let mut grad = vec![0.0; self.n_vars];
        let mut f = 0.0;
        for (e, ev) in self.objective.iter().zip(&obj) {
            f += ev.values[0];
            for (c, &i) in e.vars.iter().enumerate() {
                grad[i] += ev.jac[c];
            }
        }
        let c_eq = eq.iter().flat_map(|ev| ev.values.iter().copied()).collect();
        let c_in = ineq.iter().flat_map(|ev| ev.values.iter().copied()).collect();
        Evaluation {
            x: x.to_vec(),
            f,
            grad,
            c_eq,
            c_in,
            jac_eq: SparseRows::assemble(&self.equalities, &eq),
            jac_in: SparseRows::assemble(&self.inequalities, &ineq),
            obj,
            eq,
            ineq,
        }
    }
}

/// Row-compressed sparse Jacobian.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn assemble(elements: &[Element], evals: &[ElementEval]) -> Self {
        let mut rows = Vec::new();
        for (e, ev) in elements.iter().zip(evals) {
            let nv = e.vars.len();
            for r in 0..e.n_out {
                rows.push(
                    e.vars
                        .iter()
                        .enumerate()
                        .map(|(c, &i)| (i, ev.jac[r * nv + c]))
                        .collect(),
                );
            }
        }
        SparseRows { rows }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn mul(&self, d: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(i, v)| v * d[i]).sum())
            .collect()
    }

    /// `out += J^T lambda`.
    pub fn add_transpose_mul(&self, lambda: &[f64], out: &mut [f64]) {
        for (row, &l) in self.rows.iter().zip(lambda) {
            if l != 0.0 {
                for &(i, v) in row {
                    out[i] += v * l;
                }
            }
        }
    }

    pub fn to_dense(&self, n: usize) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|row| {
                let mut d = vec![0.0; n];
                for &(i, v) in row {
                    d[i] += v;
                }
                d
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub c_eq: Vec<f64>,
    pub c_in: Vec<f64>,
    pub jac_eq: SparseRows,
    pub jac_in: SparseRows,
    pub obj: Vec<ElementEval>,
    pub eq: Vec<ElementEval>,
    pub ineq: Vec<ElementEval>,
}

impl Evaluation {
    /// `||c_eq||_1 + sum max(0, c_in)`.
    pub fn l1_violation(&self) -> f64 {
        self.c_eq.iter().map(|c| c.abs()).sum::<f64>() + self.c_in.iter().map(|c| c.max(0.0)).sum::<f64>()
    }

    pub fn max_violation(&self) -> f64 {
        let eq = self.c_eq.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        self.c_in.iter().fold(eq, |m, c| m.max(*c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosen() -> Element {
        Element::scalar(vec![0, 1], |x| {
            let a = 1.0 - &x[0];
            let b = &x[1] - &x[0].square();
            a.square() + b.square() * 100.0
        })
    }

    #[test]
    fn forward_and_central_difference_agree() {
        let e = rosen();
        let x = [0.3, -0.7];
        let a = e.eval(&x, DerivativeMode::Forward);
        let b = e.eval(&x, DerivativeMode::CentralDifference);
        for (ga, gb) in a.jac.iter().zip(&b.jac) {
            assert!((ga - gb).abs() <= 1e-5 * ga.abs().max(1.0));
        }
    }

    #[test]
    fn evaluation_scatters_element_gradients() {
        let mut p = NlpProblem::new(3);
        p.objective.push(Element::scalar(vec![0, 2], |x| &x[0] * &x[1]));
        p.objective.push(Element::scalar(vec![2], |x| x[0].square()));
        p.equalities.push(Element::new(vec![1, 0], 2, |x| vec![&x[0] - 1.0, &x[1] * 3.0]));
        let ev = p.evaluate(&[2.0, 5.0, 3.0], DerivativeMode::Forward);
        assert_eq!(ev.f, 6.0 + 9.0);
        assert_eq!(ev.grad, vec![3.0, 0.0, 2.0 + 6.0]);
        assert_eq!(ev.c_eq, vec![4.0, 6.0]);
        assert_eq!(ev.jac_eq.to_dense(3), vec![vec![0.0, 1.0, 0.0], vec![3.0, 0.0, 0.0]]);
    }

    #[test]
    fn validation_catches_malformed_problems() {
        let mut p = NlpProblem::new(2);
        p.objective.push(Element::scalar(vec![0, 3], |x| x[0].clone()));
        assert!(p.validate().is_err());

        let mut p = NlpProblem::new(1);
        p.lower[0] = 1.0;
        p.upper[0] = 0.0;
        assert!(p.validate().is_err());

        let mut p = NlpProblem::new(1);
        p.objective.push(Element::scalar(vec![0], |x| x[0].ln()));
        assert!(matches!(p.validate(), Err(Error::NonFinite(_))));
    }
}
