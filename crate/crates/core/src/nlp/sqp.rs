//! Line-search SQP with a partitioned damped-BFGS Hessian.
//!
//! Every objective element and constraint block owns a small quasi-Newton
//! matrix over its own variables; the QP Hessian is their scattered sum, so
//! it stays as sparse as the problem. Steps are globalized with an l1 exact
//! penalty merit function. When a linearization is inconsistent the QP is
//! relaxed elastically and a persistent positive slack is reported as
//! infeasibility.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::kkt::{kkt_at, KktReport, Multipliers};
use super::problem::{DerivativeMode, Evaluation, NlpProblem};
use super::qp::{solve_qp, QpStatus, SparseQp};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub derivatives: DerivativeMode,
    /// Penalty on elastic slacks when a QP subproblem is infeasible.
    pub elastic_penalty: f64,
    pub qp_tol: f64,
    /// Initial curvature of objective element blocks.
    pub initial_hessian: f64,
    /// Initial curvature of constraint element blocks.
    pub initial_constraint_hessian: f64,
}

impl Default for SqpSettings {
    fn default() -> Self {
        SqpSettings {
            tol: 1e-6,
            max_iter: 100,
            derivatives: DerivativeMode::Forward,
            elastic_penalty: 1e6,
            qp_tol: 1e-10,
            initial_hessian: 1.0,
            initial_constraint_hessian: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub multipliers: Multipliers,
    pub status: SolveStatus,
    pub kkt: KktReport,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Largest constraint violation at the returned point.
    pub max_violation: f64,
    /// Whether an elastic QP was needed on the way.
    pub elastic: bool,
    pub message: Option<String>,
}

impl NlpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Solves `problem` with default settings apart from tolerance and
/// iteration limit.
pub fn solve(problem: &NlpProblem, tol: f64, max_iter: usize) -> Result<NlpSolution> {
    let mut solver = SqpSolver::new(SqpSettings {
        tol,
        max_iter,
        ..SqpSettings::default()
    });
    solver.solve(problem)
}

/// Stateful solver: Hessian blocks and multipliers from the last solve are
/// reused when the next problem has the same element structure.
#[derive(Clone, Debug)]
pub struct SqpSolver {
    pub settings: SqpSettings,
    memory: Option<Memory>,
}

#[derive(Clone, Debug)]
struct Memory {
    signature: Vec<usize>,
    blocks: Vec<Block>,
    multipliers: Multipliers,
}

/// Quasi-Newton block of one element; `scaled` once the initial matrix has
/// been rescaled from the first curvature pair.
#[derive(Clone, Debug)]
struct Block {
    m: DMatrix<f64>,
    scaled: bool,
}

fn signature(p: &NlpProblem) -> Vec<usize> {
    let mut s = vec![p.n_vars, p.objective.len(), p.equalities.len(), p.inequalities.len()];
    for e in p.objective.iter().chain(&p.equalities).chain(&p.inequalities) {
        s.push(e.vars.len());
        s.push(e.n_out);
    }
    s
}

struct QpStep {
    d: Vec<f64>,
    mult: Multipliers,
    lin_violation: f64,
    elastic: bool,
}

impl SqpSolver {
    pub fn new(settings: SqpSettings) -> Self {
        SqpSolver {
            settings,
            memory: None,
        }
    }

    pub fn reset(&mut self) {
        self.memory = None;
    }

    fn fresh_blocks(&self, p: &NlpProblem) -> Vec<Block> {
        let obj = p
            .objective
            .iter()
            .map(|e| DMatrix::identity(e.vars.len(), e.vars.len()) * self.settings.initial_hessian);
        let cons = p
            .equalities
            .iter()
            .chain(&p.inequalities)
            .map(|e| DMatrix::identity(e.vars.len(), e.vars.len()) * self.settings.initial_constraint_hessian);
        obj.chain(cons).map(|m| Block { m, scaled: false }).collect()
    }

    pub fn solve(&mut self, problem: &NlpProblem) -> Result<NlpSolution> {
        problem.validate()?;
        let st = self.settings.clone();
        let n = problem.n_vars;
        let sig = signature(problem);

        let (mut blocks, mut mult) = match self.memory.take() {
            Some(m) if m.signature == sig && m.multipliers.fits(problem) => (m.blocks, m.multipliers),
            _ => (self.fresh_blocks(problem), Multipliers::zeros(problem)),
        };

        let mut x: Vec<f64> = (0..n)
            .map(|i| problem.initial_guess[i].max(problem.lower[i]).min(problem.upper[i]))
            .collect();
        let mut ev = problem.evaluate(&x, st.derivatives);
        let mut penalty = 1.0f64;
        let mut used_elastic = false;
        let mut stalled = 0;
        let mut best: Option<(f64, Vec<f64>, Multipliers)> = None;
        let mut message = None;
        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;

        for it in 0..=st.max_iter {
            iterations = it;
            let kkt = kkt_at(problem, &ev, &mult);
            let score = kkt.max();
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, x.clone(), mult.clone()));
            }
            if kkt.satisfied(st.tol) {
                status = SolveStatus::Optimal;
                break;
            }
            if it == st.max_iter {
                break;
            }

            let step = match self.qp_step(problem, &ev, &blocks) {
                Ok(s) => s,
                Err(msg) => {
                    message = Some(msg);
                    break;
                }
            };
            used_elastic |= step.elastic;

            let d_norm = step.d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let x_norm = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let violation = ev.l1_violation();
            if step.elastic && d_norm <= 1e-10 * x_norm && ev.max_violation() > st.tol {
                status = SolveStatus::Infeasible;
                message = Some(format!(
                    "linearized constraints stay inconsistent; residual violation {:.3e}",
                    ev.max_violation()
                ));
                break;
            }

            let lam_max = step.mult.eq.iter().chain(&step.mult.ineq).fold(0.0f64, |m, v| m.max(v.abs()));
            if penalty < 1.5 * lam_max + 1e-3 {
                penalty = 2.0 * lam_max + 1e-3;
            }
            let merit0 = ev.f + penalty * violation;
            let g_dot_d: f64 = ev.grad.iter().zip(&step.d).map(|(g, d)| g * d).sum();
            let slope = g_dot_d + penalty * (step.lin_violation - violation);

            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= 1e-10 {
                let xt: Vec<f64> = (0..n)
                    .map(|i| (x[i] + alpha * step.d[i]).max(problem.lower[i]).min(problem.upper[i]))
                    .collect();
                let et = problem.evaluate(&xt, st.derivatives);
                let finite = et.f.is_finite() && et.c_eq.iter().chain(&et.c_in).all(|v| v.is_finite());
                if finite {
                    let merit = et.f + penalty * et.l1_violation();
                    let armijo = merit <= merit0 + 1e-4 * alpha * slope.min(0.0);
                    let flat = slope.abs() <= 1e-12 * (1.0 + merit0.abs())
                        && merit <= merit0 + 1e-10 * (1.0 + merit0.abs());
                    if armijo || flat {
                        accepted = Some((xt, et));
                        break;
                    }
                }
                alpha *= 0.5;
            }

            let Some((xt, et)) = accepted else {
                stalled += 1;
                if stalled >= 2 {
                    message = Some("line search failed twice in a row".into());
                    if used_elastic && ev.max_violation() > st.tol {
                        status = SolveStatus::Infeasible;
                    }
                    break;
                }
                blocks = self.fresh_blocks(problem);
                continue;
            };
            stalled = 0;

            log::trace!(
                "sqp it {it}: f {:.6e} kkt {:.3e} |d| {:.3e} alpha {alpha:.3e}",
                ev.f,
                kkt.max(),
                d_norm
            );
            mult.lerp(&step.mult, alpha);
            update_blocks(problem, &mut blocks, &ev, &et, &mult);
            x = xt;
            ev = et;
        }

        let (x, mult, ev) = if status == SolveStatus::Optimal {
            (x, mult, ev)
        } else {
            let (_, bx, bm) = best.expect("at least one iterate");
            let bev = problem.evaluate(&bx, st.derivatives);
            (bx, bm, bev)
        };
        if status == SolveStatus::MaxIter && used_elastic && ev.max_violation() > st.tol {
            status = SolveStatus::Infeasible;
        }
        let kkt = kkt_at(problem, &ev, &mult);
        self.memory = Some(Memory {
            signature: sig,
            blocks,
            multipliers: mult.clone(),
        });
        Ok(NlpSolution {
            objective: ev.f,
            max_violation: ev.max_violation(),
            kkt_residual: kkt.max(),
            kkt,
            x,
            multipliers: mult,
            status,
            iterations,
            elastic: used_elastic,
            message,
        })
    }

    fn qp_step(&self, p: &NlpProblem, ev: &Evaluation, blocks: &[Block]) -> std::result::Result<QpStep, String> {
        let n = p.n_vars;
        let mut hess = Vec::new();
        let elements = p.objective.iter().chain(&p.equalities).chain(&p.inequalities);
        for (e, b) in elements.zip(blocks) {
            let b = &b.m;
            let nv = e.vars.len();
            for a in 0..nv {
                for c in a..nv {
                    let (i, j) = (e.vars[a], e.vars[c]);
                    let v = if i == j && a != c { 2.0 * b[(a, c)] } else { b[(a, c)] };
                    hess.push((i.min(j), i.max(j), v));
                }
            }
        }

        let mut a_in: Vec<Vec<(usize, f64)>> = ev.jac_in.rows.clone();
        let mut b_in: Vec<f64> = ev.c_in.iter().map(|c| -c).collect();
        let m_in = a_in.len();
        let mut bound_rows = Vec::new();
        for i in 0..n {
            if p.upper[i].is_finite() {
                bound_rows.push((i, true));
                a_in.push(vec![(i, 1.0)]);
                b_in.push(p.upper[i] - ev.x[i]);
            }
            if p.lower[i].is_finite() {
                bound_rows.push((i, false));
                a_in.push(vec![(i, -1.0)]);
                b_in.push(ev.x[i] - p.lower[i]);
            }
        }
        let qp = SparseQp {
            n,
            p: hess,
            q: ev.grad.clone(),
            a_eq: ev.jac_eq.rows.clone(),
            b_eq: ev.c_eq.iter().map(|c| -c).collect(),
            a_in,
            b_in,
        };

        let unpack = |x: &[f64], y_eq: &[f64], y_in: &[f64], elastic: bool| {
            let mut mult = Multipliers::zeros(p);
            mult.eq.copy_from_slice(&y_eq[..p.n_eq()]);
            mult.ineq.copy_from_slice(&y_in[..m_in]);
            for (k, &(i, upper)) in bound_rows.iter().enumerate() {
                if upper {
                    mult.upper[i] = y_in[m_in + k];
                } else {
                    mult.lower[i] = y_in[m_in + k];
                }
            }
            let d = x[..n].to_vec();
            let lin_eq: f64 = ev.jac_eq.mul(&d).iter().zip(&ev.c_eq).map(|(jd, c)| (jd + c).abs()).sum();
            let lin_in: f64 = ev.jac_in.mul(&d).iter().zip(&ev.c_in).map(|(jd, c)| (jd + c).max(0.0)).sum();
            QpStep {
                d,
                mult,
                lin_violation: lin_eq + lin_in,
                elastic,
            }
        };

        let r = solve_qp(&qp, self.settings.qp_tol);
        match r.status {
            QpStatus::Solved => return Ok(unpack(&r.x, &r.y_eq, &r.y_in, false)),
            QpStatus::Infeasible => {}
            QpStatus::Failed(msg) => {
                log::debug!("qp subproblem failed ({msg}); retrying elastically");
            }
        }

        // Elastic relaxation: J_eq d - p + q = -c_eq,  J_in d - t <= -c_in.
        let m_eq = qp.a_eq.len();
        let ne = n + 2 * m_eq + m_in;
        let rho = self.settings.elastic_penalty;
        let mut eq = qp.clone();
        eq.n = ne;
        eq.q.extend(std::iter::repeat_n(rho, 2 * m_eq + m_in));
        for (r, row) in eq.a_eq.iter_mut().enumerate() {
            row.push((n + r, -1.0));
            row.push((n + m_eq + r, 1.0));
        }
        for r in 0..m_in {
            eq.a_in[r].push((n + 2 * m_eq + r, -1.0));
        }
        for s in n..ne {
            eq.a_in.push(vec![(s, -1.0)]);
            eq.b_in.push(0.0);
        }
        let r = solve_qp(&eq, self.settings.qp_tol);
        match r.status {
            QpStatus::Solved => {
                let y_in: Vec<f64> = r.y_in[..qp.a_in.len()].to_vec();
                Ok(unpack(&r.x, &r.y_eq, &y_in, true))
            }
            QpStatus::Infeasible => Err("elastic qp reported infeasible".into()),
            QpStatus::Failed(msg) => Err(format!("elastic qp failed: {msg}")),
        }
    }
}

/// Local gradient of each element's Lagrangian contribution.
fn local_lagrangian_grads(p: &NlpProblem, ev: &Evaluation, mult: &Multipliers) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(p.objective.len() + p.equalities.len() + p.inequalities.len());
    for (e, el) in p.objective.iter().zip(&ev.obj) {
        out.push(DVector::from_column_slice(&el.jac[..e.vars.len()]));
    }
    for (elements, evals, lam) in [(&p.equalities, &ev.eq, &mult.eq), (&p.inequalities, &ev.ineq, &mult.ineq)] {
        let mut row = 0;
        for (e, el) in elements.iter().zip(evals) {
            let nv = e.vars.len();
            let mut g = DVector::zeros(nv);
            for r in 0..e.n_out {
                let l = lam[row + r];
                if l != 0.0 {
                    for c in 0..nv {
                        g[c] += l * el.jac[r * nv + c];
                    }
                }
            }
            row += e.n_out;
            out.push(g);
        }
    }
    out
}

fn update_blocks(p: &NlpProblem, blocks: &mut [Block], old: &Evaluation, new: &Evaluation, mult: &Multipliers) {
    let g_old = local_lagrangian_grads(p, old, mult);
    let g_new = local_lagrangian_grads(p, new, mult);
    let elements = p.objective.iter().chain(&p.equalities).chain(&p.inequalities);
    for (((e, b), go), gn) in elements.zip(blocks.iter_mut()).zip(&g_old).zip(&g_new) {
        let s = DVector::from_iterator(e.vars.len(), e.vars.iter().map(|&i| new.x[i] - old.x[i]));
        let y = gn - go;
        if !b.scaled {
            // Shanno-Phua scaling of the initial matrix.
            let (sy, yy) = (s.dot(&y), y.dot(&y));
            if sy > 1e-12 * s.norm() * y.norm() && yy > 0.0 {
                b.m = DMatrix::identity(s.len(), s.len()) * (yy / sy);
                b.scaled = true;
            }
        }
        damped_bfgs_update(&mut b.m, &s, &y);
    }
}

/// Powell-damped BFGS update; keeps `b` positive definite.
pub fn damped_bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let ss = s.dot(s);
    if ss < 1e-24 {
        return;
    }
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-16 * ss {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}
