//! Sparse convex QP subproblems, solved with the Clarabel interior-point
//! solver.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT,
};

/// `min 1/2 x'Px + q'x  s.t.  A_eq x = b_eq,  A_in x <= b_in`.
#[derive(Clone, Debug, Default)]
pub struct SparseQp {
    pub n: usize,
    /// Upper-triangular entries `(row, col, value)` with `row <= col`;
    /// repeated entries are summed.
    pub p: Vec<(usize, usize, f64)>,
    pub q: Vec<f64>,
    pub a_eq: Vec<Vec<(usize, f64)>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<Vec<(usize, f64)>>,
    pub b_in: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QpStatus {
    Solved,
    Infeasible,
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct QpResult {
    pub status: QpStatus,
    pub x: Vec<f64>,
    /// Multipliers with the sign convention `Px + q + A_eq' y_eq + A_in' y_in = 0`.
    pub y_eq: Vec<f64>,
    pub y_in: Vec<f64>,
    pub iterations: u32,
}

pub fn solve_qp(qp: &SparseQp, tol: f64) -> QpResult {
    let n = qp.n;
    let (m_eq, m_in) = (qp.a_eq.len(), qp.a_in.len());
    let m = m_eq + m_in;

    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for &(r, c, v) in &qp.p {
        debug_assert!(r <= c);
        if v != 0.0 {
            pi.push(r);
            pj.push(c);
            pv.push(v);
        }
    }
    let p = CscMatrix::new_from_triplets(n, n, pi, pj, pv);

    let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
    for (r, row) in qp.a_eq.iter().chain(&qp.a_in).enumerate() {
        for &(c, v) in row {
            if v != 0.0 {
                ai.push(r);
                aj.push(c);
                av.push(v);
            }
        }
    }
    let a = CscMatrix::new_from_triplets(m, n, ai, aj, av);
    let b: Vec<f64> = qp.b_eq.iter().chain(&qp.b_in).copied().collect();

    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    if m_eq > 0 {
        cones.push(ZeroConeT(m_eq));
    }
    if m_in > 0 {
        cones.push(NonnegativeConeT(m_in));
    }

    let failed = |msg: String| QpResult {
        status: QpStatus::Failed(msg),
        x: vec![0.0; n],
        y_eq: vec![0.0; m_eq],
        y_in: vec![0.0; m_in],
        iterations: 0,
    };

    // Very tight gaps can stall the interior-point iteration on badly scaled
    // Hessians, so looser tolerances are tried before giving up.
    let mut last = String::new();
    let mut tols = vec![tol];
    for t in [1e-8, 1e-6] {
        if t > tol {
            tols.push(t);
        }
    }
    for t in tols {
        let settings = DefaultSettings {
            verbose: false,
            tol_gap_abs: t,
            tol_gap_rel: t,
            tol_feas: t,
            max_iter: 200,
            presolve_enable: false,
            ..DefaultSettings::default()
        };
        let mut solver = match DefaultSolver::new(&p, &qp.q, &a, &b, &cones, settings) {
            Ok(s) => s,
            Err(e) => return failed(format!("qp setup: {e}")),
        };
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => QpStatus::Solved,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => QpStatus::Infeasible,
            other => {
                last = format!("{other:?}");
                continue;
            }
        };
        return QpResult {
            status,
            x: sol.x.clone(),
            y_eq: sol.z[..m_eq].to_vec(),
            y_in: sol.z[m_eq..].to_vec(),
            iterations: sol.iterations,
        };
    }
    failed(last)
}
