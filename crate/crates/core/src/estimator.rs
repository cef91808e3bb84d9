//! Recovering the primary-system uncertainty from consecutive measurements.
//!
//! Both estimators minimize
//! `|x_next - f(x, u, d)|^2 + sum_i w_i (d_i - prev_i)^2`,
//! either over a finite candidate list or over the box of significant
//! uncertainties with the others held at nominal.

use serde::{Deserialize, Serialize};

use crate::ad::{self, Ad};
use crate::error::{check_dim, Error, Result};
use crate::model::{ModelSpec, UncertaintyDecl};
use crate::nlp::{Element, NlpProblem, SqpSettings, SqpSolver};
use crate::scenario_tree::{sample_box_vertices, RealizationSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    Finite,
    Box,
    /// The box solve failed and the vertex enumeration was used instead.
    BoxFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub d_bar: Vec<f64>,
    /// Squared fit error.
    pub residual: f64,
    pub penalized_objective: f64,
    pub source: EstimateSource,
    /// Candidate index for finite estimates.
    pub index: Option<usize>,
}

/// `W` is diagonal; `w` holds its entries.
fn check_weights(n_d: usize, prev: Option<&[f64]>, w: &[f64]) -> Result<()> {
    if let Some(p) = prev {
        check_dim("previous estimate", n_d, p.len())?;
    }
    if !w.is_empty() {
        check_dim("estimator weights", n_d, w.len())?;
    }
    if w.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidArgument("estimator weights must be nonnegative".into()));
    }
    Ok(())
}

fn fit_residual(model: &ModelSpec, x: &[f64], u: &[f64], x_next: &[f64], d: &[f64]) -> Result<f64> {
    let pred = model.step(x, u, d)?;
    Ok(pred.iter().zip(x_next).map(|(p, m)| (m - p) * (m - p)).sum())
}

fn penalty(prev: Option<&[f64]>, w: &[f64], d: &[f64]) -> f64 {
    match prev {
        Some(p) if !w.is_empty() => d.iter().zip(p).zip(w).map(|((di, pi), wi)| wi * (di - pi) * (di - pi)).sum(),
        _ => 0.0,
    }
}

/// Minimizes over `candidates`; ties go to `prev`, then to the lowest index.
pub fn estimate_finite(
    model: &ModelSpec,
    x_t: &[f64],
    u_t: &[f64],
    x_next: &[f64],
    candidates: &RealizationSet,
    prev: Option<&[f64]>,
    w: &[f64],
) -> Result<EstimateResult> {
    check_dim("measurement", model.n_x, x_next.len())?;
    check_weights(model.n_d, prev, w)?;
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate realizations".into()));
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for d in &candidates.vectors {
        let res = fit_residual(model, x_t, u_t, x_next, d)?;
        scored.push((res, res + penalty(prev, w, d)));
    }
    let best = scored.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * (1.0 + best.abs());
    let tied: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].1 <= best + tol).collect();
    let pick = prev
        .and_then(|p| tied.iter().copied().find(|&i| candidates.vectors[i] == p))
        .unwrap_or(tied[0]);
    Ok(EstimateResult {
        d_bar: candidates.vectors[pick].clone(),
        residual: scored[pick].0,
        penalized_objective: scored[pick].1,
        source: EstimateSource::Finite,
        index: Some(pick),
    })
}

/// Minimizes over the significant box with the other dimensions at nominal.
/// Starts from `prev` (projected) and from the box center; falls back to
/// enumerating the box vertices, nominal and `prev` when neither solve
/// converges.
pub fn estimate_box(
    model: &ModelSpec,
    x_t: &[f64],
    u_t: &[f64],
    x_next: &[f64],
    decl: &UncertaintyDecl,
    prev: &[f64],
    w: &[f64],
) -> Result<EstimateResult> {
    check_dim("measurement", model.n_x, x_next.len())?;
    check_dim("uncertainty declaration", model.n_d, decl.n_d())?;
    check_weights(model.n_d, Some(prev), w)?;
    let dims = decl.significant_indices();
    if dims.is_empty() {
        return Err(Error::InvalidArgument("box estimation needs a significant uncertainty".into()));
    }
    let bx = decl.significant_box();
    let nominal = decl.nominal();

    let f = model.dynamics().clone();
    let (xc, uc, xn) = (ad::constants(x_t), ad::constants(u_t), x_next.to_vec());
    let (nom, pv, wv, dd) = (nominal.clone(), prev.to_vec(), w.to_vec(), dims.clone());
    let objective = Element::scalar((0..dims.len()).collect(), move |a: &[Ad]| {
        let mut d = ad::constants(&nom);
        for (k, &i) in dd.iter().enumerate() {
            d[i] = a[k].clone();
        }
        let pred = f(&xc, &uc, &d);
        let mut c = Ad::constant(0.0);
        for (p, m) in pred.iter().zip(&xn) {
            c += (p - *m).square();
        }
        if !wv.is_empty() {
            for (i, di) in d.iter().enumerate() {
                if wv[i] != 0.0 {
                    c += (di - pv[i]).square() * wv[i];
                }
            }
        }
        c
    });
    let mut problem = NlpProblem::new(dims.len());
    problem.objective.push(objective);
    for (k, &i) in dims.iter().enumerate() {
        problem.lower[k] = bx[i].lo;
        problem.upper[k] = bx[i].hi;
    }

    let starts = [
        dims.iter().map(|&i| bx[i].clamp(prev[i])).collect::<Vec<_>>(),
        dims.iter().map(|&i| bx[i].mid()).collect(),
    ];
    let scale = w.iter().fold(1.0f64, |m, v| m.max(*v));
    let settings = SqpSettings {
        tol: 1e-10 * scale,
        max_iter: 200,
        ..SqpSettings::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for s in starts {
        problem.initial_guess = s;
        let mut solver = SqpSolver::new(settings.clone());
        let Ok(sol) = solver.solve(&problem) else { continue };
        if sol.is_optimal() && best.as_ref().is_none_or(|b| sol.objective < b.0) {
            best = Some((sol.objective, sol.x));
        }
    }

    // The vertices and the clamped previous estimate guard against a solve
    // that stops short of a bound optimum.
    let mut cands = sample_box_vertices(decl, true)?;
    let mut p = nominal.clone();
    for &i in &dims {
        p[i] = bx[i].clamp(prev[i]);
    }
    if !cands.vectors.contains(&p) {
        cands.vectors.push(p);
    }
    let mut enumerated = estimate_finite(model, x_t, u_t, x_next, &cands, Some(prev), w)?;
    enumerated.index = None;

    match best {
        Some((obj, x)) => {
            let mut d = nominal;
            for (k, &i) in dims.iter().enumerate() {
                d[i] = bx[i].clamp(x[k]);
            }
            let residual = fit_residual(model, x_t, u_t, x_next, &d)?;
            debug_assert!({
                let pen = residual + penalty(Some(prev), w, &d);
                (pen - obj).abs() < 1e-6 * (1.0 + obj.abs())
            });
            let solved = EstimateResult {
                penalized_objective: residual + penalty(Some(prev), w, &d),
                d_bar: d,
                residual,
                source: EstimateSource::Box,
                index: None,
            };
            if enumerated.penalized_objective < solved.penalized_objective {
                enumerated.source = EstimateSource::Box;
                Ok(enumerated)
            } else {
                Ok(solved)
            }
        }
        None => {
            log::warn!("box estimate did not converge; enumerating vertices");
            enumerated.source = EstimateSource::BoxFallback;
            Ok(enumerated)
        }
    }
}

/// Primary-state update `z+ = f(z, v, d_bar)`.
pub fn propagate_primary(model: &ModelSpec, z: &[f64], v: &[f64], d_bar: &[f64]) -> Result<Vec<f64>> {
    model.step(z, v, d_bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark_reactor, Interval, UncertainParam, UncertaintyKind};

    /// `x+ = d x`
    fn gain_model() -> ModelSpec {
        ModelSpec::discrete("gain", (1, 1, 1), vec![Interval::new(-1.0, 1.0)], |x, _u, d| vec![&d[0] * &x[0]])
            .build()
            .unwrap()
    }

    /// `x+ = d`
    fn echo_model() -> ModelSpec {
        ModelSpec::discrete("echo", (1, 1, 1), vec![Interval::new(-1.0, 1.0)], |_x, _u, d| vec![d[0].clone()])
            .build()
            .unwrap()
    }

    fn set(v: &[f64]) -> RealizationSet {
        RealizationSet::new(v.iter().map(|&x| vec![x]).collect(), None).unwrap()
    }

    fn gain_box() -> UncertaintyDecl {
        UncertaintyDecl::new(vec![UncertainParam {
            name: "d".into(),
            nominal: 1.0,
            lower: 0.8,
            upper: 1.2,
            significant: true,
            kind: UncertaintyKind::Parametric,
        }])
        .unwrap()
    }

    #[test]
    fn finite_exact_member() {
        let m = gain_model();
        let r = estimate_finite(&m, &[2.0], &[0.0], &[1.0], &set(&[0.4, 0.5, 0.6]), None, &[]).unwrap();
        assert_eq!(r.d_bar, vec![0.5]);
        assert_eq!(r.residual, 0.0);
        assert_eq!(r.index, Some(1));
    }

    #[test]
    fn finite_nearest_residual() {
        let m = gain_model();
        let r = estimate_finite(&m, &[2.0], &[0.0], &[1.05], &set(&[0.4, 0.5, 0.6]), None, &[]).unwrap();
        assert_eq!(r.d_bar, vec![0.5]);
        assert!((r.residual - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn finite_regularized_prefers_previous() {
        let m = echo_model();
        let r = estimate_finite(&m, &[0.0], &[0.0], &[0.55], &set(&[0.4, 0.6]), Some(&[0.4]), &[0.6]).unwrap();
        assert_eq!(r.d_bar, vec![0.4]);
        assert!((r.penalized_objective - 0.0225).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_previous_then_index() {
        let m = echo_model();
        let c = set(&[0.4, 0.6]);
        let r = estimate_finite(&m, &[0.0], &[0.0], &[0.5], &c, None, &[]).unwrap();
        assert_eq!(r.index, Some(0));
        let r = estimate_finite(&m, &[0.0], &[0.0], &[0.5], &c, Some(&[0.6]), &[0.0]).unwrap();
        assert_eq!(r.index, Some(1));
    }

    #[test]
    fn box_interior_zero_residual() {
        let m = gain_model();
        let r = estimate_box(&m, &[1.0], &[0.0], &[1.1], &gain_box(), &[1.0], &[0.0]).unwrap();
        assert_eq!(r.source, EstimateSource::Box);
        assert!((r.d_bar[0] - 1.1).abs() < 1e-6);
        assert!(r.residual < 1e-10);
    }

    #[test]
    fn box_regularized_midpoint() {
        let m = gain_model();
        let r = estimate_box(&m, &[1.0], &[0.0], &[1.1], &gain_box(), &[1.0], &[1.0]).unwrap();
        assert!((r.d_bar[0] - 1.05).abs() < 1e-6);
    }

    #[test]
    fn box_clips_at_bound() {
        let m = gain_model();
        let r = estimate_box(&m, &[1.0], &[0.0], &[1.3], &gain_box(), &[1.0], &[0.0]).unwrap();
        assert!((r.d_bar[0] - 1.2).abs() < 1e-6);
    }

    #[test]
    fn box_large_weight_returns_previous() {
        let m = gain_model();
        let r = estimate_box(&m, &[1.0], &[0.0], &[1.15], &gain_box(), &[0.9], &[1e8]).unwrap();
        assert!((r.d_bar[0] - 0.9).abs() < 1e-3);
    }

    #[test]
    fn propagate_matches_step() {
        let b = benchmark_reactor();
        let z = propagate_primary(&b.model, &[1.0, 0.0], &[0.0], &[1.0, 0.0]).unwrap();
        assert!((z[0] - 0.9).abs() < 1e-15 && (z[1] - 0.1).abs() < 1e-15);
        assert_eq!(z, b.model.step(&[1.0, 0.0], &[0.0], &[1.0, 0.0]).unwrap());
    }

    #[test]
    fn reactor_box_estimate_pins_additive_dimension() {
        let b = benchmark_reactor();
        let truth = [0.7, 0.0];
        let xn = b.model.step(&[0.6, 0.2], &[1.0], &truth).unwrap();
        let r = estimate_box(&b.model, &[0.6, 0.2], &[1.0], &xn, &b.uncertainty, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((r.d_bar[0] - 0.7).abs() < 1e-6);
        assert_eq!(r.d_bar[1], 0.0);
    }
}
