use std::sync::Arc;

use proptest::prelude::*;

use tems::ad::Ad;
use tems::controllers::{PrimaryConfig, PrimaryController};
use tems::estimator::estimate_box;
use tems::model::{benchmark_reactor, scalar_linear, Benchmark, ModelSpec};
use tems::scenario_tree::{build_tree, sample_box_vertices, RealizationSet};

/// Scalar system whose cost pulls the state past the constraint `x <= 1.5`.
fn pulled_controller(b: &Benchmark, delta: f64) -> PrimaryController {
    let real = RealizationSet::new(vec![vec![-0.1], vec![0.0], vec![0.1]], Some(1)).unwrap();
    let tree = build_tree(real, 3, 1).unwrap();
    let mut cfg = PrimaryConfig::new(
        &b.model,
        tree,
        Arc::new(|z: &[Ad], v: &[Ad], _: &[Ad]| (&z[0] - 3.0).square() + v[0].square()),
    );
    cfg.terminal_cost = Some(Arc::new(|z: &[Ad]| (&z[0] - 3.0).square()));
    cfg.delta = vec![delta];
    cfg.sqp.tol = 1e-9;
    PrimaryController::new(cfg, &b.model).unwrap()
}

fn max_node_violation(model: &ModelSpec, ctrl: &PrimaryController, x0: f64, delta: f64) -> (f64, f64, f64) {
    let r = ctrl.clone().solve(model, &[x0], None).unwrap();
    let t = &r.trajectory;
    let mut worst = 0.0f64;
    for (id, x) in t.states.iter().enumerate().skip(1) {
        let u = t.inputs[id].clone().unwrap_or_else(|| vec![0.0]);
        let g = model.evaluate_constraints(x, &u, &[delta]).unwrap();
        worst = worst.max(g[0]);
        if let Some(u) = &t.inputs[id] {
            worst = worst.max(u[0].abs() - 2.0);
        }
    }
    (t.objective, worst, t.dynamics_residual(model).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tighter_back_off_never_lowers_the_optimum(x0 in 0.0f64..1.2, delta in 0.0f64..0.3, extra in 0.0f64..0.3) {
        let b = scalar_linear();
        let (j_loose, viol, dyn_res) = max_node_violation(&b.model, &pulled_controller(&b, delta), x0, delta);
        let (j_tight, viol_t, dyn_res_t) =
            max_node_violation(&b.model, &pulled_controller(&b, delta + extra), x0, delta + extra);
        prop_assert!(j_tight >= j_loose - 1e-6, "tight {j_tight} < loose {j_loose}");
        prop_assert!(viol <= 1e-7 && viol_t <= 1e-7, "violations {viol} {viol_t}");
        prop_assert!(dyn_res <= 1e-6 && dyn_res_t <= 1e-6, "dynamics residuals {dyn_res} {dyn_res_t}");
    }

    #[test]
    fn box_fit_is_no_worse_than_any_vertex(
        ca in 0.05f64..1.0,
        cb in 0.0f64..1.0,
        u in 0.0f64..2.0,
        k in 0.5f64..1.5,
        noise in -0.01f64..0.01,
    ) {
        let b = benchmark_reactor();
        let (x, uu) = ([ca, cb], [u]);
        let measured = b.model.step(&x, &uu, &[k, noise]).unwrap();
        let prev = b.uncertainty.nominal();
        let e = estimate_box(&b.model, &x, &uu, &measured, &b.uncertainty, &prev, &[0.0, 0.0]).unwrap();
        let residual = |d: &[f64]| -> f64 {
            let p = b.model.step(&x, &uu, d).unwrap();
            p.iter().zip(&measured).map(|(a, m)| (a - m).powi(2)).sum()
        };
        let best_vertex = sample_box_vertices(&b.uncertainty, true)
            .unwrap()
            .vectors
            .iter()
            .map(|d| residual(d))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(e.residual <= best_vertex + 1e-12, "box {} > vertex {best_vertex}", e.residual);
        prop_assert!((residual(&e.d_bar) - e.residual).abs() <= 1e-12);
    }
}
