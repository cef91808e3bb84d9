use tems::closed_loop::*;
use tems::controllers::{make_baseline, AncillaryConfig, SchemeKind, SchemeOptions};
use tems::model::{benchmark_reactor, Benchmark};
use tems::nlp::SqpSettings;

fn scheme_for(bench: &Benchmark, kind: SchemeKind, dims: Option<Vec<usize>>, delta: f64) -> Scheme {
    let opts = SchemeOptions {
        horizon: 10,
        robust_horizon: 1,
        include_nominal: true,
        multi_stage_dims: dims,
        delta: vec![delta],
    };
    let anc = AncillaryConfig::new(vec![10.0, 1.0], vec![0.1]);
    let pair = make_baseline(kind, bench, &opts, &anc, &SqpSettings::default()).unwrap();
    Scheme {
        name: kind.name().into(),
        pair,
        estimator: EstimatorConfig::default(),
    }
}

fn plant(bench: &Benchmark, k: f64, max_steps: usize) -> PlantSim {
    PlantSim {
        model: bench.model.clone(),
        uncertainty: bench.uncertainty.clone(),
        parameters: vec![k, 0.0],
        law: DisturbanceLaw::Uniform,
        max_steps,
        stop: bench.stop,
        x0: bench.x0.clone(),
    }
}

/// Reactor with the additive disturbance collapsed to zero.
fn noiseless() -> Benchmark {
    let mut b = benchmark_reactor();
    b.uncertainty.params[1].lower = 0.0;
    b.uncertainty.params[1].upper = 0.0;
    b
}

#[test]
fn zero_uncertainty_primary_tracks_plant_and_matches_nominal_mpc() {
    let b = noiseless();
    let p = plant(&b, 1.0, 30);
    let tube = run_episode(&p, &scheme_for(&b, SchemeKind::Tube, None, 0.0), 3).unwrap();
    assert_eq!(tube.end, EpisodeEnd::Target);
    assert_eq!(tube.x, tube.z);
    assert_eq!(tube.u, tube.v);

    // single-controller MPC on the nominal model
    let mut mpc = scheme_for(&b, SchemeKind::Tube, None, 0.0);
    mpc.pair.kind = SchemeKind::MultiStage;
    mpc.pair.ancillary = None;
    let nominal = run_episode(&p, &mpc, 3).unwrap();
    assert_eq!(nominal.x, tube.x);
    assert_eq!(nominal.u, tube.u);
}

#[test]
fn bookkeeping_lengths() {
    let b = benchmark_reactor();
    let mut p = plant(&b, 1.2, 10);
    p.stop = None;
    let trace = run_episode(&p, &scheme_for(&b, SchemeKind::Tems, None, 0.0), 5).unwrap();
    assert_eq!(trace.end, EpisodeEnd::MaxSteps);
    assert_eq!(trace.u.len(), 10);
    assert_eq!(trace.x.len(), 11);
    assert_eq!(trace.z.len(), 11);
    assert_eq!(trace.dbar.len(), 11);
    assert_eq!(trace.violations.len(), 11);
    assert_eq!(trace.t_primary_ms.len(), 10);
    assert!(trace.dbar[0].is_none() && trace.dbar[1..].iter().all(Option::is_some));
}

#[test]
fn primary_state_recomputation_and_input_bounds() {
    let b = benchmark_reactor();
    for (k, seed) in [(0.5, 1), (0.8, 2), (1.5, 3)] {
        let trace = run_episode(&plant(&b, k, 40), &scheme_for(&b, SchemeKind::Tems, None, 0.0), seed).unwrap();
        assert_eq!(trace.primary_recomputation_error(&b.model).unwrap(), 0.0);
        for u in &trace.u {
            assert!(b.model.input_bounds[0].contains(u[0]), "{u:?}");
        }
        for d in &trace.d {
            assert!(b.uncertainty.contains(d));
        }
        // with finite candidates, z(t) is one of the previous solve's stage-1 children
        let tree = &b.model;
        for t in 1..trace.z.len() {
            let children: Vec<Vec<f64>> = [0.5, 1.0, 1.5]
                .iter()
                .map(|&k| tree.step(&trace.z[t - 1], &trace.v[t - 1], &[k, 0.0]).unwrap())
                .collect();
            assert!(children.contains(&trace.z[t]));
        }
    }
}

#[test]
fn same_seed_is_bitwise_deterministic() {
    let b = benchmark_reactor();
    let s = scheme_for(&b, SchemeKind::Tems, None, 0.0);
    let p = plant(&b, 0.7, 40);
    let mut a = run_episode(&p, &s, 42).unwrap();
    let mut c = run_episode(&p, &s, 42).unwrap();
    for t in [&mut a, &mut c] {
        t.t_primary_ms.clear();
        t.t_ancillary_ms.clear();
    }
    assert_eq!(a, c);
    let d = run_episode(&p, &s, 43).unwrap();
    assert_ne!(a.d, d.d);
}

#[test]
fn violation_counting_on_synthetic_trace() {
    let b = benchmark_reactor();
    let mut trace = run_episode(&plant(&b, 1.0, 3), &scheme_for(&b, SchemeKind::Tube, None, 0.0), 1).unwrap();
    for v in trace.violations.iter_mut() {
        v[0] = 0.0;
    }
    trace.violations[2][0] = 0.25;
    assert_eq!(trace.violating_steps(0), 1);
    assert_eq!(trace.max_violation(0), 0.25);
    let spec = EpisodeSpec {
        index: 0,
        parameters: vec![1.0, 0.0],
        seed: 1,
        law: DisturbanceLaw::Uniform,
    };
    let s = EpisodeSummary::from_trace("x", &spec, &trace, 1);
    assert_eq!(s.violating_steps, vec![1]);
    assert!(s.violated(0));
}

#[test]
fn grid_layout() {
    let b = benchmark_reactor();
    let g = GridSpec {
        points: vec![10],
        seeds_per_point: 10,
        law: DisturbanceLaw::Uniform,
    };
    let eps = grid_episodes(&b.uncertainty, &g, 9).unwrap();
    assert_eq!(eps.len(), 100);
    let mut seeds: Vec<u64> = eps.iter().map(|e| e.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    assert_eq!(seeds.len(), 100);
    assert_eq!(eps[0].parameters[0], 0.5);
    assert_eq!(eps[99].parameters[0], 1.5);

    let single = grid_episodes(&b.uncertainty, &GridSpec { points: vec![1], seeds_per_point: 1, law: DisturbanceLaw::Uniform }, 9).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].parameters, b.uncertainty.nominal());

    assert!(grid_episodes(&b.uncertainty, &GridSpec { points: vec![0], seeds_per_point: 1, law: DisturbanceLaw::Uniform }, 9).is_err());
}

#[test]
fn batch_rerun_and_duplicate_schemes_agree() {
    let b = benchmark_reactor();
    let p = plant(&b, 1.0, 40);
    let g = GridSpec {
        points: vec![3],
        seeds_per_point: 1,
        law: DisturbanceLaw::Uniform,
    };
    let s = scheme_for(&b, SchemeKind::Tems, None, 0.0);
    let (table, outcomes) = compare_schemes(&[s.clone(), s], &p, &g, 7, 1).unwrap();
    let strip = |mut r: ComparisonRow| {
        r.avg_step_ms = 0.0;
        r
    };
    assert_eq!(strip(table.rows[0].clone()), strip(table.rows[1].clone()));
    assert_eq!(table.rows[0].scenarios, 3);
    let keys = |o: &Vec<EpisodeOutcome>| {
        o.iter()
            .map(|e| {
                let s = &e.result.as_ref().unwrap().0;
                (s.steps, s.max_violation.clone(), s.seed)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(keys(&outcomes[0]), keys(&outcomes[1]));
}

#[test]
fn parallel_workers_match_sequential() {
    let b = benchmark_reactor();
    let p = plant(&b, 1.0, 40);
    let s = scheme_for(&b, SchemeKind::Tube, None, 0.0);
    let g = GridSpec {
        points: vec![4],
        seeds_per_point: 1,
        law: DisturbanceLaw::Uniform,
    };
    let a = run_batch_grid(&p, &s, &g, 3, 1).unwrap();
    let c = run_batch_grid(&p, &s, &g, 3, 2).unwrap();
    for (x, y) in a.iter().zip(&c) {
        let (x, y) = (&x.result.as_ref().unwrap().0, &y.result.as_ref().unwrap().0);
        assert_eq!((x.steps, &x.max_violation, x.index), (y.steps, &y.max_violation, y.index));
    }
}

#[test]
fn invalid_plant_parameters_are_rejected() {
    let b = benchmark_reactor();
    let mut p = plant(&b, 1.0, 5);
    p.parameters = vec![3.0, 0.0];
    assert!(run_episode(&p, &scheme_for(&b, SchemeKind::Tube, None, 0.0), 1).is_err());
}
