//! Uncertain discrete-time systems `x+ = f(x, u, d)` with their constraint
//! sets, plus the built-in benchmark instances.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ad::{self, Ad};
use crate::error::{check_dim, check_finite, Error, Result};

/// `(x, u, d) -> x+` for discrete maps, `(x, u, d) -> dx/dt` for ODEs.
pub type DynamicsFn = Arc<dyn Fn(&[Ad], &[Ad], &[Ad]) -> Vec<Ad> + Send + Sync>;
/// Scalar constraint `g(x, u)`, satisfied iff `g <= 0`.
pub type ConstraintFn = Arc<dyn Fn(&[Ad], &[Ad]) -> Ad + Send + Sync>;
/// Stage cost `l(z, v, v_prev)`; `v_prev` is the input applied one step earlier.
pub type StageCostFn = Arc<dyn Fn(&[Ad], &[Ad], &[Ad]) -> Ad + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&[Ad]) -> Ad + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNBOUNDED: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi || self.lo.is_nan() || self.hi.is_nan()
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.max(self.lo).min(self.hi)
    }
}

#[derive(Clone)]
pub struct Constraint {
    pub name: String,
    pub g: ConstraintFn,
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Constraint").field("name", &self.name).finish()
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub n_x: usize,
    pub n_u: usize,
    pub n_d: usize,
    f: DynamicsFn,
    pub state_bounds: Vec<Interval>,
    pub input_bounds: Vec<Interval>,
    pub constraints: Vec<Constraint>,
    pub dt: f64,
    pub state_names: Vec<String>,
    pub input_names: Vec<String>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("n_x", &self.n_x)
            .field("n_u", &self.n_u)
            .field("n_d", &self.n_d)
            .field("state_bounds", &self.state_bounds)
            .field("input_bounds", &self.input_bounds)
            .field("constraints", &self.constraints)
            .field("dt", &self.dt)
            .finish()
    }
}

pub struct ModelBuilder {
    name: String,
    n_x: usize,
    n_u: usize,
    n_d: usize,
    f: DynamicsFn,
    state_bounds: Option<Vec<Interval>>,
    input_bounds: Vec<Interval>,
    constraints: Vec<Constraint>,
    dt: f64,
    state_names: Option<Vec<String>>,
    input_names: Option<Vec<String>>,
}

impl ModelBuilder {
    pub fn state_bounds(mut self, b: Vec<Interval>) -> Self {
        self.state_bounds = Some(b);
        self
    }

    pub fn constraint(
        mut self,
        name: &str,
        g: impl Fn(&[Ad], &[Ad]) -> Ad + Send + Sync + 'static,
    ) -> Self {
        self.constraints.push(Constraint {
            name: name.to_string(),
            g: Arc::new(g),
        });
        self
    }

    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn names(mut self, states: &[&str], inputs: &[&str]) -> Self {
        self.state_names = Some(states.iter().map(|s| s.to_string()).collect());
        self.input_names = Some(inputs.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn build(self) -> Result<ModelSpec> {
        let state_bounds = self
            .state_bounds
            .unwrap_or_else(|| vec![Interval::UNBOUNDED; self.n_x]);
        check_dim("state bounds", self.n_x, state_bounds.len())?;
        check_dim("input bounds", self.n_u, self.input_bounds.len())?;
        if let Some(b) = self.input_bounds.iter().find(|b| !b.is_finite() || b.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "input bounds must be finite and nonempty, got [{}, {}]",
                b.lo, b.hi
            )));
        }
        if state_bounds.iter().any(Interval::is_empty) {
            return Err(Error::InvalidArgument("empty state bound".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        let state_names = self
            .state_names
            .unwrap_or_else(|| (0..self.n_x).map(|i| format!("x{i}")).collect());
        let input_names = self
            .input_names
            .unwrap_or_else(|| (0..self.n_u).map(|i| format!("u{i}")).collect());
        check_dim("state names", self.n_x, state_names.len())?;
        check_dim("input names", self.n_u, input_names.len())?;
        Ok(ModelSpec {
            name: self.name,
            n_x: self.n_x,
            n_u: self.n_u,
            n_d: self.n_d,
            f: self.f,
            state_bounds,
            input_bounds: self.input_bounds,
            constraints: self.constraints,
            dt: self.dt,
            state_names,
            input_names,
        })
    }
}

impl ModelSpec {
    /// Starts a discrete-time model `x+ = f(x, u, d)`.
    pub fn discrete(
        name: &str,
        dims: (usize, usize, usize),
        input_bounds: Vec<Interval>,
        f: impl Fn(&[Ad], &[Ad], &[Ad]) -> Vec<Ad> + Send + Sync + 'static,
    ) -> ModelBuilder {
        ModelBuilder {
            name: name.to_string(),
            n_x: dims.0,
            n_u: dims.1,
            n_d: dims.2,
            f: Arc::new(f),
            state_bounds: None,
            input_bounds,
            constraints: Vec::new(),
            dt: 1.0,
            state_names: None,
            input_names: None,
        }
    }

    /// Wraps a continuous-time field into a discrete model: one RK4 step per
    /// sampling interval with input and uncertainty held constant.
    pub fn continuous(
        name: &str,
        dims: (usize, usize, usize),
        input_bounds: Vec<Interval>,
        dt: f64,
        ode: impl Fn(&[Ad], &[Ad], &[Ad]) -> Vec<Ad> + Send + Sync + 'static,
    ) -> ModelBuilder {
        let ode: DynamicsFn = Arc::new(ode);
        let f = move |x: &[Ad], u: &[Ad], d: &[Ad]| rk4_ad(&ode, x, u, d, dt);
        Self::discrete(name, dims, input_bounds, f).dt(dt)
    }

    pub fn n_c(&self) -> usize {
        self.constraints.len()
    }

    /// Dynamics evaluated on (possibly seeded) AD arguments.
    pub fn f_ad(&self, x: &[Ad], u: &[Ad], d: &[Ad]) -> Vec<Ad> {
        (self.f)(x, u, d)
    }

    pub fn dynamics(&self) -> &DynamicsFn {
        &self.f
    }

    pub fn step(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", self.n_x, x.len())?;
        check_dim("input", self.n_u, u.len())?;
        check_dim("uncertainty", self.n_d, d.len())?;
        let next = ad::values(&self.f_ad(&ad::constants(x), &ad::constants(u), &ad::constants(d)));
        check_dim("dynamics output", self.n_x, next.len())?;
        check_finite("model step (blow-up)", &next)?;
        Ok(next)
    }

    /// Raw constraint values `g_i(x, u)`.
    pub fn constraint_values(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim("state", self.n_x, x.len())?;
        check_dim("input", self.n_u, u.len())?;
        let (xa, ua) = (ad::constants(x), ad::constants(u));
        Ok(self.constraints.iter().map(|c| (c.g)(&xa, &ua).val).collect())
    }

    /// Residuals `g_i(x, u) + delta_i`; an entry `<= 0` is satisfied under
    /// the tightening.
    pub fn evaluate_constraints(&self, x: &[f64], u: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
        check_dim("tightening vector", self.n_c(), delta.len())?;
        if delta.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidArgument("tightening must be nonnegative".into()));
        }
        let g = self.constraint_values(x, u)?;
        Ok(g.iter().zip(delta).map(|(g, d)| g + d).collect())
    }

    /// Per-constraint violation magnitudes `max(0, g_i(x, u))`.
    pub fn violations(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .constraint_values(x, u)?
            .into_iter()
            .map(|g| g.max(0.0))
            .collect())
    }
}

fn rk4_ad(ode: &DynamicsFn, x: &[Ad], u: &[Ad], d: &[Ad], dt: f64) -> Vec<Ad> {
    let axpy = |x: &[Ad], k: &[Ad], h: f64| -> Vec<Ad> {
        x.iter().zip(k).map(|(xi, ki)| xi + &(ki * h)).collect()
    };
    let k1 = ode(x, u, d);
    let k2 = ode(&axpy(x, &k1, 0.5 * dt), u, d);
    let k3 = ode(&axpy(x, &k2, 0.5 * dt), u, d);
    let k4 = ode(&axpy(x, &k3, dt), u, d);
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let incr = &(&(&k1[i] + &(&k2[i] * 2.0)) + &(&k3[i] * 2.0)) + &k4[i];
            xi + &(incr * (dt / 6.0))
        })
        .collect()
}

/// Classical fourth-order Runge-Kutta step of `dx/dt = ode(x, u, d)` over
/// `dt`, with `u` and `d` held constant.
pub fn integrate_rk4(
    ode: &DynamicsFn,
    x: &[f64],
    u: &[f64],
    d: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("rk4 step must be positive, got {dt}")));
    }
    let (u, d) = (ad::constants(u), ad::constants(d));
    let mut xs = ad::constants(x);
    let mut stages = Vec::with_capacity(4);
    for (i, h) in [0.0, 0.5 * dt, 0.5 * dt, dt].into_iter().enumerate() {
        let arg: Vec<Ad> = if i == 0 {
            xs.clone()
        } else {
            let prev: &Vec<Ad> = &stages[i - 1];
            xs.iter().zip(prev).map(|(a, k)| Ad::constant(a.val + h * k.val)).collect()
        };
        let k = ode(&arg, &u, &d);
        check_dim("ode output", x.len(), k.len())?;
        check_finite("rk4 stage", &ad::values(&k))?;
        stages.push(k);
    }
    for (i, xi) in xs.iter_mut().enumerate() {
        let incr = stages[0][i].val + 2.0 * stages[1][i].val + 2.0 * stages[2][i].val + stages[3][i].val;
        xi.val += dt / 6.0 * incr;
    }
    let out = ad::values(&xs);
    check_finite("rk4 result", &out)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    /// Constant over an episode (a model parameter).
    Parametric,
    /// Redrawn at every sampling instant.
    Additive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertainParam {
    pub name: String,
    pub nominal: f64,
    pub lower: f64,
    pub upper: f64,
    pub significant: bool,
    pub kind: UncertaintyKind,
}

/// The uncertainty box `D = {d | d_lo <= d <= d_hi}` with a nominal point
/// and a significance flag per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UncertaintyDecl {
    pub params: Vec<UncertainParam>,
}

impl UncertaintyDecl {
    pub fn new(params: Vec<UncertainParam>) -> Result<Self> {
        let decl = UncertaintyDecl { params };
        decl.validate()?;
        Ok(decl)
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.params {
            if !(p.lower <= p.nominal && p.nominal <= p.upper) {
                return Err(Error::InvalidArgument(format!(
                    "uncertainty `{}` needs lower <= nominal <= upper, got [{}, {}] with nominal {}",
                    p.name, p.lower, p.upper, p.nominal
                )));
            }
        }
        Ok(())
    }

    pub fn n_d(&self) -> usize {
        self.params.len()
    }

    pub fn nominal(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.nominal).collect()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.upper).collect()
    }

    pub fn significant_indices(&self) -> Vec<usize> {
        (0..self.n_d()).filter(|&i| self.params[i].significant).collect()
    }

    pub fn n_significant(&self) -> usize {
        self.significant_indices().len()
    }

    pub fn indices_of(&self, kind: UncertaintyKind) -> Vec<usize> {
        (0..self.n_d()).filter(|&i| self.params[i].kind == kind).collect()
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        d.len() == self.n_d()
            && self
                .params
                .iter()
                .zip(d)
                .all(|(p, &v)| p.lower <= v && v <= p.upper)
    }

    /// Box over the significant dimensions with every other dimension pinned
    /// to its nominal value.
    pub fn significant_box(&self) -> Vec<Interval> {
        self.params
            .iter()
            .map(|p| {
                if p.significant {
                    Interval::new(p.lower, p.upper)
                } else {
                    Interval::new(p.nominal, p.nominal)
                }
            })
            .collect()
    }

    /// Copy with the additive dimensions collapsed to zero width at nominal.
    pub fn without_additive(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| match p.kind {
                UncertaintyKind::Additive => UncertainParam {
                    lower: p.nominal,
                    upper: p.nominal,
                    ..p.clone()
                },
                UncertaintyKind::Parametric => p.clone(),
            })
            .collect();
        UncertaintyDecl { params }
    }
}

/// A model together with its uncertainty, cost and episode settings.
#[derive(Clone)]
pub struct Benchmark {
    pub model: ModelSpec,
    pub uncertainty: UncertaintyDecl,
    pub stage_cost: StageCostFn,
    pub terminal_cost: TerminalCostFn,
    pub x0: Vec<f64>,
    /// Index of the state whose target ends an episode, with the target.
    pub stop: Option<(usize, f64)>,
}

impl fmt::Debug for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Benchmark")
            .field("model", &self.model)
            .field("uncertainty", &self.uncertainty)
            .field("x0", &self.x0)
            .field("stop", &self.stop)
            .finish()
    }
}

pub const REACTOR_DT: f64 = 0.1;
pub const REACTOR_CA_MAX: f64 = 1.0;
pub const REACTOR_MOVE_PENALTY: f64 = 0.1;
pub const REACTOR_PRODUCT_TARGET: f64 = 0.8;

/// Two-state fed-batch reactor A -> B with explicit Euler stepping:
///
/// ```text
/// cA+ = cA + dt (-k cA + u)
/// cB+ = cB + dt k cA + w
/// ```
///
/// Feed `u` in [0, 2], safety limit `cA <= 1`, rate constant `k` in
/// [0.5, 1.5] (significant), additive `w` in [-0.01, 0.01] on `cB`.
pub fn benchmark_reactor() -> Benchmark {
    benchmark_reactor_with_dt(REACTOR_DT)
}

pub fn benchmark_reactor_with_dt(dt: f64) -> Benchmark {
    let model = ModelSpec::discrete(
        "benchmark_reactor",
        (2, 1, 2),
        vec![Interval::new(0.0, 2.0)],
        move |x, u, d| {
            let (ca, cb) = (&x[0], &x[1]);
            let (k, w) = (&d[0], &d[1]);
            let rate = k * ca;
            vec![
                ca + &((&u[0] - &rate) * dt),
                &(cb + &(&rate * dt)) + w,
            ]
        },
    )
    .dt(dt)
    .names(&["c_A", "c_B"], &["feed"])
    .constraint("c_A_max", |x, _u| &x[0] - REACTOR_CA_MAX)
    .build()
    .expect("benchmark reactor is well-formed");

    let uncertainty = UncertaintyDecl::new(vec![
        UncertainParam {
            name: "k".into(),
            nominal: 1.0,
            lower: 0.5,
            upper: 1.5,
            significant: true,
            kind: UncertaintyKind::Parametric,
        },
        UncertainParam {
            name: "w".into(),
            nominal: 0.0,
            lower: -0.01,
            upper: 0.01,
            significant: false,
            kind: UncertaintyKind::Additive,
        },
    ])
    .expect("benchmark uncertainty is well-formed");

    Benchmark {
        model,
        uncertainty,
        stage_cost: Arc::new(|z, v, v_prev| {
            let dv = &v[0] - &v_prev[0];
            -&z[1] + dv.square() * REACTOR_MOVE_PENALTY
        }),
        terminal_cost: Arc::new(|_z| Ad::constant(0.0)),
        x0: vec![0.0, 0.0],
        stop: Some((1, REACTOR_PRODUCT_TARGET)),
    }
}

/// `x+ = x + u + d` with quadratic regulation cost.
pub fn scalar_linear() -> Benchmark {
    let model = ModelSpec::discrete(
        "scalar_linear",
        (1, 1, 1),
        vec![Interval::new(-2.0, 2.0)],
        |x, u, d| vec![&(&x[0] + &u[0]) + &d[0]],
    )
    .constraint("x_max", |x, _u| &x[0] - 1.5)
    .build()
    .expect("scalar model is well-formed");
    let uncertainty = UncertaintyDecl::new(vec![UncertainParam {
        name: "d".into(),
        nominal: 0.0,
        lower: -0.1,
        upper: 0.1,
        significant: true,
        kind: UncertaintyKind::Additive,
    }])
    .expect("scalar uncertainty is well-formed");
    Benchmark {
        model,
        uncertainty,
        stage_cost: Arc::new(|z, v, _| z[0].square() + v[0].square()),
        terminal_cost: Arc::new(|z| z[0].square()),
        x0: vec![1.0],
        stop: None,
    }
}

pub const MODEL_NAMES: &[&str] = &["scalar_linear", "benchmark_reactor"];

/// Looks up a built-in model by name; `dt` overrides the sampling interval
/// where the model supports it.
pub fn builtin(name: &str, dt: Option<f64>) -> Result<Benchmark> {
    match name {
        "benchmark_reactor" => Ok(benchmark_reactor_with_dt(dt.unwrap_or(REACTOR_DT))),
        "scalar_linear" => Ok(scalar_linear()),
        other => Err(Error::InvalidArgument(format!(
            "unknown model `{other}`; expected one of {MODEL_NAMES:?}"
        ))),
    }
}
