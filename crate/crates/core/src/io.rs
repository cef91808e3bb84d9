//! Persistence: trace CSVs, JSON-lines summaries, comparison tables and
//! per-signal plot series. Every file records the config hash and seed.
//!
//! Trace CSV columns, one row per step `t = 0..=T`:
//!
//! ```text
//! t,x[0..n_x],z[0..n_x],u[0..n_u],dbar[0..n_d],viol[0..n_c],t_primary_ms,t_ancillary_ms
//! ```
//!
//! `u` and the timings are blank on the final row, `dbar` on the first.
//! Timing columns are left blank unless requested because they are the only
//! nondeterministic values. Numbers use 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ad;
use crate::closed_loop::{ClosedLoopTrace, ComparisonTable};
use crate::error::Result;
use crate::model::{Interval, ModelSpec};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# config_sha256={} seed={}", self.config_sha256, self.seed)
    }
}

pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_header(model: &ModelSpec) -> String {
    let mut cols = vec!["t".to_string()];
    let mut push = |name: &str, n: usize| cols.extend((0..n).map(|i| format!("{name}[{i}]")));
    push("x", model.n_x);
    push("z", model.n_x);
    push("u", model.n_u);
    push("dbar", model.n_d);
    push("viol", model.n_c());
    cols.push("t_primary_ms".into());
    cols.push("t_ancillary_ms".into());
    cols.join(",")
}

fn push_cells(row: &mut Vec<String>, values: Option<&[f64]>, n: usize) {
    match values {
        Some(v) => row.extend(v.iter().map(|&x| fmt_num(x))),
        None => row.extend(std::iter::repeat_n(String::new(), n)),
    }
}

pub fn trace_csv(trace: &ClosedLoopTrace, model: &ModelSpec, prov: &Provenance, timing: bool) -> String {
    let mut out = String::new();
    writeln!(out, "{}", prov.comment()).unwrap();
    writeln!(out, "{}", trace_header(model)).unwrap();
    for t in 0..trace.x.len() {
        let mut row = vec![t.to_string()];
        push_cells(&mut row, Some(&trace.x[t]), model.n_x);
        push_cells(&mut row, trace.z.get(t).map(Vec::as_slice), model.n_x);
        push_cells(&mut row, trace.u.get(t).map(Vec::as_slice), model.n_u);
        push_cells(&mut row, trace.dbar.get(t).and_then(|d| d.as_deref()), model.n_d);
        push_cells(&mut row, trace.violations.get(t).map(Vec::as_slice), model.n_c());
        for series in [&trace.t_primary_ms, &trace.t_ancillary_ms] {
            row.push(match series.get(t) {
                Some(&v) if timing => fmt_num(v),
                _ => String::new(),
            });
        }
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn write_trace_csv(path: &Path, trace: &ClosedLoopTrace, model: &ModelSpec, prov: &Provenance, timing: bool) -> Result<()> {
    write_text(path, &trace_csv(trace, model, prov, timing))
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_sha256: &'a str,
    master_seed: u64,
    #[serde(flatten)]
    record: &'a T,
}

fn stamp<'a, T: Serialize>(prov: &'a Provenance, record: &'a T) -> Stamped<'a, T> {
    Stamped {
        config_sha256: &prov.config_sha256,
        master_seed: prov.seed,
        record,
    }
}

/// One JSON object per line, each carrying the provenance fields.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T], prov: &Provenance) -> Result<()> {
    create_parent(path)?;
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, &stamp(prov, r))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Pretty JSON with the provenance fields merged in.
pub fn write_json<T: Serialize>(path: &Path, record: &T, prov: &Provenance) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(&stamp(prov, record))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn comparison_csv(table: &ComparisonTable, prov: &Provenance) -> String {
    let mut out = String::new();
    writeln!(out, "{}", prov.comment()).unwrap();
    let mut header = vec!["scheme", "scenarios", "episodes", "failed_episodes", "avg_steps"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(table.constraints.iter().map(|c| format!("violating_episodes[{c}]")));
    header.extend(table.constraints.iter().map(|c| format!("max_violation[{c}]")));
    header.push("avg_step_ms".into());
    writeln!(out, "{}", header.join(",")).unwrap();
    for r in &table.rows {
        let mut row = vec![
            r.scheme.clone(),
            r.scenarios.to_string(),
            r.episodes.to_string(),
            r.failed_episodes.to_string(),
            fmt_num(r.avg_steps),
        ];
        row.extend(r.violating_episodes.iter().map(usize::to_string));
        row.extend(r.max_violation.iter().map(|&v| fmt_num(v)));
        row.push(fmt_num(r.avg_step_ms));
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    out
}

/// Metrics as rows and schemes as columns.
pub fn comparison_text(table: &ComparisonTable) -> String {
    let mut rows: Vec<(String, Vec<String>)> = vec![
        ("Average steps to target".into(), table.rows.iter().map(|r| format!("{:.2}", r.avg_steps)).collect()),
    ];
    for (i, c) in table.constraints.iter().enumerate() {
        rows.push((
            format!("Violating episodes ({c})"),
            table.rows.iter().map(|r| r.violating_episodes[i].to_string()).collect(),
        ));
    }
    rows.push(("Avg. time per step [ms]".into(), table.rows.iter().map(|r| format!("{:.2}", r.avg_step_ms)).collect()));
    rows.push(("Scenarios".into(), table.rows.iter().map(|r| r.scenarios.to_string()).collect()));
    rows.push(("Episodes (failed)".into(), table.rows.iter().map(|r| format!("{} ({})", r.episodes, r.failed_episodes)).collect()));

    let label_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max("Metric".len());
    let col_w: Vec<usize> = table
        .rows
        .iter()
        .enumerate()
        .map(|(j, r)| rows.iter().map(|row| row.1[j].len()).max().unwrap_or(0).max(r.scheme.len()))
        .collect();
    let mut out = format!("{:<label_w$}", "Metric");
    for (r, w) in table.rows.iter().zip(&col_w) {
        write!(out, "  {:>w$}", r.scheme).unwrap();
    }
    out.push('\n');
    for (label, cells) in &rows {
        write!(out, "{label:<label_w$}").unwrap();
        for (c, w) in cells.iter().zip(&col_w) {
            write!(out, "  {c:>w$}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Per-state bounds: the state box intersected with any path constraint of
/// the form `a * x_j + c <= 0` (unit dependence on one state, none on inputs).
pub fn state_limits(model: &ModelSpec) -> Vec<Interval> {
    let mut limits = model.state_bounds.clone();
    let dim = model.n_x + model.n_u;
    let probe = |c: &crate::model::Constraint, base: f64| {
        let x = ad::seed(&vec![base; model.n_x], 0, dim);
        let u = ad::seed(&vec![base; model.n_u], model.n_x, dim);
        (c.g)(&x, &u)
    };
    for c in &model.constraints {
        let (g0, g1) = (probe(c, 0.25), probe(c, 0.75));
        let grad0: Vec<f64> = (0..dim).map(|i| g0.d(i)).collect();
        let grad1: Vec<f64> = (0..dim).map(|i| g1.d(i)).collect();
        if grad0 != grad1 {
            continue;
        }
        let nz: Vec<usize> = (0..dim).filter(|&i| grad0[i] != 0.0).collect();
        let [j] = nz[..] else { continue };
        if j >= model.n_x {
            continue;
        }
        let a = grad0[j];
        let bound = -(g0.value() - a * 0.25) / a;
        let l = &mut limits[j];
        if a > 0.0 {
            l.hi = l.hi.min(bound);
        } else {
            l.lo = l.lo.max(bound);
        }
    }
    limits
}

fn series_csv(prov: &Provenance, rows: impl Iterator<Item = (f64, f64)>, bound: Interval) -> String {
    let mut out = String::new();
    writeln!(out, "{}", prov.comment()).unwrap();
    writeln!(out, "time,value,lower,upper").unwrap();
    for (time, v) in rows {
        writeln!(out, "{},{},{},{}", fmt_num(time), fmt_num(v), fmt_num(bound.lo), fmt_num(bound.hi)).unwrap();
    }
    out
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// Writes `state_<name>.csv`, `primary_<name>.csv`, `input_<name>.csv` and
/// `constraint_<name>.csv` under `dir`, each with columns
/// `time,value,lower,upper`. States carry their original bounds, inputs the
/// input set, constraints the bound `g <= 0`.
pub fn emit_plot_data(trace: &ClosedLoopTrace, model: &ModelSpec, dir: &Path, prov: &Provenance) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let time = |t: usize| t as f64 * model.dt;
    let limits = state_limits(model);
    let mut written = Vec::new();
    let mut emit = |name: String, text: String| -> Result<()> {
        let p = dir.join(format!("{}.csv", file_safe(&name)));
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    for i in 0..model.n_x {
        let name = &model.state_names[i];
        emit(format!("state_{name}"), series_csv(prov, trace.x.iter().enumerate().map(|(t, x)| (time(t), x[i])), limits[i]))?;
        emit(format!("primary_{name}"), series_csv(prov, trace.z.iter().enumerate().map(|(t, z)| (time(t), z[i])), limits[i]))?;
    }
    for i in 0..model.n_u {
        emit(
            format!("input_{}", model.input_names[i]),
            series_csv(prov, trace.u.iter().enumerate().map(|(t, u)| (time(t), u[i])), model.input_bounds[i]),
        )?;
    }
    for (i, c) in model.constraints.iter().enumerate() {
        let values = trace.x.iter().enumerate().map(|(t, x)| {
            let u = trace.u.get(t).or(trace.u.last()).cloned().unwrap_or_else(|| vec![0.0; model.n_u]);
            let g = model.constraint_values(x, &u).map(|g| g[i]).unwrap_or(f64::NAN);
            (time(t), g)
        });
        emit(format!("constraint_{}", c.name), series_csv(prov, values, Interval::new(f64::NEG_INFINITY, 0.0)))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::benchmark_reactor;

    #[test]
    fn reactor_state_limits_pick_up_the_safety_bound() {
        let m = benchmark_reactor().model;
        let l = state_limits(&m);
        assert_eq!(l[0].hi, 1.0);
        assert_eq!(l[1].hi, f64::INFINITY);
    }

    #[test]
    fn number_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789] {
            assert_eq!(fmt_num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn header_layout() {
        let m = benchmark_reactor().model;
        assert_eq!(
            trace_header(&m),
            "t,x[0],x[1],z[0],z[1],u[0],dbar[0],dbar[1],viol[0],t_primary_ms,t_ancillary_ms"
        );
    }
}
