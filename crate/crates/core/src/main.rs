use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tems::calibration::{calibrate_iteratively, calibration_episodes, verify_tightening};
use tems::closed_loop::{derive_seed, grid_episodes, run_episodes, summarize, ComparisonTable, EpisodeSpec, EpisodeSummary};
use tems::config::{load_config, ExperimentConfig};
use tems::io::{self, Provenance};

#[derive(Parser)]
#[command(name = "tems", version, about = "Tube-enhanced multi-stage NMPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop episodes and write traces, summaries and plot series.
    Run {
        #[command(flatten)]
        common: Common,
        /// Scheme to run (default: the first TEMS scheme).
        #[arg(long)]
        scheme: Option<String>,
        /// Fill the solve-time columns of the trace CSVs.
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        no_plots: bool,
    },
    /// Derive the constraint back-off by simulation and verify it.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        no_verify: bool,
    },
    /// Run every configured scheme on the same grid and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Print scenario and node counts of the configured tree.
    TreeInfo {
        #[arg(long)]
        config: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Master seed (default: the config's).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use this many episodes, evenly spread over the grid.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, env = "TEMS_WORKERS", default_value_t = 1)]
    workers: usize,
}

struct Session {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    prov: Provenance,
}

impl Common {
    fn open(&self) -> Result<Session> {
        let cfg = load_config(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        let seed = self.seed.unwrap_or(cfg.simulation.seed);
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let prov = Provenance {
            config_sha256: cfg.hash(),
            seed,
        };
        Ok(Session { cfg, seed, out, prov })
    }

    fn select(&self, episodes: Vec<EpisodeSpec>) -> Result<Vec<EpisodeSpec>> {
        match self.episodes {
            None => Ok(episodes),
            Some(0) => bail!("--episodes must be positive"),
            Some(n) if n >= episodes.len() => Ok(episodes),
            Some(n) => Ok((0..n).map(|i| episodes[i * episodes.len() / n].clone()).collect()),
        }
    }
}

/// Marks the output directory as incomplete until the command finishes.
struct Incomplete(PathBuf);

impl Incomplete {
    fn new(out: &Path, what: &str) -> Result<Self> {
        let p = out.join("INCOMPLETE");
        std::fs::write(&p, format!("{what} did not finish; outputs here are partial\n"))?;
        Ok(Incomplete(p))
    }

    fn done(self) -> Result<()> {
        std::fs::remove_file(&self.0)?;
        Ok(())
    }
}

fn summaries(outcomes: &[tems::closed_loop::EpisodeOutcome]) -> Result<Vec<EpisodeSummary>> {
    outcomes
        .iter()
        .map(|o| match &o.result {
            Ok((s, _)) => Ok(s.clone()),
            Err(e) => bail!("episode {}: {e}", o.spec.index),
        })
        .collect()
}

fn run(common: &Common, scheme: Option<&str>, timing: bool, plots: bool) -> Result<()> {
    let s = common.open()?;
    let marker = Incomplete::new(&s.out, "run")?;
    let spec = s.cfg.scheme_spec(scheme)?;
    let scheme = s.cfg.build_scheme(spec, None)?;
    let plant = s.cfg.plant()?;
    let episodes = common.select(grid_episodes(&plant.uncertainty, &s.cfg.simulation.grid, s.seed)?)?;
    let outcomes = run_episodes(&plant, &scheme, &episodes, common.workers, true)?;
    for o in &outcomes {
        let Ok((summary, Some(trace))) = &o.result else { continue };
        let stem = format!("{}_ep{:04}", scheme.name, o.spec.index);
        let prov = Provenance {
            seed: o.spec.seed,
            ..s.prov.clone()
        };
        io::write_trace_csv(&s.out.join("traces").join(format!("{stem}.csv")), trace, &plant.model, &prov, timing)?;
        if plots {
            io::emit_plot_data(trace, &plant.model, &s.out.join("plots").join(&stem), &prov)?;
        }
        println!(
            "{stem}: k-grid point {:?}, {} steps, end {:?}, max violation {:?}",
            summary.parameters, summary.steps, summary.end, summary.max_violation
        );
    }
    io::write_jsonl(&s.out.join("summaries.jsonl"), &summaries(&outcomes)?, &s.prov)?;
    io::write_text(&s.out.join("config.json"), &s.cfg.to_json())?;
    marker.done()
}

fn calibrate(common: &Common, scheme: Option<&str>, verify: bool) -> Result<()> {
    let s = common.open()?;
    let marker = Incomplete::new(&s.out, "calibrate")?;
    let spec = s.cfg.scheme_spec(scheme)?;
    let scheme = s.cfg.build_scheme(spec, None)?;
    let plant = s.cfg.plant()?;
    let settings = &s.cfg.calibration;
    let batch = common.select(calibration_episodes(&plant.uncertainty, settings.random_seeds, s.seed)?)?;
    let mut report = calibrate_iteratively(&scheme, &plant, &batch, settings, common.workers)?;
    for (i, r) in report.rounds.iter().enumerate() {
        println!(
            "round {}: delta {:?}, max violation {:?}, violating episodes {:?}",
            i + 1,
            r.delta,
            r.max_violation,
            r.violating_episodes
        );
    }
    println!("delta: {:?}", report.delta);
    if verify {
        // fresh additive noise, distinct from the calibration batch
        let v = verify_tightening(&scheme, &plant, &s.cfg.simulation.grid, &report.delta, derive_seed(s.seed, 0x5EED), common.workers)?;
        println!(
            "verification: {} episodes, violating episodes {:?}, max violation {:?}",
            v.episodes, v.violating_episodes, v.max_violation
        );
        report.verification = Some(v);
    }
    io::write_json(&s.out.join("tightening.json"), &report, &s.prov)?;
    marker.done()
}

fn compare(common: &Common) -> Result<()> {
    let s = common.open()?;
    let marker = Incomplete::new(&s.out, "compare")?;
    let plant = s.cfg.plant()?;
    let episodes = common.select(grid_episodes(&plant.uncertainty, &s.cfg.simulation.grid, s.seed)?)?;
    let mut table = ComparisonTable {
        constraints: plant.model.constraints.iter().map(|c| c.name.clone()).collect(),
        rows: Vec::new(),
    };
    let mut all = Vec::new();
    for scheme in s.cfg.build_schemes()? {
        let outcomes = run_episodes(&plant, &scheme, &episodes, common.workers, false)?;
        table.rows.push(summarize(&scheme, &outcomes, plant.model.n_c()));
        all.extend(summaries(&outcomes)?);
    }
    io::write_text(&s.out.join("comparison.csv"), &io::comparison_csv(&table, &s.prov))?;
    let text = io::comparison_text(&table);
    io::write_text(&s.out.join("comparison.txt"), &format!("{}\n{text}", s.prov.comment()))?;
    io::write_jsonl(&s.out.join("summaries.jsonl"), &all, &s.prov)?;
    print!("{text}");
    marker.done()
}

fn tree_info(config: &Path, json: bool) -> Result<()> {
    let cfg = load_config(config).with_context(|| format!("loading {}", config.display()))?;
    let info = cfg.tree_info()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&info)?);
        return Ok(());
    }
    println!("{}", info.line());
    println!("horizon: {}, robust horizon: {}", info.horizon, info.robust_horizon);
    for spec in &cfg.schemes {
        let r = cfg.realizations(spec)?.len();
        let n_r = if r == 1 { 1 } else { spec.robust_horizon.unwrap_or(cfg.tree.robust_horizon) };
        println!("  {}: {} scenarios", spec.name, r.pow(n_r as u32));
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Run {
            common,
            scheme,
            timing,
            no_plots,
        } => run(common, scheme.as_deref(), *timing, !no_plots),
        Command::Calibrate {
            common,
            scheme,
            no_verify,
        } => calibrate(common, scheme.as_deref(), !no_verify),
        Command::Compare { common } => compare(common),
        Command::TreeInfo { config, json } => tree_info(config, *json),
    }
}
