#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use rpslab_core::conditions::McBudget;
use rpslab_core::io::{fmt_f64, write_json};
use rpslab_core::operators::{picard_fixed_point, write_quantiles_csv};
use rpslab_core::pullback::{envelope_diagnostics, run_pullback, write_fan_csv};
use rpslab_core::sdeflow::Flow;
use rpslab_core::{
    assemble_report, parse_system, presets, Clock, DecayEnvelope, Ensemble, FlowOptions, GainConfig, GainContext, GridSpec,
    PullbackRequest, Scheme, SystemSpec, Verdict,
};

type Error = Box<dyn std::error::Error>;

const VERSION: &str = env!("CARGO_PKG_VERSION");
const OUTPUTS: [(&str, &str); 4] = [("check", "report.json"), ("simulate", "simulate.json"), ("pullback", "pullback.json"), ("fixpoint", "fixpoint.json")];

#[derive(Parser, Debug)]
#[command(name = "rpslab", version, about = "Random periodic solutions of stochastic feedback systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// system spec file
    #[arg(long, global = true, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// built-in system: goodwin, othmer_tyson, competitive, ex5_5
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// requested step; the used step is T / round(T / dt)
    #[arg(long, global = true, default_value_t = 1e-2)]
    dt: f64,
    #[arg(long, global = true, default_value_t = 64)]
    paths: usize,
    /// largest pull-back horizon in periods
    #[arg(long, global = true, default_value_t = 8)]
    nmax: usize,
    /// truncation horizon of the gain operator, in time units
    #[arg(long, global = true)]
    mtrunc: Option<f64>,
    /// Picard stopping tolerance on the rho distance
    #[arg(long, global = true, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long = "lambda-override", global = true)]
    lambda_override: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = SchemeArg::Em)]
    scheme: SchemeArg,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the standing assumptions and the small-gain condition
    Check {
        /// attach a Monte Carlo estimate of sup E R
        #[arg(long)]
        mc: bool,
    },
    /// Simulate the flow forward from x0
    Simulate {
        /// comma-separated initial state, default all ones
        #[arg(long)]
        x0: Option<String>,
        /// horizon in time units, default two periods
        #[arg(long = "t-end")]
        t_end: Option<f64>,
    },
    /// Pull-back runs from a set of initial states
    Pullback {
        /// initial state, repeatable; default 0, 1 and 5 in every component
        #[arg(long)]
        x0: Vec<String>,
        #[arg(long, default_value_t = 1)]
        nmin: usize,
        /// phase offset alpha in time units, in [0, T)
        #[arg(long, default_value_t = 0.0)]
        alpha: f64,
    },
    /// Picard iteration of the gain operator and the realised solution
    Fixpoint {
        #[arg(long, default_value_t = 50)]
        kmax: usize,
    },
    /// Collate the outputs of earlier commands in --out
    Report,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeArg {
    Em,
    Milstein,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Em => Scheme::EulerMaruyama,
            SchemeArg::Milstein => Scheme::Milstein,
        }
    }
}

#[derive(Serialize)]
struct Provenance {
    version: &'static str,
    command: &'static str,
    system: String,
    seed: u64,
    dt: f64,
    steps_per_period: i64,
    paths: usize,
    scheme: Scheme,
}

struct Run {
    cli: Cli,
    spec: SystemSpec,
    source: String,
    clock: Clock,
}

impl Run {
    fn load(cli: Cli) -> Result<Run, Error> {
        let (spec, source) = match (&cli.spec, &cli.preset) {
            (Some(p), _) => {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                (parse_system(&text)?, p.display().to_string())
            }
            (None, Some(name)) => (presets::load(name)?, format!("preset:{name}")),
            (None, None) => return Err("one of --spec or --preset is required".into()),
        };
        if !(cli.dt > 0.0) || cli.paths == 0 || cli.nmax == 0 || !(cli.tol > 0.0) {
            return Err("--dt, --paths, --nmax and --tol must be positive".into());
        }
        if let Some(m) = cli.mtrunc {
            if !(m > 0.0) {
                return Err("--mtrunc must be positive".into());
            }
        }
        let steps = (spec.period / cli.dt).round().max(1.0) as i64;
        let clock = Clock::new(spec.period, steps)?;
        if (clock.dt - cli.dt).abs() > 1e-12 * cli.dt {
            log::info!("dt {} adjusted to {} ({} steps per period)", cli.dt, clock.dt, steps);
        }
        fs::create_dir_all(&cli.out)?;
        Ok(Run { cli, spec, source, clock })
    }

    fn provenance(&self, command: &'static str) -> Provenance {
        Provenance {
            version: VERSION,
            command,
            system: self.source.clone(),
            seed: self.cli.seed,
            dt: self.clock.dt,
            steps_per_period: self.clock.steps_per_period,
            paths: self.cli.paths,
            scheme: self.cli.scheme.into(),
        }
    }

    fn opts(&self) -> FlowOptions {
        FlowOptions { scheme: self.cli.scheme.into(), ..FlowOptions::default() }
    }

    fn envelope(&self) -> Result<DecayEnvelope, Error> {
        Ok(DecayEnvelope::for_system(&self.spec, self.cli.lambda_override)?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cli.out.join(name)
    }

    fn parse_state(&self, s: &str) -> Result<Vec<f64>, Error> {
        let v = s.split(',').map(|c| c.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>().map_err(|e| format!("x0 `{s}`: {e}"))?;
        if v.len() != self.spec.d {
            return Err(format!("x0 `{s}` has {} components, expected {}", v.len(), self.spec.d).into());
        }
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(format!("x0 `{s}` must be finite and nonnegative").into());
        }
        Ok(v)
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Error> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn cmd_check(run: &Run, mc: bool) -> Result<ExitCode, Error> {
    let env = run.envelope()?;
    let budget = mc.then_some(McBudget { paths: run.cli.paths, dt: run.clock.dt, periods: 2, seed: run.cli.seed });
    let report = assemble_report(&run.spec, &env, budget)?;
    #[derive(Serialize)]
    struct Out<'a> {
        provenance: Provenance,
        report: &'a rpslab_core::SmallGainReport,
    }
    write_json(run.path("report.json"), &Out { provenance: run.provenance("check"), report: &report })?;
    fs::write(run.path("report.txt"), report.to_text())?;
    log::info!("kappa = {} verdict {:?}", report.kappa, report.verdict);
    Ok(match report.verdict {
        Verdict::Pass => ExitCode::SUCCESS,
        Verdict::Fail => ExitCode::from(2),
    })
}

fn cmd_simulate(run: &Run, x0: Option<&str>, t_end: Option<f64>) -> Result<ExitCode, Error> {
    let x0 = match x0 {
        Some(s) => run.parse_state(s)?,
        None => vec![1.0; run.spec.d],
    };
    let t_end = t_end.unwrap_or(2.0 * run.spec.period);
    let steps = (t_end / run.clock.dt).round() as i64;
    if steps < 1 {
        return Err(format!("--t-end {t_end} is shorter than one step").into());
    }
    let ens = Ensemble::generate(GridSpec::new(run.clock.dt, -1, steps, run.spec.noise_dim())?, run.cli.seed, run.cli.paths)?;
    let flow = Flow::new(&run.spec, run.clock.dt, run.opts())?;
    let trajs = ens.paths.par_iter().map(|w| flow.evolve(w, 0, steps, &x0)).collect::<Result<Vec<_>, _>>()?;

    let mut out = create(&run.path("trajectories.csv"))?;
    let mut header = String::from("path,t");
    for i in 1..=run.spec.d {
        header.push_str(&format!(",x{i}"));
    }
    writeln!(out, "{header}")?;
    let mut min = f64::INFINITY;
    let mut finite = true;
    let mut projections = 0;
    for (p, traj) in trajs.iter().enumerate() {
        projections += traj.projection_events;
        for (i, x) in traj.iter() {
            let mut line = format!("{p},{}", fmt_f64(run.clock.time(i)));
            for v in x {
                finite &= v.is_finite();
                min = min.min(*v);
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;

    #[derive(Serialize)]
    struct Out {
        provenance: Provenance,
        x0: Vec<f64>,
        steps: i64,
        t_end: f64,
        finite: bool,
        nonnegative: bool,
        min_value: f64,
        projection_events: usize,
    }
    let summary = Out {
        provenance: run.provenance("simulate"),
        x0,
        steps,
        t_end: run.clock.time(steps),
        finite,
        nonnegative: min >= 0.0,
        min_value: min,
        projection_events: projections,
    };
    write_json(run.path("simulate.json"), &summary)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_pullback(run: &Run, x0: &[String], nmin: usize, alpha: f64) -> Result<ExitCode, Error> {
    let x0: Vec<Vec<f64>> = if x0.is_empty() {
        [0.0, 1.0, 5.0].iter().map(|c| vec![*c; run.spec.d]).collect()
    } else {
        x0.iter().map(|s| run.parse_state(s)).collect::<Result<_, _>>()?
    };
    let alpha = run.clock.index_of(alpha)?;
    let p = run.clock.steps_per_period;
    if !(0..p).contains(&alpha) {
        return Err("--alpha must lie in [0, T)".into());
    }
    if nmin == 0 || nmin > run.cli.nmax {
        return Err("need 1 <= --nmin <= --nmax".into());
    }
    let env = run.envelope()?;
    let n_max = run.cli.nmax;
    let grid = GridSpec::new(run.clock.dt, -(n_max as i64 + 1) * p, p, run.spec.noise_dim())?;
    let ens = Ensemble::generate(grid, run.cli.seed, run.cli.paths)?;
    let req = PullbackRequest { t: 0, alpha, n_min: nmin, n_max, x0 };
    let fan = run_pullback(&run.spec, &ens, &req, run.opts())?;
    let summary = fan.summary(env.lambda, run.spec.period);
    let top = req.x0.iter().max_by(|a, b| a.iter().sum::<f64>().total_cmp(&b.iter().sum::<f64>())).unwrap();
    let diag = envelope_diagnostics(&run.spec, &ens, 0, alpha, nmin, n_max, top, run.opts())?;
    let gaps = diag.mean_max_gap();

    let mut out = create(&run.path("pullback.csv"))?;
    write_fan_csv(&mut out, &summary, Some(&gaps))?;
    out.flush()?;

    #[derive(Serialize)]
    struct Out<'a> {
        provenance: Provenance,
        alpha_steps: i64,
        n_min: usize,
        n_max: usize,
        x0: &'a [Vec<f64>],
        lambda: f64,
        summary: &'a rpslab_core::pullback::FanSummary,
        rate_band_note: &'static str,
        diameters_nonincreasing: bool,
        nonnegative: bool,
        envelope_invariants_hold: bool,
        envelope_max_gap: &'a [f64],
    }
    let js = Out {
        provenance: run.provenance("pullback"),
        alpha_steps: alpha,
        n_min: nmin,
        n_max,
        x0: &req.x0,
        lambda: env.lambda,
        summary: &summary,
        rate_band_note: "heuristic band from the linear envelope rate",
        diameters_nonincreasing: summary.diameters_nonincreasing(4.0),
        nonnegative: fan.all_nonnegative(),
        envelope_invariants_hold: diag.invariants_hold(),
        envelope_max_gap: &gaps,
    };
    write_json(run.path("pullback.json"), &js)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_fixpoint(run: &Run, kmax: usize) -> Result<ExitCode, Error> {
    let env = run.envelope()?;
    let kappa = assemble_report(&run.spec, &env, None)?.kappa;
    let mut cfg = GainConfig::default_for(&env, run.spec.period);
    if let Some(m) = run.cli.mtrunc {
        cfg.m_trunc = m;
    }
    let grid = GainContext::required_grid(&run.spec, &cfg, run.clock.dt)?;
    let ens = Ensemble::generate(grid, run.cli.seed, run.cli.paths)?;
    let ctx = GainContext::new(&run.spec, &env, &ens, cfg, run.cli.scheme.into())?;
    let outcome = picard_fixed_point(&ctx, ctx.midpoint()?, kmax, run.cli.tol, Some(kappa))?;
    let y = ctx.realize_rps(&outcome.fixed_point)?;

    let mut out = create(&run.path("fixpoint_residuals.csv"))?;
    writeln!(out, "k,rho,rho_se,ratio")?;
    for (k, r) in outcome.residuals.iter().enumerate() {
        let ratio = if k == 0 { String::new() } else { fmt_f64(outcome.ratios.get(k - 1).copied().unwrap_or(f64::NAN)) };
        writeln!(out, "{},{},{},{ratio}", k + 1, fmt_f64(r.value), fmt_f64(r.se))?;
    }
    out.flush()?;
    let mut out = create(&run.path("fixpoint_quantiles.csv"))?;
    write_quantiles_csv(&mut out, &y.data)?;
    out.flush()?;

    #[derive(Serialize)]
    struct Out<'a> {
        provenance: Provenance,
        kappa: f64,
        m_trunc: f64,
        tail_bound: f64,
        picard: &'a rpslab_core::operators::PicardOutcome,
        clamped: usize,
    }
    let js = Out {
        provenance: run.provenance("fixpoint"),
        kappa,
        m_trunc: cfg.m_trunc,
        tail_bound: cfg.tail_bound(&env, run.spec.feedback.bound.iter().cloned().fold(0.0, f64::max)),
        picard: &outcome,
        clamped: y.clamped,
    };
    write_json(run.path("fixpoint.json"), &js)?;
    if !outcome.converged {
        log::warn!("Picard iteration stopped after {} steps without reaching tol {}", outcome.iterations, run.cli.tol);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(out: &Path) -> Result<ExitCode, Error> {
    let mut runs = serde_json::Map::new();
    for (name, file) in OUTPUTS {
        let p = out.join(file);
        if p.exists() {
            let v: Value = serde_json::from_str(&fs::read_to_string(&p)?)?;
            runs.insert(name.to_string(), v);
        }
    }
    if runs.is_empty() {
        return Err("nothing to report".into());
    }
    let js = serde_json::json!({ "version": VERSION, "runs": runs });
    write_json(out.join("summary.json"), &js)?;
    Ok(ExitCode::SUCCESS)
}

fn configure_threads() {
    if let Ok(v) = std::env::var("RPSLAB_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("RPSLAB_THREADS ignored: {e}");
                }
            }
            _ => log::warn!("RPSLAB_THREADS={v} is not a positive integer"),
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    if let Command::Report = cli.command {
        return cmd_report(&cli.out);
    }
    let run = Run::load(cli)?;
    match &run.cli.command {
        Command::Check { mc } => cmd_check(&run, *mc),
        Command::Simulate { x0, t_end } => cmd_simulate(&run, x0.as_deref(), *t_end),
        Command::Pullback { x0, nmin, alpha } => cmd_pullback(&run, x0, *nmin, *alpha),
        Command::Fixpoint { kmax } => cmd_fixpoint(&run, *kmax),
        Command::Report => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    // clap exits with 2 on usage errors, which is reserved for a failed verdict
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
