//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{Certificate, ScenarioConfig, ScenarioRef};
use crate::error::{Error, Result};
use crate::learn::{synthesize, Outcome, SynthesisReport};
use crate::problem::Mode;
use crate::scenario::{catalog, concatenation_failures, Scenario};
use crate::sim::{
    batch_experiment, read_trace_csv, write_summary_json, write_trace_csv, Course, Disturbance,
    InitialSampler, Leg,
};
use crate::verify::{certify_margin_profile, falsify, write_margin_profile_csv, write_report_json};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
/// Boundary samples used for every concatenation check.
pub const CONCAT_SAMPLES: usize = 1000;

#[derive(Debug, Parser)]
#[command(
    name = "pathfunnel",
    version,
    about = "Control funnel synthesis and simulation for path following"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a funnel for a segment; exit 0 found, 2 infeasible, 3 budget exhausted.
    Synthesize(SynthesizeArgs),
    /// Re-check a certificate with the falsifier; exit 0 clean, 2 violated.
    Verify(VerifyArgs),
    /// Closed-loop runs driven by one or more chained certificates.
    Simulate(SimulateArgs),
    /// Per-figure CSV bundles from simulated traces.
    ExportPlots(ExportArgs),
    /// List the built-in scenarios.
    Catalog,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Catalog id; `oval` runs both halves and checks that they chain.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Falsifier samples for the final check.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub certificate: PathBuf,
    #[arg(long, default_value_t = 200_000)]
    pub budget: usize,
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Certificates driven in order; repeat the flag to chain segments.
    #[arg(long, required = true)]
    pub certificate: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub laps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop each run once the car has advanced this far in x.
    #[arg(long)]
    pub stop_after_x: Option<f64>,
    /// Start outside the funnel head, within this radius of the reference.
    #[arg(long)]
    pub outside_head: Option<f64>,
    /// Disturbance as JSON, e.g. '{"kind":"input-noise","std":[0.02,0.2],"seed":1}'.
    #[arg(long)]
    pub disturbance: Option<String>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory written by `simulate`.
    #[arg(long)]
    pub traces: PathBuf,
    /// Adds the decrease-margin profile of this certificate.
    #[arg(long)]
    pub certificate: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "plots")]
    pub out_dir: PathBuf,
}

/// Cap rayon's worker count from `FUNNEL_THREADS`.
pub fn init_threads() {
    if let Some(n) = std::env::var("FUNNEL_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    init_threads();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synthesize(a) => cmd_synthesize(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::ExportPlots(a) => cmd_export_plots(&a),
        Command::Catalog => {
            for s in catalog() {
                println!("{:<20} T={:<5} {}", s.id, s.reference.t_end, s.description);
            }
            println!(
                "{:<20} {:<7} both oval halves, checked to chain",
                "oval", ""
            );
            Ok(EXIT_OK)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    path.map_or_else(|| Ok(ScenarioConfig::default()), ScenarioConfig::load)
}

fn file_stem(id: &str, mode: Mode) -> String {
    format!("{id}-{}", mode.label().to_ascii_lowercase())
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Synthesize one segment, writing the run log and, when found, the
/// certificate. Returns the report and the certificate path.
pub fn synthesize_scenario(
    cfg: &ScenarioConfig,
    scenario: &Scenario,
    out_dir: &Path,
) -> Result<(SynthesisReport, Option<PathBuf>)> {
    let problem = cfg.problem_for(scenario)?;
    let report = synthesize(&problem, &cfg.synthesis, cfg.seed)?;
    let stem = file_stem(&scenario.id, cfg.mode);
    std::fs::create_dir_all(out_dir)?;
    write_json(&report, &out_dir.join(format!("{stem}.log.json")))?;
    let mut cert_path = None;
    if let (Outcome::Found, Some(v)) = (report.outcome, &report.funnel) {
        let cert = Certificate::new(scenario.clone(), &problem, *v, cfg.seed, report.iterations);
        let p = out_dir.join(format!("{stem}.cert.json"));
        cert.save(&p)?;
        cert_path = Some(p);
    }
    println!(
        "{} {}: {:?} after {} iterations ({} rows, {:.1} s)",
        scenario.id,
        cfg.mode.label(),
        report.outcome,
        report.iterations,
        report.total_rows,
        report.elapsed_seconds
    );
    if let Some(p) = &cert_path {
        println!("certificate: {}", p.display());
    }
    Ok((report, cert_path))
}

/// Failed boundary samples for `G_i ⊆ I_{i+1}` along a chain of segments,
/// including the wrap-around pair when `cyclic`.
pub fn chain_failures(segments: &[Scenario], cyclic: bool) -> Vec<(usize, usize)> {
    let n = segments.len();
    let pairs = if cyclic { n } else { n.saturating_sub(1) };
    (0..pairs)
        .map(|i| {
            let (a, b) = (&segments[i], &segments[(i + 1) % n]);
            let next = b
                .reference
                .with_frame(b.reference.frame_starting_at(&a.reference.end().state));
            (
                i,
                concatenation_failures(a, &next, &b.regions.initial, CONCAT_SAMPLES),
            )
        })
        .filter(|(_, f)| *f > 0)
        .collect()
}

fn cmd_synthesize(a: &SynthesizeArgs) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(id) = &a.scenario {
        cfg.scenario = Some(ScenarioRef::Id(id.clone()));
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.budget {
        cfg.synthesis.final_budget = b;
    }
    if let Some(n) = a.max_iterations {
        cfg.synthesis.max_iterations = n;
    }
    cfg.synthesis.validate()?;
    let scenarios = match &cfg.scenario {
        None => {
            return Err(Error::Config(
                "no scenario given (use --scenario or a config file)".into(),
            ))
        }
        Some(ScenarioRef::Id(id)) if id == "oval" => {
            vec![
                crate::scenario::builtin("oval-half-1")?,
                crate::scenario::builtin("oval-half-2")?,
            ]
        }
        Some(r) => vec![r.resolve()?],
    };
    if scenarios.len() > 1 {
        let bad = chain_failures(&scenarios, true);
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "segments do not chain: {bad:?} (pair index, failed samples)"
            )));
        }
        println!("chain check: G_i inside I_(i+1) on {CONCAT_SAMPLES} boundary samples per pair");
    }
    let mut code = EXIT_OK;
    for s in &scenarios {
        let (report, _) = synthesize_scenario(&cfg, s, &a.out_dir)?;
        code = code.max(report.outcome.exit_code());
    }
    Ok(code)
}

fn cmd_verify(a: &VerifyArgs) -> Result<i32> {
    let cert = Certificate::load(&a.certificate)?;
    let problem = cert.problem()?;
    let report = falsify(&cert.funnel, &problem, a.budget, a.seed)?;
    println!("{}", report.status_line());
    std::fs::create_dir_all(&a.out_dir)?;
    let stem = file_stem(&cert.scenario.id, cert.mode);
    let f = std::fs::File::create(a.out_dir.join(format!("{stem}.verify.json")))?;
    write_report_json(&report, std::io::BufWriter::new(f))?;
    let profile = certify_margin_profile(&cert.funnel, &problem, 50, 2000, a.seed)?;
    write_margin_profile_csv(&profile, &a.out_dir.join(format!("{stem}.margin.csv")))?;
    Ok(if report.is_clean() {
        EXIT_OK
    } else {
        EXIT_INFEASIBLE
    })
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.runs {
        cfg.runs = n;
    }
    if let Some(n) = a.laps {
        cfg.laps = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.outside_head {
        cfg.sampler = InitialSampler::OutsideHead { radius: r };
    }
    if let Some(d) = &a.disturbance {
        cfg.disturbance = serde_json::from_str::<Disturbance>(d)
            .map_err(|e| Error::Config(format!("--disturbance: {e}")))?;
    }
    cfg.validate()?;
    let certs = a
        .certificate
        .iter()
        .map(|p| Certificate::load(p))
        .collect::<Result<Vec<_>>>()?;
    let scenarios: Vec<Scenario> = certs.iter().map(|c| c.scenario.clone()).collect();
    let bad = chain_failures(&scenarios, cfg.laps > 1);
    if !bad.is_empty() {
        return Err(Error::Config(format!(
            "certificates do not chain: {bad:?} (pair index, failed samples)"
        )));
    }
    let legs = certs
        .iter()
        .map(|c| {
            Ok(Leg {
                funnel: c.funnel,
                problem: c.problem()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let course = Course {
        legs,
        laps: cfg.laps,
        stop_after_x: a.stop_after_x,
    };
    let name = scenarios
        .iter()
        .map(|s| s.id.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let (traces, summary) = batch_experiment(
        &name,
        &course,
        &cfg.sampler,
        cfg.runs,
        cfg.seed,
        &cfg.disturbance,
        &cfg.sim,
    )?;
    std::fs::create_dir_all(&a.out_dir)?;
    for t in &traces {
        write_trace_csv(t, &a.out_dir.join(format!("trace_{:04}.csv", t.meta.run)))?;
    }
    write_summary_json(&traces, &summary, &a.out_dir.join("summary.json"))?;
    println!(
        "{name} {}: {} runs, success {:.3}, safe {:.3}{}",
        course.mode().label(),
        summary.runs,
        summary.success_rate,
        summary.safe_rate,
        summary.t_star.as_ref().map_or(String::new(), |t| format!(
            ", t* in [{:.2}, {:.2}]",
            t.min, t.max
        ))
    );
    Ok(EXIT_OK)
}

#[derive(Serialize, Deserialize)]
struct XyRow {
    run: usize,
    t: f64,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct SeriesRow {
    run: usize,
    t: f64,
    value: f64,
}

fn trace_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut files = Vec::new();
    if dir.is_dir() {
        for e in std::fs::read_dir(dir)? {
            let p = e?.path();
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some(run) = name
                .strip_prefix("trace_")
                .and_then(|r| r.strip_suffix(".csv"))
            {
                if let Ok(run) = run.parse() {
                    files.push((run, p));
                }
            }
        }
    }
    files.sort();
    Ok(files)
}

fn cmd_export_plots(a: &ExportArgs) -> Result<i32> {
    if !a.traces.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("trace directory {} not found", a.traces.display()),
        )));
    }
    let files = trace_files(&a.traces)?;
    if files.is_empty() {
        return Err(Error::NoTraces(format!(
            "no traces in {}",
            a.traces.display()
        )));
    }
    std::fs::create_dir_all(&a.out_dir)?;
    let mut xy = csv::Writer::from_path(a.out_dir.join("xy_path.csv"))?;
    let mut value = csv::Writer::from_path(a.out_dir.join("value_vs_t.csv"))?;
    let mut speed = csv::Writer::from_path(a.out_dir.join("speed_vs_t.csv"))?;
    for (run, p) in &files {
        for s in read_trace_csv(p)? {
            xy.serialize(XyRow {
                run: *run,
                t: s.t,
                x: s.x,
                y: s.y,
            })?;
            value.serialize(SeriesRow {
                run: *run,
                t: s.t,
                value: s.value,
            })?;
            speed.serialize(SeriesRow {
                run: *run,
                t: s.t,
                value: s.v,
            })?;
        }
    }
    xy.flush()?;
    value.flush()?;
    speed.flush()?;
    if let Some(c) = &a.certificate {
        let cert = Certificate::load(c)?;
        let profile = certify_margin_profile(&cert.funnel, &cert.problem()?, 50, 2000, a.seed)?;
        write_margin_profile_csv(&profile, &a.out_dir.join("margin_profile.csv"))?;
    }
    println!("exported {} traces to {}", files.len(), a.out_dir.display());
    Ok(EXIT_OK)
}
