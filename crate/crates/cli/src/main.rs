use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use spcal_core::analysis::{
    distance_report, nu_p_from_far_steps, residual_analysis, stability_scan, vc_trend, veq_comparison,
};
use spcal_core::io::{format_run, read_run, write_report};
use spcal_core::pipeline::{analyze_mode, prepare, run_pipeline, select_distances, NuPSource, Prepared};
use spcal_core::synth::{casimir_analog, run1_analog};
use spcal_core::{
    fit_power_law, generate_run, AnalysisConfig, ApparatusConfig, Error, FitMode, GroundTruth, MeasurementRun,
    SweepPlan,
};

#[derive(Parser)]
#[command(
    name = "spcal",
    version,
    about = "Sphere-plate gap calibration from electrostatic frequency sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic run file
    Simulate(SimulateArgs),
    /// Fit a parabola to every voltage sweep
    FitParabolas(AnalysisArgs),
    /// Fit k_el against PZT bias
    FitPowerlaw(AnalysisArgs),
    /// Refit growing prefixes of the series, largest gaps first
    Stability(AnalysisArgs),
    /// Compare linear and curvature-based gap estimates
    Distances(AnalysisArgs),
    /// Constant vs linear contact potential against gap
    Vctrend(AnalysisArgs),
    /// Power law of the residual frequency shift
    Residual(AnalysisArgs),
    /// Contact-potential miscompensation against the equivalent voltage
    Veq(AnalysisArgs),
    /// Run every stage and write report.json plus plot tables
    Report(AnalysisArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    /// Anomalous exponent (-1.70), constant contact potential
    Run1Analog,
    /// Coulomb curvature plus a Casimir residual
    Casimir,
    /// Coulomb curvature, no noise
    Ideal,
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed for the random step layout (defaults to --seed)
    #[arg(long)]
    plan_seed: Option<u64>,
    #[arg(long, value_enum, default_value = "run1-analog")]
    scenario: Scenario,
    /// JSON with `truth` and `plan`; replaces --scenario
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run file to write (stdout if omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalysisArgs {
    /// Run file
    run: PathBuf,
    /// Analysis config JSON
    #[arg(long)]
    config: Option<PathBuf>,
    /// `free` or `fixed:<exponent>`; replaces the configured modes
    #[arg(long)]
    mode: Vec<FitMode>,
    /// Output file (directory for `report`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for symmetry with `simulate`; analysis is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct SimulationInput {
    truth: GroundTruth,
    plan: SweepPlan,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::InvalidPlan(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("spcal: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("spcal: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Simulate(args) => simulate(&args),
        Command::FitParabolas(args) => fit_parabolas(&args),
        Command::FitPowerlaw(args) => powerlaw(&args),
        Command::Stability(args) => stability(&args),
        Command::Distances(args) => distances(&args),
        Command::Vctrend(args) => vctrend(&args),
        Command::Residual(args) => residual(&args),
        Command::Veq(args) => veq(&args),
        Command::Report(args) => report(&args),
    }
}

fn emit(out: Option<&Path>, body: &str) -> CliResult {
    match out {
        Some(path) => fs::write(path, body).map_err(|e| Failure::Data(format!("{}: {e}", path.display()))),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Data(e.to_string()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn simulate(args: &SimulateArgs) -> CliResult {
    let plan_seed = args.plan_seed.unwrap_or(args.seed);
    let (truth, plan) = match &args.config {
        Some(path) => {
            let input: SimulationInput = serde_json::from_str(&read_text(path)?)
                .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            (input.truth, input.plan)
        }
        None => match args.scenario {
            Scenario::Run1Analog => run1_analog(plan_seed),
            Scenario::Casimir => casimir_analog(plan_seed),
            Scenario::Ideal => {
                let cfg = ApparatusConfig::default();
                (
                    GroundTruth::ideal(cfg),
                    SweepPlan::random_log_spaced(&cfg, 30, 0.05, 40.0, plan_seed),
                )
            }
        },
    };
    let run = generate_run(&truth, &plan, args.seed)?;
    emit(args.out.as_deref(), &format_run(&run)?)
}

struct Loaded {
    run: MeasurementRun,
    config: AnalysisConfig,
}

fn load(args: &AnalysisArgs) -> CliResult<Loaded> {
    let mut config = match &args.config {
        Some(path) => AnalysisConfig::from_json(&read_text(path)?)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
        None => AnalysisConfig::default(),
    };
    if !args.mode.is_empty() {
        config.modes = args.mode.clone();
    }
    let run = read_run(&args.run).map_err(|e| Failure::Data(format!("{}: {e}", args.run.display())))?;
    Ok(Loaded { run, config })
}

fn prepared(args: &AnalysisArgs) -> CliResult<(Prepared, AnalysisConfig)> {
    let Loaded { run, config } = load(args)?;
    let p = prepare(&run, &config)?;
    for d in &p.diagnostics {
        eprintln!("spcal: {d}");
    }
    Ok((p, config))
}

fn csv(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = format!("{header}\n");
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn fit_parabolas(args: &AnalysisArgs) -> CliResult {
    let (p, _) = prepared(args)?;
    let rows = p.series.steps.iter().map(|s| match &s.fit {
        Some(f) => vec![
            s.index.to_string(),
            s.v_pzt.to_string(),
            f.nu0_sq.to_string(),
            f.k_el.to_string(),
            f.sigma_k_el().to_string(),
            f.v_c.to_string(),
            f.sigma_v_c().to_string(),
            f.chi2_red.to_string(),
            s.issue.clone().unwrap_or_default().replace(',', ";"),
        ],
        None => {
            let mut row = vec![s.index.to_string(), s.v_pzt.to_string()];
            row.extend(std::iter::repeat_n(String::new(), 6));
            row.push(s.issue.clone().unwrap_or_default().replace(',', ";"));
            row
        }
    });
    let body = csv("index,v_pzt,nu0_sq,k_el,sigma_k_el,v_c,sigma_v_c,chi2_red,issue", rows);
    emit(args.out.as_deref(), &body)
}

fn powerlaw(args: &AnalysisArgs) -> CliResult {
    let (p, config) = prepared(args)?;
    let fits = config
        .modes
        .iter()
        .map(|&m| fit_power_law(&p.curvature, m, &config.lm))
        .collect::<Result<Vec<_>, _>>()?;
    emit(args.out.as_deref(), &to_json(&fits)?)
}

fn stability(args: &AnalysisArgs) -> CliResult {
    let (p, config) = prepared(args)?;
    let mut rows = Vec::new();
    let mut spreads = Vec::new();
    for &mode in &config.modes {
        let trace = stability_scan(&p.curvature, mode, config.stability_min_points, &config.lm)?;
        spreads.push(format!(
            "{mode}: alpha spread {:.4}, V0 spread {:.4}",
            trace.spread_alpha, trace.spread_v0
        ));
        for e in &trace.entries {
            let mut row = vec![mode.to_string(), e.n_included.to_string()];
            match &e.fit {
                Some(f) => row.extend(
                    [f.alpha, f.sigma_alpha(), f.v0_pzt, f.sigma_v0(), f.gamma, f.chi2_red].map(|v| v.to_string()),
                ),
                None => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            rows.push(row);
        }
    }
    for s in spreads {
        eprintln!("spcal: {s}");
    }
    let body = csv("mode,n_included,alpha,sigma_alpha,v0_pzt,sigma_v0,gamma,chi2_red", rows);
    emit(args.out.as_deref(), &body)
}

fn distances(args: &AnalysisArgs) -> CliResult {
    let (p, config) = prepared(args)?;
    let mut rows = Vec::new();
    for &mode in &config.modes {
        let fit = fit_power_law(&p.curvature, mode, &config.lm)?;
        let report = distance_report(&fit, &p.curvature, p.apparatus.beta)?;
        eprintln!(
            "spcal: {mode}: mean discrepancy {:.4}, max {:.4}",
            report.mean_rel_discrepancy, report.max_rel_discrepancy
        );
        rows.extend(report.records.iter().map(|r| {
            let mut row = vec![mode.to_string()];
            row.extend([r.v_pzt, r.d_linear, r.d_curvature, r.rel_discrepancy].map(|v| v.to_string()));
            row
        }));
    }
    let body = csv("mode,v_pzt,d_linear,d_curvature,rel_discrepancy", rows);
    emit(args.out.as_deref(), &body)
}

/// Distances from the configured modes, as the full pipeline selects them.
fn gap_distances(p: &Prepared, config: &AnalysisConfig) -> CliResult<Vec<f64>> {
    let modes: Vec<_> = config.modes.iter().map(|&m| analyze_mode(p, m, config)).collect();
    select_distances(&modes, config.distance_estimator)
        .map(|(_, d)| d)
        .ok_or_else(|| Failure::Data("no converged power-law fit to derive distances from".into()))
}

fn vctrend(args: &AnalysisArgs) -> CliResult {
    let (p, config) = prepared(args)?;
    let d = gap_distances(&p, &config)?;
    emit(args.out.as_deref(), &to_json(&vc_trend(&p.series, &d)?)?)
}

fn residual(args: &AnalysisArgs) -> CliResult {
    let (p, config) = prepared(args)?;
    let d = gap_distances(&p, &config)?;
    let nu_p = match config.nu_p_source {
        NuPSource::Config => p.apparatus.nu_p,
        NuPSource::FarSteps => nu_p_from_far_steps(&p.series, 3)?,
    };
    let report = residual_analysis(&p.series, &d, nu_p, config.residual_gap_offset, &config.lm)?;
    emit(args.out.as_deref(), &to_json(&report)?)
}

fn veq(args: &AnalysisArgs) -> CliResult {
    let (p, config) = prepared(args)?;
    let d = gap_distances(&p, &config)?;
    let trend = vc_trend(&p.series, &d)?;
    let rows = veq_comparison(&trend, &d)?.into_iter().map(|r| {
        let mut row: Vec<String> = [r.d, r.v_eq, r.miscompensation, r.ratio].map(|v| v.to_string()).into();
        row.push(r.exceeds.to_string());
        row
    });
    emit(args.out.as_deref(), &csv("d,v_eq,miscompensation,ratio,exceeds", rows))
}

fn report(args: &AnalysisArgs) -> CliResult {
    let Loaded { run, config } = load(args)?;
    let dir = args
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("report"));
    let report = run_pipeline(&run, &config)?;
    for d in &report.diagnostics {
        eprintln!("spcal: {d}");
    }
    let written = write_report(&report, &dir)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}
