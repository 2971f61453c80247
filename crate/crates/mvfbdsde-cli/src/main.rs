use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mvfbdsde_cli::{exit_code, run, Command, ConfigError, Scenario, ScenarioConfig, EXIT_ERROR};

/// Run a scenario: solve, check assumptions, probe for nonuniqueness, verify
/// optimality of a control, or check the discrete product rule.
///
/// Exit codes: 0 success, 1 operational error, 2 a check refuted its property.
#[derive(Parser, Debug)]
#[command(name = "mvfbdsde", version)]
struct Args {
    /// Command to run (solve, check_assumptions, detect_nonuniqueness, verify_smp, ito_check).
    #[arg(value_parser = parse::<Command>)]
    command: Option<Command>,
    /// Scenario (example1, example2, linear_base, lq_control, custom).
    #[arg(value_parser = parse::<Scenario>)]
    scenario: Option<Scenario>,
    /// Scenario file; flags given alongside it override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "scenario", value_parser = parse::<Scenario>, conflicts_with = "scenario")]
    scenario_flag: Option<Scenario>,
    #[arg(long = "command", value_parser = parse::<Command>, conflicts_with = "command")]
    command_flag: Option<Command>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    particles: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    damping: Option<f64>,
    /// Terminal time for scenarios whose horizon is otherwise fixed.
    #[arg(long)]
    override_horizon: Option<f64>,
    /// Output directory; `MVFBDSDE_OUT` overrides the configured value.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 lets the runtime decide.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn load(args: &Args) -> Result<ScenarioConfig, ConfigError> {
    let scenario = args.scenario.or(args.scenario_flag);
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
            let cfg = ScenarioConfig::parse(&text)?;
            if scenario.is_some_and(|s| s != cfg.scenario) {
                return Err(ConfigError::Invalid(format!("scenario on the command line disagrees with {}", path.display())));
            }
            cfg
        }
        None => ScenarioConfig::defaults(scenario.ok_or_else(|| ConfigError::Invalid("give a scenario or --config".into()))?),
    };
    if let Some(c) = args.command.or(args.command_flag) {
        cfg.command = c;
    }
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = args.$f.clone() { cfg.$f = v; })* };
    }
    apply!(seed, steps, particles, delta, tol, damping, out, threads);
    if args.override_horizon.is_some() {
        cfg.override_horizon = args.override_horizon;
    }
    if let Some(dir) = std::env::var_os("MVFBDSDE_OUT") {
        cfg.out = dir.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR as u8);
        }
    };
    let result = run(&cfg);
    match &result {
        Ok(o) => print!("{}", o.summary),
        Err(e) => eprintln!("error: {e}"),
    }
    ExitCode::from(exit_code(&result) as u8)
}
