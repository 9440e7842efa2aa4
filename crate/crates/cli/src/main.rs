//! `quadnav` command line: gateway, one-shot grounding, suite replay and map
//! validation.
//!
//! Exit codes: 0 success, 1 runtime failure (a JSON error object is written
//! to stderr), 2 usage error.

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use quadnav_core::bench::{render_report, run_suite, write_report, RecordedProvider, RunOptions, ScenarioSuite};
use quadnav_core::grounding::{Grounder, Stage};
use quadnav_core::llm_provider::{HttpProvider, MockProvider, Provider, ProviderConfig, DEFAULT_API_KEY_ENV};
use quadnav_core::plan_schema::{ActionCommand, PlanDefect};
use quadnav_core::prompting::{default_template, PromptTemplate};
use quadnav_core::waypoint_world::{load_world, WaypointWorld};
use quadnav_gateway::ServiceConfig;
use serde::Serialize;

const MAP_FILE: &str = "maps/tower2_floor9.json";

#[derive(Debug, Parser)]
#[command(name = "quadnav", version, about = "Language-grounded movement planning for a simulated quadruped")]
struct Cli {
    /// Fixture directory used for default maps and suite names
    /// [default: ./fixtures, else the source checkout's fixtures]
    #[arg(long, global = true, env = "QUADNAV_FIXTURES")]
    fixtures: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Start the HTTP gateway
    Serve(ServeArgs),
    /// Ground one instruction and print the plan as JSON
    Ground(GroundArgs),
    /// Run a scenario suite and print the report
    Replay(ReplayArgs),
    /// Load and validate a map file
    MapCheck {
        file: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Service config (TOML); flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Simulated seconds per wall-clock second (0 = unpaced)
    #[arg(long)]
    pace: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mission_log: Option<PathBuf>,
    #[arg(long)]
    outcome_log: Option<PathBuf>,
    /// Force the offline keyword grounder
    #[arg(long)]
    mock: bool,
}

#[derive(Debug, Args)]
struct ProviderArgs {
    /// Use the offline keyword grounder (no network)
    #[arg(long)]
    mock: bool,
    /// Chat-completion endpoint URL
    #[arg(long, required_unless_present = "mock", requires = "model")]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 20.0)]
    timeout: f64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
}

#[derive(Debug, Args)]
struct GroundArgs {
    instruction: String,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Print the full grounding outcome instead of the plan
    #[arg(long)]
    outcome: bool,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Suite file, or the name of a suite in <fixtures>/suites
    suite: String,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    template: Option<PathBuf>,
    /// Write records.jsonl, outcomes.jsonl, summary.csv and report.txt here
    #[arg(long)]
    out: Option<PathBuf>,
    /// One simulator per trial on a thread pool; output is unchanged
    #[arg(long)]
    parallel: bool,
    /// Replay model outputs from an outcome log instead of the mock grounder
    #[arg(long)]
    recorded: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CliError {
    error_kind: &'static str,
    detail: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<Stage>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    defects: Vec<PlanDefect>,
}

impl CliError {
    fn new(error_kind: &'static str, detail: impl ToString) -> Self {
        CliError { error_kind, detail: detail.to_string(), stage: None, defects: Vec::new() }
    }
}

#[derive(Serialize)]
struct PlanBody<'a> {
    actions: &'a [ActionCommand],
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let fixtures = fixtures_dir(cli.fixtures);
    let result = match cli.command {
        Command::Serve(args) => serve(args, &fixtures),
        Command::Ground(args) => ground(args, &fixtures),
        Command::Replay(args) => replay(args, &fixtures),
        Command::MapCheck { file } => map_check(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", serde_json::to_string(&err).expect("errors serialize"));
            ExitCode::FAILURE
        }
    }
}

fn fixtures_dir(flag: Option<PathBuf>) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    let local = PathBuf::from("fixtures");
    if local.is_dir() {
        return local;
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn world_and_template(map: Option<PathBuf>, template: Option<PathBuf>, fixtures: &Path) -> Result<(Arc<WaypointWorld>, Arc<PromptTemplate>), CliError> {
    let map = map.unwrap_or_else(|| fixtures.join(MAP_FILE));
    let world = Arc::new(load_world(&map).map_err(|e| CliError::new("map_invalid", e))?);
    let template = match template {
        Some(path) => PromptTemplate::load(path, &world),
        None => default_template(&world),
    }
    .map_err(|e| CliError::new("template_invalid", e))?;
    Ok((world, Arc::new(template)))
}

fn serve(args: ServeArgs, fixtures: &Path) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => ServiceConfig::load(path).map_err(|e| CliError::new("config_invalid", e))?,
        None => ServiceConfig::with_map(fixtures.join(MAP_FILE)),
    };
    if let Some(v) = args.listen {
        config.listen = v;
    }
    if let Some(v) = args.map {
        config.map_path = v;
    }
    if args.template.is_some() {
        config.template_path = args.template;
    }
    if let Some(v) = args.pace {
        config.pace = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if args.mission_log.is_some() {
        config.mission_log = args.mission_log;
    }
    if args.outcome_log.is_some() {
        config.outcome_log = args.outcome_log;
    }
    if args.mock {
        config.provider.mock = true;
    }

    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::new("runtime", e))?;
    runtime.block_on(quadnav_gateway::serve(config)).map_err(|e| CliError::new("serve_failed", e))
}

fn provider(args: &ProviderArgs, world: &Arc<WaypointWorld>) -> Result<Arc<dyn Provider>, CliError> {
    if args.mock {
        return Ok(Arc::new(MockProvider::new(world.clone())));
    }
    let (Some(url), Some(model)) = (&args.endpoint, &args.model) else {
        return Err(CliError::new("provider_config", "--endpoint and --model are required without --mock"));
    };
    let mut config = ProviderConfig::new(url, model);
    config.api_key_env = args.api_key_env.clone();
    config.timeout_secs = args.timeout;
    config.max_retries = args.retries;
    let config = config.with_api_key_from_env();
    let http = HttpProvider::new(config).map_err(|e| CliError::new("provider_config", e))?;
    Ok(Arc::new(http))
}

fn ground(args: GroundArgs, fixtures: &Path) -> Result<(), CliError> {
    let (world, template) = world_and_template(args.map, args.template, fixtures)?;
    let provider = provider(&args.provider, &world)?;
    let outcome = Grounder::new(world, template, provider).ground(&args.instruction);
    if args.outcome {
        println!("{}", serde_json::to_string_pretty(&outcome).expect("outcomes serialize"));
    }
    match (&outcome.plan, &outcome.rejection) {
        (Some(plan), _) => {
            if !args.outcome {
                println!("{}", serde_json::to_string_pretty(&PlanBody { actions: &plan.actions }).expect("plans serialize"));
            }
            Ok(())
        }
        (None, Some(rejection)) => {
            let kind = match rejection.stage {
                Stage::Provider => "provider_error",
                _ => "plan_rejected",
            };
            Err(CliError { error_kind: kind, detail: rejection.detail.clone(), stage: Some(rejection.stage), defects: rejection.defects.clone() })
        }
        (None, None) => Err(CliError::new("plan_rejected", "grounding produced no plan")),
    }
}

fn suite_path(suite: &str, fixtures: &Path) -> PathBuf {
    let direct = PathBuf::from(suite);
    if direct.is_file() {
        return direct;
    }
    fixtures.join("suites").join(format!("{suite}.json"))
}

fn replay(args: ReplayArgs, fixtures: &Path) -> Result<(), CliError> {
    let suite = ScenarioSuite::load(suite_path(&args.suite, fixtures)).map_err(|e| CliError::new("suite_invalid", e))?;
    let (world, template) = world_and_template(args.map, args.template, fixtures)?;
    let provider: Arc<dyn Provider> = match &args.recorded {
        Some(path) => Arc::new(RecordedProvider::load(path).map_err(|e| CliError::new("recording_unreadable", e))?),
        None => Arc::new(MockProvider::new(world.clone())),
    };
    let report = run_suite(&suite, world, template, provider, RunOptions { parallel: args.parallel })
        .map_err(|e| CliError::new("suite_invalid", e))?;
    if let Some(dir) = &args.out {
        write_report(&report, dir).map_err(|e| CliError::new("report_unwritable", e))?;
    }
    print!("{}", render_report(&report));
    Ok(())
}

#[derive(Serialize)]
struct MapSummary<'a> {
    map: &'a str,
    waypoints: usize,
    zones: usize,
    free_cells: usize,
}

fn map_check(file: &Path) -> Result<(), CliError> {
    let world = load_world(file).map_err(|e| CliError::new("map_invalid", e))?;
    let summary = MapSummary {
        map: world.name(),
        waypoints: world.waypoints().count(),
        zones: world.zones().count(),
        free_cells: world.grid().free_cell_count(),
    };
    println!("{}", serde_json::to_string(&summary).expect("summaries serialize"));
    Ok(())
}
