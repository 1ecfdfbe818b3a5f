//! `teleop`: headless simulations, the networked control center, vehicle
//! agents and transition-table tooling.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use teleop_core::agent::VehicleAgent;
use teleop_core::center::CenterConfig;
use teleop_core::eventlog::{export_replayed, read_log, render_log, replay, EventLog};
use teleop_core::fsm::{AssistanceKind, LegalProfile, ManeuverMode, TransitionModel};
use teleop_core::policy::{OperatorPolicy, PolicyName};
use teleop_core::scenario::Scenario;
use teleop_core::sim::{run_sim_with_log, SimConfig};
use teleop_service::client::{run_agent, AgentOptions};
use teleop_service::{api, serve_vehicles, Service, ServiceConfig};
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(name = "teleop", version, about = "Teleoperation control center and AV fleet simulator")]
struct Cli {
    /// Log verbosity for diagnostics on stderr (error, warn, info, debug).
    #[arg(long, global = true, default_value = "warn")]
    log_level: tracing::Level,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios end to end: headless by default, or against the
    /// networked center with `--serve`.
    #[command(alias = "sim")]
    Run(RunArgs),
    /// Run the control center: vehicle listener plus console HTTP API.
    Serve(ServeArgs),
    /// Connect one scenario vehicle to a running center.
    Agent(AgentArgs),
    /// Print the permitted transition rows of a profile.
    Table {
        #[arg(long, default_value = "generic")]
        profile: String,
    },
    /// Rows permitted by one profile but not the other.
    Diff {
        #[arg(long, default_value = "generic")]
        from: String,
        #[arg(long, default_value = "german")]
        to: String,
    },
    /// Re-apply a log's transitions and print the resulting states.
    Replay {
        log: PathBuf,
        /// Stop after this entry_seq.
        #[arg(long)]
        upto: Option<u64>,
        /// Print the replayed transition entries instead of the final states.
        #[arg(long)]
        export: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "generic")]
    profile: String,
    #[arg(long = "scenario", num_args = 1.., required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, default_value = "auto_resolve")]
    policy: PolicyName,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stepped simulated clock, no network (the default).
    #[arg(long, conflicts_with = "serve")]
    headless: bool,
    /// Start the networked center and connect the scenario vehicles to it.
    #[arg(long)]
    serve: bool,
    /// Fail the run when requests are still open at the end.
    #[arg(long)]
    require_resolution: bool,
    #[arg(long)]
    fm_intervention: bool,
    /// Directory receiving events.ndjson and summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
    /// remote_driving, maneuver_clearance, maneuver_proposal or object_classification.
    #[arg(long, value_parser = parse_mode)]
    prefer_mode: Option<ManeuverMode>,
    /// Try the preferred mode even when the profile or link rules it out.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long, default_value_t = 2)]
    operators: usize,
    /// Override the scenarios' horizons, seconds.
    #[arg(long)]
    horizon: Option<f64>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args, Clone)]
struct NetArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    http: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:7070")]
    vehicles: SocketAddr,
    /// Issue StartService automatically when a vehicle registers.
    #[arg(long)]
    auto_registration: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "generic")]
    profile: String,
    #[arg(long)]
    fm_intervention: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    connect: SocketAddr,
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value = "generic")]
    profile: String,
    /// Wall milliseconds per 100 ms simulation tick.
    #[arg(long, default_value_t = 100)]
    tick_ms: u64,
}

fn parse_mode(s: &str) -> Result<ManeuverMode, String> {
    Ok(match s {
        "remote_driving" => ManeuverMode::RemoteDriving,
        "maneuver_clearance" => ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverClearance),
        "maneuver_proposal" => ManeuverMode::RemoteAssistance(AssistanceKind::ManeuverProposal),
        "object_classification" => ManeuverMode::RemoteAssistance(AssistanceKind::ObjectClassification),
        other => return Err(format!("unknown maneuver mode {other:?}")),
    })
}

fn profile(name: &str) -> Result<LegalProfile> {
    Ok(LegalProfile::by_name(name)?)
}

fn load_scenarios(paths: &[PathBuf]) -> Result<Vec<Scenario>> {
    paths
        .iter()
        .map(|p| Scenario::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn open_log(out: Option<&Path>) -> Result<Arc<EventLog>> {
    Ok(Arc::new(match out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            EventLog::create(dir.join("events.ndjson"))?
        }
        None => EventLog::in_memory(),
    }))
}

fn run_headless(args: &RunArgs) -> Result<ExitCode> {
    let scenarios = load_scenarios(&args.scenarios)?;
    let mut policy = OperatorPolicy::new(args.policy).with_fallback(!args.no_fallback);
    if let Some(mode) = args.prefer_mode {
        policy = policy.prefer(mode);
    }
    let mut cfg = SimConfig::new(profile(&args.profile)?, policy, args.seed);
    cfg.operators = args.operators;
    cfg.require_resolution = args.require_resolution;
    cfg.fm_intervention = args.fm_intervention;
    cfg.auto_registration = args.net.auto_registration;
    cfg.horizon_s = args.horizon;
    let log = open_log(args.out.as_deref())?;
    let report = run_sim_with_log(&scenarios, &cfg, log);
    let summary = report.summary.to_json();
    if let Some(dir) = &args.out {
        fs::write(dir.join("summary.json"), format!("{summary}\n"))?;
    }
    println!("{summary}");
    if let Some(v) = report.first_violation() {
        eprintln!("invariant violated: {v}");
    }
    Ok(ExitCode::from(report.exit_code() as u8))
}

async fn start_service(profile: LegalProfile, fm_intervention: bool, out: Option<&Path>, net: &NetArgs) -> Result<Service> {
    let center = CenterConfig::new(profile)
        .with_auto_registration(net.auto_registration)
        .with_fm_intervention(fm_intervention);
    let svc = Service::new(ServiceConfig::new(center), open_log(out)?);
    let vehicles = TcpListener::bind(net.vehicles).await.with_context(|| format!("binding {}", net.vehicles))?;
    let http = TcpListener::bind(net.http).await.with_context(|| format!("binding {}", net.http))?;
    eprintln!("vehicles on {}, console API on http://{}", vehicles.local_addr()?, http.local_addr()?);
    tokio::spawn(serve_vehicles(svc.clone(), vehicles));
    let app = api::router(svc.clone());
    tokio::spawn(async move { axum::serve(http, app).await });
    svc.spawn_fm_scanner();
    Ok(svc)
}

async fn run_served(args: &RunArgs) -> Result<ExitCode> {
    let scenarios = load_scenarios(&args.scenarios)?;
    let p = profile(&args.profile)?;
    start_service(p.clone(), args.fm_intervention, args.out.as_deref(), &args.net).await?;
    let opts = AgentOptions {
        stop_on_route_complete: false,
        ..AgentOptions::default()
    };
    for s in scenarios {
        let agent = VehicleAgent::new(s, TransitionModel::default(), p.clone());
        let addr = args.net.vehicles;
        tokio::spawn(async move {
            if let Err(e) = run_agent(addr, agent, opts).await {
                tracing::error!("agent: {e}");
            }
        });
    }
    tokio::signal::ctrl_c().await?;
    Ok(ExitCode::SUCCESS)
}

async fn serve(args: &ServeArgs) -> Result<ExitCode> {
    start_service(profile(&args.profile)?, args.fm_intervention, args.out.as_deref(), &args.net).await?;
    tokio::signal::ctrl_c().await?;
    Ok(ExitCode::SUCCESS)
}

async fn agent(args: &AgentArgs) -> Result<ExitCode> {
    let scenario = Scenario::load(&args.scenario).with_context(|| format!("loading {}", args.scenario.display()))?;
    let agent = VehicleAgent::new(scenario, TransitionModel::default(), profile(&args.profile)?);
    let opts = AgentOptions {
        tick: std::time::Duration::from_millis(args.tick_ms),
        ..AgentOptions::default()
    };
    let agent = run_agent(args.connect, agent, opts).await?;
    eprintln!("{} finished in {} at {:.1} m", agent.vehicle_id(), agent.state(), agent.position());
    Ok(ExitCode::SUCCESS)
}

fn print_replay(path: &Path, upto: Option<u64>, export: bool) -> Result<ExitCode> {
    let entries = read_log(path)?;
    if export {
        print!("{}", render_log(&export_replayed(&entries, upto)?));
    } else {
        match replay(&entries, upto) {
            Ok(states) => println!("{}", serde_json::to_string_pretty(&states)?),
            Err(e) => {
                eprintln!("{e}");
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let runtime = || tokio::runtime::Runtime::new().context("starting runtime");
    match cli.command {
        Command::Run(args) if args.serve => runtime()?.block_on(run_served(&args)),
        Command::Run(args) => run_headless(&args),
        Command::Serve(args) => runtime()?.block_on(serve(&args)),
        Command::Agent(args) => runtime()?.block_on(agent(&args)),
        Command::Table { profile: name } => {
            print!("{}", TransitionModel::default().export_table(&profile(&name)?));
            Ok(ExitCode::SUCCESS)
        }
        Command::Diff { from, to } => {
            let diff = TransitionModel::default().profile_diff(&profile(&from)?, &profile(&to)?);
            println!("{}", serde_json::to_string_pretty(&diff)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Replay { log, upto, export } => print_replay(&log, upto, export),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_max_level(cli.log_level)
        .with_writer(std::io::stderr)
        .init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
