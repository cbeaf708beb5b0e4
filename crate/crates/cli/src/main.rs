use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smartbsp::sim::ScenarioKind;
use smartbsp::{Error, Point2};
use smartbsp_cli::{
    cmd_eval, cmd_gen_data, cmd_inspect_model, cmd_plan, cmd_simulate, cmd_train, describe_plan, exit, weights_dir,
    CliError, CliResult, RunConfig, SimulateOptions,
};

#[derive(Debug, Parser)]
#[command(name = "smartbsp", version, about = "Learned B-spline local planner")]
struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding policy_1.json .. policy_5.json (default: <out>/weights).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded dataset of random occupancy grids.
    GenData {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train all five actor-critic pairs.
    Train {
        /// Existing dataset file; generated from the seed when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Score trained pairs on held-out grids.
    Eval {
        #[arg(long)]
        grids: Option<usize>,
    },
    /// Plan once on a grid file (ASCII grid or .csv point cloud).
    Plan {
        #[arg(long)]
        grid: PathBuf,
        /// Final target in the robot frame, `x,y` in metres.
        #[arg(long, value_parser = parse_point, default_value = "10,0")]
        target: Point2,
    },
    /// Run seeded closed-loop episodes.
    Simulate {
        #[arg(long, value_parser = parse_kind)]
        scenario: Option<ScenarioKind>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Obstacle count for the random field.
        #[arg(long)]
        count: Option<usize>,
        /// Scenario CSV for the custom kind.
        #[arg(long)]
        scenario_file: Option<PathBuf>,
    },
    /// Print layer shapes and norms of a weight file or directory.
    InspectModel {
        path: Option<PathBuf>,
    },
}

fn parse_point(s: &str) -> Result<Point2, String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let x = x.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let y = y.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok(Point2::new(x, y))
}

fn parse_kind(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg.resolved())
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let weights = cli.weights.as_deref();
    match cli.command {
        Command::GenData { count } => {
            let out = cmd_gen_data(&cfg, count)?;
            println!("{} grids -> {}", out.count, out.path.display());
        }
        Command::Train { dataset } => {
            let out = cmd_train(&cfg, dataset.as_deref())?;
            println!("network  target(x,y)        success  time_s");
            for r in &out.rows {
                println!(
                    "{:>7}  ({:>6.3}, {:>6.3})   {:>6.1}%  {:>6.1}",
                    r.network,
                    r.target.x,
                    r.target.y,
                    100.0 * r.success_rate,
                    r.wall_clock_s
                );
            }
            println!("weights -> {}", out.weights_dir.display());
        }
        Command::Eval { grids } => {
            println!("network  success  feasible  median_cost_ratio");
            for r in cmd_eval(&cfg, weights, grids)? {
                println!(
                    "{:>7}  {:>6.1}%  {:>7.1}%  {:.3}",
                    r.network,
                    100.0 * r.success_rate,
                    100.0 * r.feasible_ceiling,
                    r.median_cost_ratio
                );
            }
        }
        Command::Plan { grid, target } => {
            let out = cmd_plan(&cfg, weights, &grid, target)?;
            println!("{}", describe_plan(&out.result));
            if out.result.status == smartbsp::planner::PlanStatus::AllBlocked {
                return Err(CliError::AllBlocked);
            }
        }
        Command::Simulate {
            scenario,
            seeds,
            count,
            scenario_file,
        } => {
            let opts = SimulateOptions {
                kind: scenario,
                seeds,
                obstacle_count: count,
                scenario_file,
            };
            let rows = cmd_simulate(&cfg, weights, &opts)?;
            for r in &rows {
                println!(
                    "seed {:>4}  {:<11}  steps {:>5}  replans {:>4}  fallbacks {:>3}  {:.2}s",
                    r.seed,
                    smartbsp_cli::termination_name(&r.episode),
                    r.episode.steps,
                    r.episode.replan_events.len(),
                    r.episode.fallback_count(),
                    r.wall_clock_s
                );
            }
            let reached = rows.iter().filter(|r| r.episode.reached).count();
            println!("reached {reached}/{}", rows.len());
        }
        Command::InspectModel { path } => {
            let path = path.unwrap_or_else(|| weights_dir(&cfg, weights));
            print!("{}", cmd_inspect_model(&cfg, &path)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
