//! Commands behind the `smartbsp` binary. Each one takes a resolved
//! [`RunConfig`], writes its artifacts under `config.out`, and returns what
//! it computed so callers can inspect results without reparsing files.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::Serialize;
use smartbsp::dataset::{load_dataset, save_dataset};
use smartbsp::grid::{load_cloud_csv, OccupancyGrid};
use smartbsp::nn::{actor_forward, architecture_signature, load_weights, NetKind, PolicyPair};
use smartbsp::planner::{normalized_targets, plan_step, PlanContext, PlanResult, PlanStatus, PolicySet};
use smartbsp::ppo::{gen_training_grids, held_out_grids, train_all, TrainReport, TrainSetup};
use smartbsp::sim::{make_scenario, run_episode, EpisodeResult, EpisodeSetup, ScenarioKind, WorldScenario};
use smartbsp::spline::{ActionTable, CostWeights};
use smartbsp::svg::{render_episode, render_plan};
use smartbsp::{Error, Point2};

pub use config::RunConfig;

pub const DATASET_FILE: &str = "grids.bin";
pub const WEIGHTS_DIR: &str = "weights";
pub const TRAIN_SUMMARY: &str = "success_summary.csv";
pub const EVAL_SUMMARY: &str = "eval_summary.csv";
pub const PLAN_PATH: &str = "plan_path.csv";
pub const PLAN_SVG: &str = "plan.svg";
pub const SIM_SUMMARY: &str = "simulate_summary.csv";

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const ALL_BLOCKED: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("every candidate path collides")]
    AllBlocked,
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::AllBlocked => exit::ALL_BLOCKED,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Contract(_)
                | Error::MissingWeights(_)
                | Error::SignatureMismatch { .. }
                | Error::ShapeMismatch { .. }
                | Error::Placement { .. } => exit::CONFIG,
                Error::Divergence { .. } => exit::DIVERGENCE,
                Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Corrupt { .. } => exit::IO,
                _ => exit::FAILURE,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn prepare(cfg: &RunConfig) -> CliResult<()> {
    cfg.validate()?;
    cfg.write_effective(&cfg.out)?;
    Ok(())
}

pub fn weights_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.out.join(WEIGHTS_DIR), Path::to_path_buf)
}

#[derive(Debug, Clone)]
pub struct GenDataOutput {
    pub path: PathBuf,
    pub count: usize,
}

pub fn cmd_gen_data(cfg: &RunConfig, count: Option<usize>) -> CliResult<GenDataOutput> {
    prepare(cfg)?;
    let count = count.unwrap_or(cfg.hyper.dataset_size);
    let grids = gen_training_grids(count, cfg.hyper.obstacle_prob, cfg.seed, &cfg.geometry);
    let path = cfg.out.join(DATASET_FILE);
    save_dataset(&path, &grids, &cfg.geometry)?;
    info!("wrote {count} grids to {}", path.display());
    Ok(GenDataOutput { path, count })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRow {
    pub network: usize,
    pub target: Point2,
    pub success_rate: f64,
    pub mean_cost_first: f64,
    pub mean_cost_last: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights_dir: PathBuf,
    pub rows: Vec<TrainRow>,
    pub reports: Vec<TrainReport>,
    pub policies: PolicySet,
}

fn write_train_summary(path: &Path, rows: &[TrainRow]) -> CliResult<()> {
    let mut out = create(path)?;
    writeln!(out, "network,target_x_m,target_y_m,success_rate,mean_cost_first_10pct,mean_cost_last_10pct")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.network, r.target.x, r.target.y, r.success_rate, r.mean_cost_first, r.mean_cost_last
        )?;
    }
    out.flush()?;
    Ok(())
}

/// Train all five pairs. Without `dataset` the grids are generated from the
/// config seed, identically to `gen-data`.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> CliResult<TrainOutput> {
    prepare(cfg)?;
    let grids = match dataset {
        Some(path) => load_dataset(path, &cfg.geometry)?,
        None => gen_training_grids(cfg.hyper.dataset_size, cfg.hyper.obstacle_prob, cfg.seed, &cfg.geometry),
    };
    let setup = TrainSetup::new(cfg.geometry, cfg.weights, cfg.hyper, cfg.spline)?;
    let trained = train_all(&grids, &setup)?;
    let targets = normalized_targets(&cfg.geometry);
    let mut pairs = Vec::with_capacity(trained.len());
    let mut reports = Vec::with_capacity(trained.len());
    let mut rows = Vec::with_capacity(trained.len());
    for (pair, report) in trained {
        let k = report.target_index;
        let mut out = create(&cfg.out.join(format!("train_report_{k}.csv")))?;
        report.write_csv(&mut out)?;
        out.flush()?;
        rows.push(TrainRow {
            network: k,
            target: targets[k - 1],
            success_rate: report.success_rate,
            mean_cost_first: report.mean_cost_window(0.1, false),
            mean_cost_last: report.mean_cost_window(0.1, true),
            wall_clock_s: report.wall_clock_s,
        });
        pairs.push(pair);
        reports.push(report);
    }
    let policies = PolicySet::new(pairs, cfg.geometry.n())?;
    let dir = cfg.out.join(WEIGHTS_DIR);
    policies.save(&dir)?;
    write_train_summary(&cfg.out.join(TRAIN_SUMMARY), &rows)?;
    let timing: Vec<(usize, f64)> = rows.iter().map(|r| (r.network, r.wall_clock_s)).collect();
    std::fs::write(
        cfg.out.join("train_timing.json"),
        serde_json::to_string_pretty(&timing).map_err(Error::from)?,
    )?;
    Ok(TrainOutput {
        weights_dir: dir,
        rows,
        reports,
        policies,
    })
}

/// Per-grid ratio of the policy's cost to the exhaustive optimum; `0 / 0`
/// counts as an exact match.
pub fn cost_ratio(policy_cost: f64, optimum: f64) -> f64 {
    const TINY: f64 = 1e-9;
    if optimum.abs() < TINY {
        if policy_cost.abs() < TINY {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        policy_cost / optimum
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub network: usize,
    pub success_rate: f64,
    /// Fraction of grids on which any of the 625 actions is collision-free.
    pub feasible_ceiling: f64,
    /// Median over grids of policy cost divided by the exhaustive minimum.
    pub median_cost_ratio: f64,
}

/// Score one pair on `grids` with its modal action.
pub fn evaluate_pair(
    pair: &PolicyPair,
    grids: &[OccupancyGrid],
    table: &ActionTable,
    weights: &CostWeights,
) -> CliResult<EvalRow> {
    let geometry = table.geometry();
    let target = normalized_targets(geometry)[pair.target_index - 1];
    let mut ok = 0usize;
    let mut feasible = 0usize;
    let mut ratios = Vec::with_capacity(grids.len());
    for grid in grids {
        let action = actor_forward(grid, &pair.actor)?.modal_action();
        let cost = table.cost(&action, grid, target, weights);
        let (_, best) = table.optimum(grid, target, weights);
        ok += (cost.obs == 0) as usize;
        feasible += table.any_collision_free(grid.mask()) as usize;
        ratios.push(cost_ratio(cost.total, best.total));
    }
    let count = grids.len().max(1) as f64;
    Ok(EvalRow {
        network: pair.target_index,
        success_rate: ok as f64 / count,
        feasible_ceiling: feasible as f64 / count,
        median_cost_ratio: if ratios.is_empty() { f64::NAN } else { median(&mut ratios) },
    })
}

pub fn cmd_eval(cfg: &RunConfig, weights: Option<&Path>, grid_count: Option<usize>) -> CliResult<Vec<EvalRow>> {
    prepare(cfg)?;
    let policies = PolicySet::load(&weights_dir(cfg, weights), cfg.geometry.n())?;
    let mut hyper = cfg.hyper;
    if let Some(c) = grid_count {
        hyper.eval_grids = c;
    }
    let grids = held_out_grids(&hyper, &cfg.geometry);
    let table = ActionTable::new(&cfg.geometry, cfg.spline)?;
    let rows = policies
        .iter()
        .map(|pair| evaluate_pair(pair, &grids, &table, &cfg.weights))
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = create(&cfg.out.join(EVAL_SUMMARY))?;
    writeln!(out, "network,success_rate,feasible_ceiling,median_cost_ratio")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.network, r.success_rate, r.feasible_ceiling, r.median_cost_ratio
        )?;
    }
    out.flush()?;
    Ok(rows)
}

/// Grid input for `plan`: a `.csv` point cloud (robot frame) or an ASCII
/// grid with `#` for obstacles, most positive angular row first.
pub fn read_grid_file(path: &Path, cfg: &RunConfig) -> CliResult<(OccupancyGrid, Vec<Point2>)> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let cloud = load_cloud_csv(path)?;
        Ok((OccupancyGrid::from_cloud(&cloud, &cfg.geometry), cloud))
    } else {
        let text = std::fs::read_to_string(path)?;
        let grid = OccupancyGrid::parse_ascii(&text, cfg.geometry).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok((grid, Vec::new()))
    }
}

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub grid: OccupancyGrid,
    pub result: PlanResult,
}

/// One planning step. `all_blocked` is returned as a result, with its
/// artifacts written; callers decide how to surface it.
pub fn cmd_plan(
    cfg: &RunConfig,
    weights: Option<&Path>,
    grid_path: &Path,
    target: Point2,
) -> CliResult<PlanOutput> {
    prepare(cfg)?;
    let policies = PolicySet::load(&weights_dir(cfg, weights), cfg.geometry.n())?;
    let (grid, cloud) = read_grid_file(grid_path, cfg)?;
    let ctx = PlanContext {
        policies: &policies,
        weights: &cfg.weights,
        geometry: &cfg.geometry,
        settings: cfg.spline,
    };
    let result = plan_step(&grid, target, &ctx)?;
    let mut out = create(&cfg.out.join(PLAN_PATH))?;
    result.path.write_csv(&mut out)?;
    out.flush()?;
    std::fs::write(cfg.out.join(PLAN_SVG), render_plan(&grid, &result, &cloud))?;
    Ok(PlanOutput { grid, result })
}

pub fn describe_plan(result: &PlanResult) -> String {
    format!(
        "status {}\nnetwork {} (preferred {}, fallback {})\naction {}\ncost total {} dist {} curv {} obs {}",
        result.status.as_str(),
        result.used_network,
        result.frame.chosen_index,
        result.fallback_used,
        result.action,
        result.cost.total,
        result.cost.dist,
        result.cost.curv,
        result.cost.obs
    )
}

#[derive(Debug, Clone)]
pub struct EpisodeRow {
    pub seed: u64,
    pub scenario: WorldScenario,
    pub episode: EpisodeResult,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SimulateOptions {
    pub kind: Option<ScenarioKind>,
    pub seeds: usize,
    pub obstacle_count: Option<usize>,
    pub scenario_file: Option<PathBuf>,
}

/// Run `seeds` episodes with scenario seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn cmd_simulate(cfg: &RunConfig, weights: Option<&Path>, opts: &SimulateOptions) -> CliResult<Vec<EpisodeRow>> {
    prepare(cfg)?;
    let policies = PolicySet::load(&weights_dir(cfg, weights), cfg.geometry.n())?;
    let mut params = cfg.scenario.clone();
    if let Some(k) = opts.obstacle_count {
        params.obstacle_count = k;
    }
    if let Some(path) = &opts.scenario_file {
        params.csv_path = Some(path.clone());
    }
    let kind = match (&opts.kind, &params.csv_path) {
        (Some(k), _) => k.clone(),
        (None, Some(_)) => ScenarioKind::CustomCsv,
        (None, None) => ScenarioKind::RandomField,
    };
    let setup = EpisodeSetup {
        policies: &policies,
        geometry: cfg.geometry,
        weights: cfg.weights,
        settings: cfg.spline,
        sim: cfg.sim,
    };
    let seeds: Vec<u64> = (0..opts.seeds.max(1) as u64).map(|i| cfg.seed + i).collect();
    let rows = seeds
        .par_iter()
        .map(|&seed| -> CliResult<EpisodeRow> {
            let scenario = make_scenario(&kind, seed, &params)?;
            let started = Instant::now();
            let episode = run_episode(&scenario, &setup)?;
            Ok(EpisodeRow {
                seed,
                scenario,
                episode,
                wall_clock_s: started.elapsed().as_secs_f64(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut summary = create(&cfg.out.join(SIM_SUMMARY))?;
    writeln!(
        summary,
        "seed,reached,collided,termination,steps,replans,fallbacks,driven_length_m,final_distance_m"
    )?;
    for row in &rows {
        let ep = &row.episode;
        let last = ep.trajectory.last().expect("trajectory has the start pose");
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{}",
            row.seed,
            ep.reached,
            ep.collided,
            termination_name(ep),
            ep.steps,
            ep.replan_events.len(),
            ep.fallback_count(),
            ep.driven_length(),
            last.pose.position().distance(row.scenario.target)
        )?;
        let mut log = create(&cfg.out.join(format!("episode_{}.csv", row.seed)))?;
        ep.write_log_csv(&mut log)?;
        log.flush()?;
        let mut world = create(&cfg.out.join(format!("scenario_{}.csv", row.seed)))?;
        row.scenario.write_csv(&mut world)?;
        world.flush()?;
        std::fs::write(
            cfg.out.join(format!("episode_{}.svg", row.seed)),
            render_episode(&row.scenario, ep),
        )?;
    }
    summary.flush()?;
    Ok(rows)
}

pub fn termination_name(ep: &EpisodeResult) -> &'static str {
    use smartbsp::sim::Termination::*;
    match ep.termination {
        Reached => "reached",
        Collision => "collision",
        AllBlocked => PlanStatus::AllBlocked.as_str(),
        StepBudget => "step_budget",
    }
}

/// Human-readable summary of one weight file or a directory of them.
pub fn cmd_inspect_model(cfg: &RunConfig, path: &Path) -> CliResult<String> {
    cfg.validate()?;
    let n = cfg.geometry.n();
    let pairs = if path.is_dir() {
        PolicySet::load(path, n)?.iter().cloned().collect::<Vec<_>>()
    } else {
        vec![load_weights(path, n)?]
    };
    let mut text = format!("signature {}\n", architecture_signature(n));
    for pair in &pairs {
        text.push_str(&format!("policy {}\n", pair.target_index));
        for (kind, net) in [(NetKind::Actor, &pair.actor), (NetKind::Critic, &pair.critic)] {
            text.push_str(&format!("  {} params {}\n", kind.name(), net.params().len()));
            for (i, layer) in net.architecture().layers().iter().enumerate() {
                let values = net.layer_params(i);
                let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
                text.push_str(&format!("    {:<14} {:?} l2 {:.6}\n", layer.name, layer.shape, norm));
            }
        }
    }
    Ok(text)
}
