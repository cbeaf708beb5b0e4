//! Online decision layer: pick the network whose normalized target is
//! closest to the final target, take its modal path, and fall back to the
//! cheapest distance-free alternative when that path collides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{OccupancyGrid, SensorGeometry};
use crate::nn::{actor_forward, load_weights_for, save_weights, PolicyPair};
use crate::point::Point2;
use crate::spline::{
    curvature_cost, distance_cost, obstacle_cost, ActionVector, CostBreakdown, CostWeights, SplinePath,
    SplineSettings,
};

/// Centers of the outermost-ring cells, ordered by angular row.
pub fn normalized_targets(geometry: &SensorGeometry) -> Vec<Point2> {
    let n = geometry.n();
    (0..n)
        .map(|row| geometry.cell_center(n - 1, row).expect("row within grid"))
        .collect()
}

/// 1-based index of the target closest to `final_target`. Near-ties go to
/// the middle row, then to the lower index.
pub fn select_network(targets: &[Point2], final_target: Point2) -> usize {
    assert!(!targets.is_empty(), "no candidate targets");
    let d: Vec<f64> = targets.iter().map(|g| g.distance(final_target)).collect();
    let best = d.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * best.max(1.0);
    let middle = targets.len() / 2;
    let tied: Vec<usize> = (0..targets.len()).filter(|&i| d[i] - best <= tol).collect();
    let pick = if tied.contains(&middle) { middle } else { tied[0] };
    pick + 1
}

/// Rigid robot pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }
}

pub fn to_robot_frame(world: Point2, pose: &Pose) -> Point2 {
    let d = world - pose.position();
    let (s, c) = pose.heading.sin_cos();
    Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
}

pub fn to_world_frame(local: Point2, pose: &Pose) -> Point2 {
    let (s, c) = pose.heading.sin_cos();
    Point2::new(pose.x + c * local.x - s * local.y, pose.y + s * local.x + c * local.y)
}

/// One trained pair per normalized target, indexed from 1.
#[derive(Debug, Clone)]
pub struct PolicySet {
    pairs: Vec<PolicyPair>,
}

impl PolicySet {
    /// Pairs may be given in any order; every target `1..=n` must be present once.
    pub fn new(mut pairs: Vec<PolicyPair>, n: usize) -> Result<Self> {
        pairs.sort_by_key(|p| p.target_index);
        for k in 1..=n {
            match pairs.get(k - 1) {
                Some(p) if p.target_index == k && p.n() == n => {}
                _ => return Err(Error::MissingWeights(k)),
            }
        }
        if pairs.len() != n {
            return Err(Error::Config(format!("expected {n} policy pairs, got {}", pairs.len())));
        }
        Ok(Self { pairs })
    }

    pub fn get(&self, index: usize) -> Option<&PolicyPair> {
        index.checked_sub(1).and_then(|i| self.pairs.get(i))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PolicyPair> {
        self.pairs.iter()
    }

    pub fn weight_file(dir: &Path, index: usize) -> PathBuf {
        dir.join(format!("policy_{index}.json"))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for p in &self.pairs {
            save_weights(p, &Self::weight_file(dir, p.target_index))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, n: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(n);
        for k in 1..=n {
            let path = Self::weight_file(dir, k);
            if !path.exists() {
                return Err(Error::MissingWeights(k));
            }
            pairs.push(load_weights_for(&path, n, k)?);
        }
        Self::new(pairs, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFrame {
    pub final_target_world: Option<Point2>,
    pub final_target_robot: Point2,
    pub normalized_targets: Vec<Point2>,
    pub chosen_index: usize,
    pub temporary_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Ok,
    FallbackOk,
    AllBlocked,
}

impl PlanStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanStatus::Ok => "ok",
            PlanStatus::FallbackOk => "fallback_ok",
            PlanStatus::AllBlocked => "all_blocked",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub path: SplinePath,
    pub action: ActionVector,
    pub cost: CostBreakdown,
    /// 1-based network index whose path was returned.
    pub used_network: usize,
    pub fallback_used: bool,
    pub status: PlanStatus,
    pub frame: TargetFrame,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub policies: &'a PolicySet,
    pub weights: &'a CostWeights,
    pub geometry: &'a SensorGeometry,
    pub settings: SplineSettings,
}

fn modal_path(ctx: &PlanContext<'_>, grid: &OccupancyGrid, index: usize) -> Result<(ActionVector, SplinePath)> {
    let pair = ctx.policies.get(index).ok_or(Error::MissingWeights(index))?;
    let action = actor_forward(grid, &pair.actor)?.modal_action();
    let path = SplinePath::build_with(&action, ctx.geometry, ctx.settings)?;
    Ok((action, path))
}

/// One planning decision for the current grid.
///
/// The preferred network's cost measures distance to its normalized target,
/// or to the final target itself when nothing was sensed. Fallback candidates
/// are scored without the distance term.
pub fn plan_step(grid: &OccupancyGrid, final_target_robot: Point2, ctx: &PlanContext<'_>) -> Result<PlanResult> {
    let targets = normalized_targets(ctx.geometry);
    if ctx.policies.len() != targets.len() {
        return Err(Error::Config(format!(
            "{} networks loaded, {} normalized targets",
            ctx.policies.len(),
            targets.len()
        )));
    }
    let chosen = select_network(&targets, final_target_robot);
    let mut frame = TargetFrame {
        final_target_world: None,
        final_target_robot,
        normalized_targets: targets.clone(),
        chosen_index: chosen,
        temporary_index: None,
    };
    let goal = if grid.is_empty() {
        final_target_robot
    } else {
        targets[chosen - 1]
    };
    let (action, path) = modal_path(ctx, grid, chosen)?;
    let cost = ctx.weights.combine(
        distance_cost(&path, goal),
        curvature_cost(&path)?,
        obstacle_cost(&path, grid),
    );
    if cost.obs == 0 {
        return Ok(PlanResult {
            path,
            action,
            cost,
            used_network: chosen,
            fallback_used: false,
            status: PlanStatus::Ok,
            frame,
        });
    }

    let fallback_weights = ctx.weights.without_distance();
    let mut best: Option<(usize, ActionVector, SplinePath, CostBreakdown)> = None;
    for i in 1..=targets.len() {
        let (a, p) = modal_path(ctx, grid, i)?;
        let c = fallback_weights.combine(
            distance_cost(&p, targets[i - 1]),
            curvature_cost(&p)?,
            obstacle_cost(&p, grid),
        );
        if best.as_ref().is_none_or(|b| c.total < b.3.total) {
            best = Some((i, a, p, c));
        }
    }
    let (i, action, path, cost) = best.expect("at least one candidate network");
    frame.temporary_index = Some(i);
    let status = if cost.obs == 0 {
        PlanStatus::FallbackOk
    } else {
        PlanStatus::AllBlocked
    };
    Ok(PlanResult {
        path,
        action,
        cost,
        used_network: i,
        fallback_used: true,
        status,
        frame,
    })
}
