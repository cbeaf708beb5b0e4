//! Clipped-surrogate policy optimization of one actor-critic pair per
//! normalized target, on independent single-step grid samples.

use std::io::Write;
use std::time::Instant;

use log::{debug, info, trace};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{OccupancyGrid, SensorGeometry};
use crate::nn::{
    log_prob_logit_grad, log_prob_of, sample_action, ActionDistribution, Adam, AdamConfig, ForwardCache,
    PolicyPair,
};
use crate::planner::normalized_targets;
use crate::spline::{ActionTable, ActionVector, CostWeights, SplineSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clip_epsilon: f64,
    pub updates_per_iteration: usize,
    pub dataset_size: usize,
    pub obstacle_prob: f64,
    pub seed: u64,
    pub normalize_advantages: bool,
    /// Weight of the per-column policy entropy added to the surrogate. Without
    /// it the actor collapses onto one grid-independent action early on.
    pub entropy_coef: f64,
    /// Entropy weight reached at the last iteration, interpolated linearly
    /// from `entropy_coef`; lets the policy sharpen once it has explored.
    pub entropy_coef_final: f64,
    /// Held-out grids for the final success rate, drawn from `seed + 1`.
    pub eval_grids: usize,
    pub adam: AdamConfig,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 3,
            learning_rate: 0.001,
            clip_epsilon: 0.2,
            updates_per_iteration: 5,
            dataset_size: 10_000,
            obstacle_prob: 0.15,
            seed: 1,
            normalize_advantages: false,
            entropy_coef: 1.0,
            entropy_coef_final: 0.0,
            eval_grids: 1_000,
            adam: AdamConfig::default(),
        }
    }
}

impl PpoHyper {
    /// `epochs = 0` is allowed and leaves the networks untrained.
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!("clip_epsilon {} not in (0, 1)", self.clip_epsilon)));
        }
        if self.batch_size == 0 || self.updates_per_iteration == 0 || self.dataset_size == 0 {
            return Err(Error::Config(
                "batch_size, updates_per_iteration and dataset_size must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.obstacle_prob) {
            return Err(Error::Config(format!("obstacle_prob {} not in [0, 1]", self.obstacle_prob)));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite())
            || !(self.entropy_coef_final >= 0.0 && self.entropy_coef_final.is_finite())
        {
            return Err(Error::Config("entropy_coef must be finite and >= 0".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Grids with every cell independently an obstacle with probability
/// `obstacle_prob`.
pub fn gen_training_grids(
    count: usize,
    obstacle_prob: f64,
    seed: u64,
    geometry: &SensorGeometry,
) -> Vec<OccupancyGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = geometry.cell_count();
    (0..count)
        .map(|_| {
            let mask = (0..cells).fold(0u64, |m, bit| {
                if rng.gen::<f64>() < obstacle_prob {
                    m | 1 << bit
                } else {
                    m
                }
            });
            OccupancyGrid::from_mask(mask, *geometry)
        })
        .collect()
}

/// Positive when the sampled path cost more than the critic expected.
pub fn compute_advantage(cost: f64, baseline: f64) -> f64 {
    cost - baseline
}

/// Clipped surrogate, to be maximized. The cost-sense advantage is negated
/// so that cheaper-than-expected actions gain probability.
pub fn cso_objective(log_prob_new: f64, log_prob_old: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    let ratio = (log_prob_new - log_prob_old).exp();
    cso_from_ratio(ratio, -advantage, clip_epsilon)
}

/// `min(r * a, clip(r, 1 - eps, 1 + eps) * a)` for a reward-sense advantage `a`.
pub fn cso_from_ratio(ratio: f64, reward_advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    (ratio * reward_advantage).min(clipped * reward_advantage)
}

/// Derivative of the clipped surrogate with respect to `log_prob_new`.
fn cso_log_prob_grad(ratio: f64, reward_advantage: f64, clip_epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon);
    if ratio * reward_advantage <= clipped * reward_advantage {
        ratio * reward_advantage
    } else {
        0.0
    }
}

/// Sum of the column entropies over columns `1..n`. Adds `-coef * dH/dlogits`
/// to `d_logits`, i.e. the descent direction that raises entropy.
pub fn add_entropy_grad(dist: &ActionDistribution, coef: f64, d_logits: &mut [f64]) -> f64 {
    let n = dist.n();
    let mut total = 0.0;
    for col in 1..n {
        let h: f64 = (0..n).map(|r| dist.prob(r, col)).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
        total += h;
        for r in 0..n {
            let p = dist.prob(r, col);
            if p > 0.0 {
                // dH/dz_r = -p_r (ln p_r + H)
                d_logits[r * n + col] += coef * p * (p.ln() + h);
            }
        }
    }
    total
}

/// Mean squared error between observed costs and critic estimates.
pub fn critic_loss(costs: &[f64], estimates: &[f64]) -> Result<f64> {
    if costs.len() != estimates.len() || costs.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: costs.len(),
            got: estimates.len(),
        });
    }
    let sse: f64 = costs.iter().zip(estimates).map(|(c, e)| (c - e).powi(2)).sum();
    Ok(sse / costs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PpoBatchItem {
    pub grid: OccupancyGrid,
    pub action: ActionVector,
    pub log_prob_old: f64,
    pub cost: f64,
    pub baseline: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub mean_cost: f64,
    pub collision_rate: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub target_index: usize,
    pub seed: u64,
    pub iterations: Vec<IterationStats>,
    pub success_rate: f64,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iteration,mean_cost,collision_rate,actor_loss,critic_loss")?;
        for (i, s) in self.iterations.iter().enumerate() {
            writeln!(
                out,
                "{i},{},{},{},{}",
                s.mean_cost, s.collision_rate, s.actor_loss, s.critic_loss
            )?;
        }
        Ok(())
    }

    /// Mean of `mean_cost` over a fraction of iterations at the start or end.
    pub fn mean_cost_window(&self, fraction: f64, from_end: bool) -> f64 {
        let len = self.iterations.len();
        let k = ((len as f64 * fraction).ceil() as usize).clamp(1, len.max(1));
        let slice = if from_end {
            &self.iterations[len - k..]
        } else {
            &self.iterations[..k]
        };
        slice.iter().map(|s| s.mean_cost).sum::<f64>() / k as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Modal,
    Sampled { seed: u64 },
}

/// RNG stream for one target network, independent of the others.
pub fn network_rng(seed: u64, target_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(target_index as u64);
    rng
}

pub fn held_out_grids(hyper: &PpoHyper, geometry: &SensorGeometry) -> Vec<OccupancyGrid> {
    gen_training_grids(hyper.eval_grids, hyper.obstacle_prob, hyper.seed.wrapping_add(1), geometry)
}

/// Everything needed to train one pair, shared across the five targets.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub geometry: SensorGeometry,
    pub weights: CostWeights,
    pub hyper: PpoHyper,
    pub table: ActionTable,
}

impl TrainSetup {
    pub fn new(
        geometry: SensorGeometry,
        weights: CostWeights,
        hyper: PpoHyper,
        settings: SplineSettings,
    ) -> Result<Self> {
        geometry.validate()?;
        weights.validate()?;
        hyper.validate()?;
        let table = ActionTable::new(&geometry, settings)?;
        Ok(Self {
            geometry,
            weights,
            hyper,
            table,
        })
    }
}

pub fn train_network(
    target_index: usize,
    dataset: &[OccupancyGrid],
    setup: &TrainSetup,
) -> Result<(PolicyPair, TrainReport)> {
    let geometry = &setup.geometry;
    let hyper = &setup.hyper;
    let n = geometry.n();
    if !(1..=n).contains(&target_index) {
        return Err(Error::contract(format!("target_index {target_index} not in 1..={n}")));
    }
    if dataset.is_empty() {
        return Err(Error::contract("empty training dataset"));
    }
    let started = Instant::now();
    let target = normalized_targets(geometry)[target_index - 1];
    let mut rng = network_rng(hyper.seed, target_index);
    let mut pair = PolicyPair::init(n, target_index, &mut rng);
    let mut actor_opt = Adam::new(pair.actor.params().len(), hyper.adam);
    let mut critic_opt = Adam::new(pair.critic.params().len(), hyper.adam);
    let mut actor_grads = pair.actor.gradient_buffer();
    let mut critic_grads = pair.critic.gradient_buffer();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut iterations = Vec::new();
    let total_iterations = hyper.epochs * dataset.len().div_ceil(hyper.batch_size);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let images: Vec<Vec<f64>> = chunk.iter().map(|&i| dataset[i].to_image()).collect();
            let image_refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
            let actor_caches = pair.actor.forward_batch_unchecked(&image_refs)?;
            let critic_caches = pair.critic.forward_batch_unchecked(&image_refs)?;
            let mut batch = Vec::with_capacity(chunk.len());
            let mut collisions = 0u32;
            for ((&i, actor_cache), critic_cache) in chunk.iter().zip(&actor_caches).zip(&critic_caches) {
                let grid = &dataset[i];
                let dist = ActionDistribution::from_logits(actor_cache.output(), n);
                let sampled = sample_action(&dist, &mut rng);
                let cost = setup.table.cost(&sampled.action, grid, target, &setup.weights);
                collisions += cost.obs as u32;
                let baseline = critic_cache.output()[0];
                batch.push(PpoBatchItem {
                    grid: grid.clone(),
                    action: sampled.action,
                    log_prob_old: sampled.log_prob,
                    cost: cost.total,
                    baseline,
                    advantage: compute_advantage(cost.total, baseline),
                });
            }
            let m = batch.len() as f64;
            let mean_cost = batch.iter().map(|s| s.cost).sum::<f64>() / m;
            if !mean_cost.is_finite() {
                return Err(Error::Divergence {
                    iteration: iterations.len(),
                    mean_cost,
                });
            }
            let collision_rate = collisions as f64 / m;
            if log::log_enabled!(log::Level::Trace) {
                let sharpness = actor_caches
                    .iter()
                    .map(|c| {
                        let d = ActionDistribution::from_logits(c.output(), n);
                        (1..n).map(|col| d.column(col).into_iter().fold(0.0, f64::max)).sum::<f64>() / (n - 1) as f64
                    })
                    .sum::<f64>()
                    / m;
                trace!(
                    "target {target_index} iter {} cost {mean_cost:.3} baseline {:.3} max-prob {sharpness:.3}",
                    iterations.len(),
                    batch.iter().map(|s| s.baseline).sum::<f64>() / m
                );
            }
            if hyper.normalize_advantages && batch.len() > 1 {
                let mean = batch.iter().map(|s| s.advantage).sum::<f64>() / m;
                let var = batch.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / m;
                let std = var.sqrt().max(1e-8);
                for s in &mut batch {
                    s.advantage = (s.advantage - mean) / std;
                }
            }

            let progress = iterations.len() as f64 / total_iterations.saturating_sub(1).max(1) as f64;
            let entropy_coef = hyper.entropy_coef + (hyper.entropy_coef_final - hyper.entropy_coef) * progress;
            let mut actor_loss = 0.0;
            for update in 0..hyper.updates_per_iteration {
                let fresh;
                let caches = if update == 0 {
                    &actor_caches
                } else {
                    fresh = pair.actor.forward_batch_unchecked(&image_refs)?;
                    &fresh
                };
                let mut objective = 0.0;
                let mut used = Vec::with_capacity(batch.len());
                let mut adjoints = Vec::with_capacity(batch.len());
                for (s, cache) in batch.iter().zip(caches) {
                    let dist = ActionDistribution::from_logits(cache.output(), n);
                    let log_prob_new = log_prob_of(&dist, &s.action);
                    let ratio = (log_prob_new - s.log_prob_old).exp();
                    let reward_adv = -s.advantage;
                    objective += cso_from_ratio(ratio, reward_adv, hyper.clip_epsilon);
                    let d_lp = cso_log_prob_grad(ratio, reward_adv, hyper.clip_epsilon);
                    if d_lp == 0.0 && entropy_coef == 0.0 {
                        continue;
                    }
                    // descend on the negated mean objective
                    let scale = -d_lp / m;
                    let mut d_logits: Vec<f64> = log_prob_logit_grad(&dist, &s.action)
                        .into_iter()
                        .map(|g| g * scale)
                        .collect();
                    add_entropy_grad(&dist, entropy_coef / m, &mut d_logits);
                    used.push(cache);
                    adjoints.push(d_logits);
                }
                if update == 0 {
                    actor_loss = -objective / m;
                }
                actor_grads.fill(0.0);
                let adjoint_refs: Vec<&[f64]> = adjoints.iter().map(Vec::as_slice).collect();
                pair.actor.backward_batch(&used, &adjoint_refs, &mut actor_grads)?;
                actor_opt.step(pair.actor.params_mut(), &actor_grads, hyper.learning_rate)?;
            }

            let mut critic_loss_first = 0.0;
            for update in 0..hyper.updates_per_iteration {
                let fresh;
                let caches = if update == 0 {
                    &critic_caches
                } else {
                    fresh = pair.critic.forward_batch_unchecked(&image_refs)?;
                    &fresh
                };
                let errors: Vec<f64> = batch.iter().zip(caches).map(|(s, c)| c.output()[0] - s.cost).collect();
                if update == 0 {
                    critic_loss_first = errors.iter().map(|e| e * e).sum::<f64>() / m;
                }
                let adjoints: Vec<[f64; 1]> = errors.iter().map(|e| [2.0 * e / m]).collect();
                let adjoint_refs: Vec<&[f64]> = adjoints.iter().map(|a| a.as_slice()).collect();
                let cache_refs: Vec<&ForwardCache> = caches.iter().collect();
                critic_grads.fill(0.0);
                pair.critic.backward_batch(&cache_refs, &adjoint_refs, &mut critic_grads)?;
                critic_opt.step(pair.critic.params_mut(), &critic_grads, hyper.learning_rate)?;
            }

            iterations.push(IterationStats {
                mean_cost,
                collision_rate,
                actor_loss,
                critic_loss: critic_loss_first,
            });
        }
        debug!(
            "target {target_index} epoch {} mean cost {:.4}",
            epoch + 1,
            iterations.last().map_or(f64::NAN, |s| s.mean_cost)
        );
    }

    let eval = held_out_grids(hyper, geometry);
    let success_rate = evaluate_success_with(&pair, &eval, &setup.table, EvalMode::Modal)?;
    info!("target {target_index}: success {:.3} on {} held-out grids", success_rate, eval.len());
    let report = TrainReport {
        target_index,
        seed: hyper.seed,
        iterations,
        success_rate,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    Ok((pair, report))
}

/// Train all normalized-target pairs in parallel, each on its own RNG stream.
pub fn train_all(dataset: &[OccupancyGrid], setup: &TrainSetup) -> Result<Vec<(PolicyPair, TrainReport)>> {
    let n = setup.geometry.n();
    (1..=n)
        .into_par_iter()
        .map(|k| train_network(k, dataset, setup))
        .collect()
}

/// Fraction of grids on which the policy's action avoids every obstacle.
pub fn evaluate_success(
    pair: &PolicyPair,
    grids: &[OccupancyGrid],
    geometry: &SensorGeometry,
    mode: EvalMode,
) -> Result<f64> {
    let table = ActionTable::new(geometry, SplineSettings::default())?;
    evaluate_success_with(pair, grids, &table, mode)
}

pub fn evaluate_success_with(
    pair: &PolicyPair,
    grids: &[OccupancyGrid],
    table: &ActionTable,
    mode: EvalMode,
) -> Result<f64> {
    if grids.is_empty() {
        return Ok(0.0);
    }
    let n = table.geometry().n();
    let mut rng = match mode {
        EvalMode::Sampled { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        EvalMode::Modal => None,
    };
    let mut ok = 0usize;
    for grid in grids {
        let cache = pair.actor.forward(&grid.to_image())?;
        let dist = ActionDistribution::from_logits(cache.output(), n);
        let action = match rng.as_mut() {
            Some(r) => sample_action(&dist, r).action,
            None => dist.modal_action(),
        };
        if !table.collides(&action, grid) {
            ok += 1;
        }
    }
    Ok(ok as f64 / grids.len() as f64)
}
