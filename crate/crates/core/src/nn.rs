//! Actor and critic networks with hand-written backpropagation.
//!
//! Both share the same trunk over the `n x n` occupancy image:
//! conv 3x3x16 (pad 1) + ReLU, conv 3x3x32 (pad 1) + ReLU, flatten,
//! dense 256 + ReLU. The actor head is dense `n*n` reshaped to an `n x n`
//! logit matrix with a softmax down each column; the critic head is dense 1.

use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::OccupancyGrid;
use crate::spline::ActionVector;

const CONV1_CHANNELS: usize = 16;
const CONV2_CHANNELS: usize = 32;
const HIDDEN: usize = 256;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Actor,
    Critic,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::Actor => "actor",
            NetKind::Critic => "critic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    kind: NetKind,
    n: usize,
    layers: Vec<LayerShape>,
}

impl Architecture {
    pub fn new(kind: NetKind, n: usize) -> Self {
        let cells = n * n;
        let out = match kind {
            NetKind::Actor => cells,
            NetKind::Critic => 1,
        };
        let specs: [(&'static str, Vec<usize>); 8] = [
            ("conv1.weight", vec![CONV1_CHANNELS, 1, KERNEL, KERNEL]),
            ("conv1.bias", vec![CONV1_CHANNELS]),
            ("conv2.weight", vec![CONV2_CHANNELS, CONV1_CHANNELS, KERNEL, KERNEL]),
            ("conv2.bias", vec![CONV2_CHANNELS]),
            ("fc1.weight", vec![HIDDEN, CONV2_CHANNELS * cells]),
            ("fc1.bias", vec![HIDDEN]),
            ("head.weight", vec![out, HIDDEN]),
            ("head.bias", vec![out]),
        ];
        let mut offset = 0;
        let layers = specs
            .into_iter()
            .map(|(name, shape)| {
                let l = LayerShape { name, shape, offset };
                offset += l.len();
                l
            })
            .collect();
        Self { kind, n, layers }
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::len).sum()
    }

    pub fn output_len(&self) -> usize {
        self.layers[7].len()
    }

    fn layer(&self, idx: usize) -> std::ops::Range<usize> {
        self.layers[idx].range()
    }
}

/// Identifies the fixed actor/critic stack for a given grid size.
pub fn architecture_signature(n: usize) -> String {
    format!(
        "smartbsp-ac/v1 grid{n}x{n} trunk=conv3x3x{CONV1_CHANNELS}p1-relu-conv3x3x{CONV2_CHANNELS}p1-relu-fc{HIDDEN}-relu actor=fc{} critic=fc1",
        n * n
    )
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    conv1: Vec<f64>,
    conv2: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Patch matrix `[cell][ci * 9 + ky * 3 + kx]` of a channel-major stack of
/// `n x n` maps, zero outside the border.
fn im2col(input: &[f64], cin: usize, n: usize) -> Vec<f64> {
    let cells = n * n;
    let k = cin * KERNEL * KERNEL;
    let mut patches = vec![0.0; cells * k];
    for y in 0..n {
        for x in 0..n {
            let row = &mut patches[(y * n + x) * k..(y * n + x + 1) * k];
            for ky in 0..KERNEL {
                let Some(yy) = (y + ky).checked_sub(1).filter(|&v| v < n) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(xx) = (x + kx).checked_sub(1).filter(|&v| v < n) else {
                        continue;
                    };
                    for ci in 0..cin {
                        row[ci * KERNEL * KERNEL + ky * KERNEL + kx] = input[ci * cells + yy * n + xx];
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the maps.
fn col2im(dpatches: &[f64], cin: usize, n: usize, din: &mut [f64]) {
    let cells = n * n;
    let k = cin * KERNEL * KERNEL;
    for y in 0..n {
        for x in 0..n {
            let row = &dpatches[(y * n + x) * k..(y * n + x + 1) * k];
            for ky in 0..KERNEL {
                let Some(yy) = (y + ky).checked_sub(1).filter(|&v| v < n) else {
                    continue;
                };
                for kx in 0..KERNEL {
                    let Some(xx) = (x + kx).checked_sub(1).filter(|&v| v < n) else {
                        continue;
                    };
                    for ci in 0..cin {
                        din[ci * cells + yy * n + xx] += row[ci * KERNEL * KERNEL + ky * KERNEL + kx];
                    }
                }
            }
        }
    }
}

/// 3x3 same-padding convolution over `n x n` maps, channel-major.
fn conv_forward(input: &[f64], cin: usize, w: &[f64], b: &[f64], cout: usize, n: usize) -> Vec<f64> {
    let cells = n * n;
    let k = cin * KERNEL * KERNEL;
    let patches = im2col(input, cin, n);
    let mut out = vec![0.0; cout * cells];
    for co in 0..cout {
        let wk = &w[co * k..(co + 1) * k];
        for cell in 0..cells {
            out[co * cells + cell] = b[co] + dot(wk, &patches[cell * k..(cell + 1) * k]);
        }
    }
    out
}

/// Accumulates weight/bias gradients and, if requested, the input adjoint.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    cin: usize,
    w: &[f64],
    dout: &[f64],
    cout: usize,
    n: usize,
    dw: &mut [f64],
    db: &mut [f64],
    din: Option<&mut [f64]>,
) {
    let cells = n * n;
    let k = cin * KERNEL * KERNEL;
    let patches = im2col(input, cin, n);
    let mut dpatches = din.as_ref().map(|_| vec![0.0; cells * k]);
    for co in 0..cout {
        let g = &dout[co * cells..(co + 1) * cells];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        db[co] += g.iter().sum::<f64>();
        let wk = &w[co * k..(co + 1) * k];
        for (cell, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            axpy(gv, &patches[cell * k..(cell + 1) * k], &mut dw[co * k..(co + 1) * k]);
            if let Some(dp) = dpatches.as_mut() {
                axpy(gv, wk, &mut dp[cell * k..(cell + 1) * k]);
            }
        }
    }
    if let (Some(dp), Some(din)) = (dpatches, din) {
        col2im(&dp, cin, n, din);
    }
}

/// Branch-free scan: counts values whose exponent bits are all set.
fn all_finite(v: &[f64]) -> bool {
    v.iter()
        .map(|x| ((x.to_bits() >> 52) & 0x7ff == 0x7ff) as usize)
        .sum::<usize>()
        == 0
}

fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl Network {
    pub fn zeros(kind: NetKind, n: usize) -> Self {
        let arch = Architecture::new(kind, n);
        let params = vec![0.0; arch.param_count()];
        Self { arch, params }
    }

    /// Fan-in scaled uniform weights, zero biases, zero output layer.
    pub fn init<R: Rng + ?Sized>(kind: NetKind, n: usize, rng: &mut R) -> Self {
        let mut net = Self::zeros(kind, n);
        for idx in [0, 2, 4] {
            let layer = &net.arch.layers[idx];
            let fan_in: usize = layer.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut net.params[layer.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        net
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn kind(&self) -> NetKind {
        self.arch.kind
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer_params(&self, idx: usize) -> &[f64] {
        &self.params[self.arch.layer(idx)]
    }

    /// First layer holding a non-finite value, if any.
    pub fn non_finite_layer(&self) -> Option<&'static str> {
        self.arch
            .layers
            .iter()
            .find(|l| !all_finite(&self.params[l.range()]))
            .map(|l| l.name)
    }

    fn check_output(&self, out: &[f64]) -> Result<()> {
        if out.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        let layer = match self.non_finite_layer() {
            Some(name) => format!("{}.{name}", self.kind().name()),
            None => format!("{}.output", self.kind().name()),
        };
        Err(Error::NonFinite { layer })
    }

    /// Forward pass keeping activations for `backward`. Parameters are
    /// checked for non-finite values first.
    pub fn forward(&self, image: &[f64]) -> Result<ForwardCache> {
        if let Some(name) = self.non_finite_layer() {
            return Err(Error::NonFinite {
                layer: format!("{}.{name}", self.kind().name()),
            });
        }
        self.forward_unchecked(image)
    }

    /// Forward pass for parameters already known to be finite; a non-finite
    /// output is still reported.
    pub(crate) fn forward_unchecked(&self, image: &[f64]) -> Result<ForwardCache> {
        Ok(self.forward_batch_unchecked(&[image])?.pop().expect("one cache per image"))
    }

    /// Checked forward pass over several images at once.
    pub fn forward_batch(&self, images: &[&[f64]]) -> Result<Vec<ForwardCache>> {
        if let Some(name) = self.non_finite_layer() {
            return Err(Error::NonFinite {
                layer: format!("{}.{name}", self.kind().name()),
            });
        }
        self.forward_batch_unchecked(images)
    }

    /// The dense layers run over the whole batch so each weight row is read
    /// once per batch rather than once per image.
    pub(crate) fn forward_batch_unchecked(&self, images: &[&[f64]]) -> Result<Vec<ForwardCache>> {
        let n = self.arch.n;
        let cells = n * n;
        if let Some(bad) = images.iter().find(|im| im.len() != cells) {
            return Err(Error::ShapeMismatch {
                expected: cells,
                got: bad.len(),
            });
        }
        let p = &self.params;
        let a = &self.arch;
        let mut caches: Vec<ForwardCache> = images
            .iter()
            .map(|image| {
                let mut conv1 = conv_forward(image, 1, &p[a.layer(0)], &p[a.layer(1)], CONV1_CHANNELS, n);
                relu_in_place(&mut conv1);
                let mut conv2 = conv_forward(
                    &conv1,
                    CONV1_CHANNELS,
                    &p[a.layer(2)],
                    &p[a.layer(3)],
                    CONV2_CHANNELS,
                    n,
                );
                relu_in_place(&mut conv2);
                ForwardCache {
                    input: image.to_vec(),
                    conv1,
                    conv2,
                    hidden: vec![0.0; HIDDEN],
                    output: Vec::new(),
                }
            })
            .collect();

        let flat = CONV2_CHANNELS * cells;
        let w1 = &p[a.layer(4)];
        let b1 = &p[a.layer(5)];
        for j in 0..HIDDEN {
            let row = &w1[j * flat..(j + 1) * flat];
            for c in caches.iter_mut() {
                c.hidden[j] = (b1[j] + dot(row, &c.conv2)).max(0.0);
            }
        }

        let out_len = a.output_len();
        let w2 = &p[a.layer(6)];
        let b2 = &p[a.layer(7)];
        for c in caches.iter_mut() {
            c.output = (0..out_len)
                .map(|j| b2[j] + dot(&w2[j * HIDDEN..(j + 1) * HIDDEN], &c.hidden))
                .collect();
            self.check_output(&c.output)?;
        }
        Ok(caches)
    }

    pub fn gradient_buffer(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Accumulate into `grads` the gradient of a scalar loss whose adjoint
    /// with respect to the network output is `d_output`.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64], grads: &mut [f64]) -> Result<()> {
        self.backward_batch(&[cache], &[d_output], grads)
    }

    /// Accumulate the summed gradient over a batch of cached passes.
    pub fn backward_batch(&self, caches: &[&ForwardCache], d_outputs: &[&[f64]], grads: &mut [f64]) -> Result<()> {
        let a = &self.arch;
        let n = a.n;
        let out_len = a.output_len();
        if caches.len() != d_outputs.len() {
            return Err(Error::ShapeMismatch {
                expected: caches.len(),
                got: d_outputs.len(),
            });
        }
        if let Some(d) = d_outputs.iter().find(|d| d.len() != out_len) {
            return Err(Error::ShapeMismatch {
                expected: out_len,
                got: d.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        if let Some(c) = caches
            .iter()
            .find(|c| c.output.len() != out_len || c.conv2.len() != CONV2_CHANNELS * n * n)
        {
            return Err(Error::ShapeMismatch {
                expected: out_len,
                got: c.output.len(),
            });
        }
        let p = &self.params;

        // head
        let mut d_hidden = vec![vec![0.0; HIDDEN]; caches.len()];
        {
            let w2 = &p[a.layer(6)];
            let (before, rest) = grads.split_at_mut(a.layers[7].offset);
            let dw2 = &mut before[a.layer(6)];
            let db2 = &mut rest[..out_len];
            for ((cache, d_out), dh) in caches.iter().zip(d_outputs).zip(d_hidden.iter_mut()) {
                for (j, &g) in d_out.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    db2[j] += g;
                    axpy(g, &cache.hidden, &mut dw2[j * HIDDEN..(j + 1) * HIDDEN]);
                    axpy(g, &w2[j * HIDDEN..(j + 1) * HIDDEN], dh);
                }
                for (d, &h) in dh.iter_mut().zip(&cache.hidden) {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }

        // fc1
        let flat = CONV2_CHANNELS * n * n;
        let mut d_conv2 = vec![vec![0.0; flat]; caches.len()];
        {
            let w1 = &p[a.layer(4)];
            let (before, rest) = grads.split_at_mut(a.layers[5].offset);
            let dw1 = &mut before[a.layer(4)];
            let db1 = &mut rest[..HIDDEN];
            for j in 0..HIDDEN {
                let row = &w1[j * flat..(j + 1) * flat];
                let drow = &mut dw1[j * flat..(j + 1) * flat];
                for ((cache, dh), dc) in caches.iter().zip(&d_hidden).zip(d_conv2.iter_mut()) {
                    let g = dh[j];
                    if g == 0.0 {
                        continue;
                    }
                    db1[j] += g;
                    axpy(g, &cache.conv2, drow);
                    axpy(g, row, dc);
                }
            }
        }

        for (cache, dc2) in caches.iter().zip(d_conv2.iter_mut()) {
            for (d, &v) in dc2.iter_mut().zip(&cache.conv2) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }

            // conv2
            let mut d_conv1 = vec![0.0; cache.conv1.len()];
            {
                let (before, rest) = grads.split_at_mut(a.layers[3].offset);
                conv_backward(
                    &cache.conv1,
                    CONV1_CHANNELS,
                    &p[a.layer(2)],
                    dc2,
                    CONV2_CHANNELS,
                    n,
                    &mut before[a.layer(2)],
                    &mut rest[..CONV2_CHANNELS],
                    Some(&mut d_conv1),
                );
            }
            for (d, &v) in d_conv1.iter_mut().zip(&cache.conv1) {
                if v <= 0.0 {
                    *d = 0.0;
                }
            }

            // conv1
            let (before, rest) = grads.split_at_mut(a.layers[1].offset);
            conv_backward(
                &cache.input,
                1,
                &p[a.layer(0)],
                &d_conv1,
                CONV1_CHANNELS,
                n,
                &mut before[a.layer(0)],
                &mut rest[..CONV1_CHANNELS],
                None,
            );
        }
        Ok(())
    }
}

/// Per-column categorical distributions over angular rows. Column `k`
/// (ring `k`) drives control point `A_{k+2}`; column 0 is never used.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    n: usize,
    /// Row-major `[row][column]`.
    probs: Vec<f64>,
}

impl ActionDistribution {
    /// Softmax down each column of a row-major `n x n` logit matrix.
    pub fn from_logits(logits: &[f64], n: usize) -> Self {
        assert_eq!(logits.len(), n * n, "logit matrix must be {n}x{n}");
        let mut probs = vec![0.0; n * n];
        for col in 0..n {
            let max = (0..n).map(|r| logits[r * n + col]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for r in 0..n {
                let e = (logits[r * n + col] - max).exp();
                probs[r * n + col] = e;
                z += e;
            }
            for r in 0..n {
                probs[r * n + col] /= z;
            }
        }
        Self { n, probs }
    }

    pub fn from_probs(probs: Vec<f64>, n: usize) -> Result<Self> {
        if probs.len() != n * n {
            return Err(Error::ShapeMismatch {
                expected: n * n,
                got: probs.len(),
            });
        }
        for col in 0..n {
            let s: f64 = (0..n).map(|r| probs[r * n + col]).sum();
            if (s - 1.0).abs() > 1e-9 || (0..n).any(|r| !(0.0..=1.0).contains(&probs[r * n + col])) {
                return Err(Error::contract(format!("column {col} is not a distribution")));
            }
        }
        Ok(Self { n, probs })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn prob(&self, row: usize, col: usize) -> f64 {
        self.probs[row * self.n + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n).map(|r| self.prob(r, col)).collect()
    }

    /// Per-column argmax over columns `1..n`; ties go to the lower row.
    pub fn modal_action(&self) -> ActionVector {
        let rows = (1..self.n)
            .map(|col| {
                (0..self.n).fold(0, |best, r| if self.prob(r, col) > self.prob(best, col) { r } else { best })
            })
            .collect();
        ActionVector::from_rows_unchecked(rows)
    }

    /// Probability of the whole action vector (product over columns).
    pub fn prob_of(&self, action: &ActionVector) -> f64 {
        action
            .rows()
            .iter()
            .enumerate()
            .map(|(k, &r)| self.prob(r, k + 1))
            .product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub action: ActionVector,
    pub log_prob: f64,
}

pub fn actor_forward(grid: &OccupancyGrid, actor: &Network) -> Result<ActionDistribution> {
    let cache = actor.forward(&grid.to_image())?;
    Ok(ActionDistribution::from_logits(cache.output(), grid.n()))
}

pub fn critic_forward(grid: &OccupancyGrid, critic: &Network) -> Result<f64> {
    Ok(critic.forward(&grid.to_image())?.output()[0])
}

/// Draw one row per column `1..n` independently.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> SampledAction {
    let n = dist.n;
    let mut rows = Vec::with_capacity(n - 1);
    let mut log_prob = 0.0;
    for col in 1..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        for r in 0..n {
            let p = dist.prob(r, col);
            acc += p;
            if p > 0.0 && u < acc {
                pick = Some(r);
                break;
            }
        }
        // rounding can leave acc slightly below u; fall back to the last
        // row with mass
        let r = pick.unwrap_or_else(|| (0..n).rev().find(|&r| dist.prob(r, col) > 0.0).unwrap_or(n - 1));
        log_prob += dist.prob(r, col).ln();
        rows.push(r);
    }
    SampledAction {
        action: ActionVector::from_rows_unchecked(rows),
        log_prob,
    }
}

/// Sum of per-column log-probabilities; `-inf` if the action has zero mass.
pub fn log_prob_of(dist: &ActionDistribution, action: &ActionVector) -> f64 {
    let lp: f64 = action
        .rows()
        .iter()
        .enumerate()
        .map(|(k, &r)| dist.prob(r, k + 1).ln())
        .sum();
    if lp == f64::NEG_INFINITY {
        warn!("action {action} has zero probability under the current policy");
    }
    lp
}

/// Adjoint of `log π(a|S)` with respect to the actor logits.
pub fn log_prob_logit_grad(dist: &ActionDistribution, action: &ActionVector) -> Vec<f64> {
    let n = dist.n;
    let mut g = vec![0.0; n * n];
    for (k, &chosen) in action.rows().iter().enumerate() {
        let col = k + 1;
        for r in 0..n {
            let onehot = if r == chosen { 1.0 } else { 0.0 };
            g[r * n + col] = onehot - dist.prob(r, col);
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// Adaptive-moment optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if !all_finite(grads) {
            warn!("non-finite gradient; optimizer step {} skipped", self.t + 1);
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (step, inv_bc2) = (lr / bc1, 1.0 / bc2);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= step * *m / ((*v * inv_bc2).sqrt() + epsilon);
        }
        Ok(StepOutcome::Applied)
    }
}

/// One actor and its paired critic, trained for one normalized target.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyPair {
    pub actor: Network,
    pub critic: Network,
    /// 1-based index of the normalized target.
    pub target_index: usize,
}

impl PolicyPair {
    pub fn init<R: Rng + ?Sized>(n: usize, target_index: usize, rng: &mut R) -> Self {
        let actor = Network::init(NetKind::Actor, n, rng);
        let critic = Network::init(NetKind::Critic, n, rng);
        Self {
            actor,
            critic,
            target_index,
        }
    }

    pub fn n(&self) -> usize {
        self.actor.arch.n
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    name: String,
    shape: Vec<usize>,
    row_major_values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightFile {
    architecture_signature: String,
    target_index: usize,
    layers: Vec<LayerRecord>,
}

fn records(net: &Network) -> impl Iterator<Item = LayerRecord> + '_ {
    net.arch.layers.iter().map(move |l| LayerRecord {
        name: format!("{}.{}", net.kind().name(), l.name),
        shape: l.shape.clone(),
        row_major_values: net.params[l.range()].to_vec(),
    })
}

pub fn weights_to_json(pair: &PolicyPair) -> Result<String> {
    let file = WeightFile {
        architecture_signature: architecture_signature(pair.n()),
        target_index: pair.target_index,
        layers: records(&pair.actor).chain(records(&pair.critic)).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn save_weights(pair: &PolicyPair, path: &Path) -> Result<()> {
    std::fs::write(path, weights_to_json(pair)?)?;
    Ok(())
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn rebuild(kind: NetKind, n: usize, layers: &mut std::slice::Iter<'_, LayerRecord>, path: &Path) -> Result<Network> {
    let arch = Architecture::new(kind, n);
    let mut params = Vec::with_capacity(arch.param_count());
    for l in arch.layers() {
        let expected = format!("{}.{}", kind.name(), l.name);
        let rec = layers
            .next()
            .ok_or_else(|| corrupt(path, format!("missing layer {expected}")))?;
        if rec.name != expected {
            return Err(corrupt(path, format!("expected layer {expected}, found {}", rec.name)));
        }
        if rec.shape != l.shape {
            return Err(corrupt(
                path,
                format!("layer {expected} has shape {:?}, expected {:?}", rec.shape, l.shape),
            ));
        }
        if rec.row_major_values.len() != l.len() {
            return Err(corrupt(
                path,
                format!("layer {expected} holds {} values, expected {}", rec.row_major_values.len(), l.len()),
            ));
        }
        params.extend_from_slice(&rec.row_major_values);
    }
    let net = Network::from_params(arch, params)?;
    if let Some(layer) = net.non_finite_layer() {
        return Err(Error::NonFinite {
            layer: format!("{}.{layer}", kind.name()),
        });
    }
    Ok(net)
}

/// Load a pair saved for an `n x n` grid.
pub fn load_weights(path: &Path, n: usize) -> Result<PolicyPair> {
    let text = std::fs::read_to_string(path)?;
    let file: WeightFile = serde_json::from_str(&text).map_err(|e| corrupt(path, e.to_string()))?;
    let expected = architecture_signature(n);
    if file.architecture_signature != expected {
        return Err(Error::SignatureMismatch {
            expected,
            found: file.architecture_signature,
        });
    }
    let mut layers = file.layers.iter();
    let actor = rebuild(NetKind::Actor, n, &mut layers, path)?;
    let critic = rebuild(NetKind::Critic, n, &mut layers, path)?;
    if layers.next().is_some() {
        return Err(corrupt(path, "trailing layers"));
    }
    Ok(PolicyPair {
        actor,
        critic,
        target_index: file.target_index,
    })
}

/// Load a pair and check it was trained for `slot`.
pub fn load_weights_for(path: &Path, n: usize, slot: usize) -> Result<PolicyPair> {
    let pair = load_weights(path, n)?;
    if pair.target_index != slot {
        return Err(corrupt(
            path,
            format!("weights are for target {}, expected {slot}", pair.target_index),
        ));
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SensorGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn parameter_counts() {
        let a = Architecture::new(NetKind::Actor, 5);
        assert_eq!(a.param_count(), 144 + 16 + 4608 + 32 + 204800 + 256 + 6400 + 25);
        let c = Architecture::new(NetKind::Critic, 5);
        assert_eq!(c.param_count(), 144 + 16 + 4608 + 32 + 204800 + 256 + 256 + 1);
    }

    #[test]
    fn fresh_actor_is_uniform_and_critic_is_zero() {
        let pair = PolicyPair::init(5, 1, &mut rng());
        let mut grid = OccupancyGrid::free(SensorGeometry::default());
        grid.set_obstacle(2, 2, true);
        let dist = actor_forward(&grid, &pair.actor).unwrap();
        for col in 0..5 {
            for r in 0..5 {
                assert!((dist.prob(r, col) - 0.2).abs() < 1e-15);
            }
        }
        assert_eq!(critic_forward(&grid, &pair.critic).unwrap(), 0.0);
    }

    #[test]
    fn forward_is_pure() {
        let mut r = rng();
        let mut net = Network::init(NetKind::Critic, 5, &mut r);
        for v in net.params_mut() {
            *v += 0.01;
        }
        let grid = OccupancyGrid::from_mask(0b1010_0110_0001, SensorGeometry::default());
        let a = critic_forward(&grid, &net).unwrap();
        let b = critic_forward(&grid, &net).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn non_finite_parameter_names_layer() {
        let mut net = Network::init(NetKind::Actor, 5, &mut rng());
        let off = net.architecture().layers()[4].offset;
        net.params_mut()[off + 3] = f64::NAN;
        let grid = OccupancyGrid::free(SensorGeometry::default());
        match actor_forward(&grid, &net) {
            Err(Error::NonFinite { layer }) => assert_eq!(layer, "actor.fc1.weight"),
            other => panic!("expected non-finite fault, got {other:?}"),
        }
    }

    #[test]
    fn sampling_and_log_probs() {
        let uniform = ActionDistribution::from_logits(&[0.0; 25], 5);
        let s = sample_action(&uniform, &mut rng());
        assert!((s.log_prob - 4.0 * 0.2f64.ln()).abs() < 1e-12);
        assert!((s.log_prob + 6.4378).abs() < 1e-4);
        assert_eq!(log_prob_of(&uniform, &s.action), s.log_prob);

        let mut probs = vec![0.0; 25];
        for col in 0..5 {
            probs[3 * 5 + col] = 1.0;
        }
        let onehot = ActionDistribution::from_probs(probs, 5).unwrap();
        for _ in 0..20 {
            let s = sample_action(&onehot, &mut rng());
            assert_eq!(s.action.rows(), &[3, 3, 3, 3]);
            assert_eq!(s.log_prob, 0.0);
        }
        let other = ActionVector::from_rows_unchecked(vec![3, 3, 1, 3]);
        assert_eq!(log_prob_of(&onehot, &other), f64::NEG_INFINITY);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let logits: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let d = ActionDistribution::from_logits(&logits, 5);
        let a = sample_action(&d, &mut rng());
        let b = sample_action(&d, &mut rng());
        assert_eq!(a, b);
        assert!((a.log_prob.exp() - d.prob_of(&a.action)).abs() < 1e-15);
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let net = Network::init(NetKind::Actor, 5, &mut rng());
        let cache = net.forward(&[1.0; 25]).unwrap();
        let mut g = net.gradient_buffer();
        net.backward(&cache, &[0.0; 25], &mut g).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(net.backward(&cache, &[0.0; 3], &mut g).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.5; 10];
        let mut opt = Adam::new(10, AdamConfig::default());
        opt.step(&mut p, &[1.0; 10], 1e-3).unwrap();
        for &v in &p {
            assert!((0.5 - v - 1e-3).abs() < 1e-10);
        }
        let before = p.clone();
        let mut opt = Adam::new(10, AdamConfig::default());
        opt.step(&mut p, &[0.0; 10], 1e-3).unwrap();
        assert_eq!(p, before);
        let mut bad = vec![0.0; 10];
        bad[4] = f64::INFINITY;
        assert_eq!(opt.step(&mut p, &bad, 1e-3).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(p, before);
    }

    #[test]
    fn weights_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let mut r = rng();
        let mut pair = PolicyPair::init(5, 3, &mut r);
        for v in pair.actor.params_mut().iter_mut().step_by(97) {
            *v = r.gen::<f64>() * 1e-3 + std::f64::consts::PI;
        }
        save_weights(&pair, &path).unwrap();
        let loaded = load_weights_for(&path, 5, 3).unwrap();
        assert_eq!(loaded, pair);
        assert!(load_weights_for(&path, 5, 2).is_err());

        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"shape\": [\n        16,", "\"shape\": [\n        17,", 1);
        assert_ne!(tampered, text);
        std::fs::write(&path, tampered).unwrap();
        assert!(load_weights(&path, 5).is_err());

        std::fs::write(&path, text.replace("smartbsp-ac/v1", "other/v9")).unwrap();
        assert!(matches!(load_weights(&path, 5), Err(Error::SignatureMismatch { .. })));
    }
}
