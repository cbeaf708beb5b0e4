//! Control polygons, clamped B-splines and the path cost terms.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{OccupancyGrid, SensorGeometry};
use crate::point::Point2;

pub const SPLINE_DEGREE: usize = 3;

/// Angular rows chosen for control points `A_3 ..= A_{n+1}`, one per ring
/// starting at ring 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionVector(Vec<usize>);

impl ActionVector {
    pub fn new(rows: Vec<usize>, geometry: &SensorGeometry) -> Result<Self> {
        let n = geometry.n();
        if rows.len() != n - 1 {
            return Err(Error::contract(format!(
                "action has {} rows, expected {}",
                rows.len(),
                n - 1
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract(format!("action row {bad} out of range 0..{n}")));
        }
        Ok(Self(rows))
    }

    /// Rows are not checked against a geometry; building a path from an
    /// out-of-range action still fails with a contract error.
    pub fn from_rows_unchecked(rows: Vec<usize>) -> Self {
        Self(rows)
    }

    /// Every row in the middle of the sector.
    pub fn straight(geometry: &SensorGeometry) -> Self {
        Self(vec![geometry.middle_row(); geometry.n() - 1])
    }

    pub fn rows(&self) -> &[usize] {
        &self.0
    }

    /// Number of distinct actions for a grid of side `n`.
    pub fn space_size(n: usize) -> usize {
        n.pow(n as u32 - 1)
    }

    /// Base-`n` index with the first row as the most significant digit.
    pub fn index(&self, n: usize) -> usize {
        self.0.iter().fold(0, |acc, &r| acc * n + r)
    }

    pub fn from_index(mut index: usize, n: usize) -> Self {
        let mut rows = vec![0; n - 1];
        for slot in rows.iter_mut().rev() {
            *slot = index % n;
            index /= n;
        }
        Self(rows)
    }

    /// Reflect every row about the middle of the sector.
    pub fn mirrored(&self, n: usize) -> Self {
        Self(self.0.iter().map(|&r| n - 1 - r).collect())
    }
}

impl fmt::Display for ActionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlPolygon {
    points: Vec<Point2>,
}

impl ControlPolygon {
    /// `A_1` at the robot, `A_2` fixed straight ahead in ring 0, the rest at
    /// the centers of the chosen cells in rings `1..n`.
    pub fn from_action(action: &ActionVector, geometry: &SensorGeometry) -> Result<Self> {
        let n = geometry.n();
        if action.rows().len() != n - 1 || action.rows().iter().any(|&r| r >= n) {
            return Err(Error::contract(format!("action {action} invalid for {n}x{n} grid")));
        }
        let mut points = Vec::with_capacity(n + 1);
        points.push(Point2::ORIGIN);
        points.push(geometry.cell_center(0, geometry.middle_row())?);
        for (k, &row) in action.rows().iter().enumerate() {
            points.push(geometry.cell_center(k + 1, row)?);
        }
        Ok(Self { points })
    }

    pub fn from_points(points: Vec<Point2>) -> Result<Self> {
        if points.len() < SPLINE_DEGREE + 1 {
            return Err(Error::contract(format!(
                "need at least {} control points, got {}",
                SPLINE_DEGREE + 1,
                points.len()
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }
}

/// Clamped B-spline with a uniform interior knot vector on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BSpline {
    degree: usize,
    knots: Vec<f64>,
    ctrl: Vec<Point2>,
}

impl BSpline {
    pub fn clamped_uniform(ctrl: Vec<Point2>, degree: usize) -> Result<Self> {
        let m = ctrl.len();
        if degree == 0 || m <= degree {
            return Err(Error::contract(format!(
                "degree {degree} needs more than {degree} control points, got {m}"
            )));
        }
        let spans = m - degree;
        let mut knots = vec![0.0; degree + 1];
        knots.extend((1..spans).map(|i| i as f64 / spans as f64));
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self { degree, knots, ctrl })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn control_points(&self) -> &[Point2] {
        &self.ctrl
    }

    fn find_span(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.ctrl.len() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        if t <= self.knots[p] {
            return p;
        }
        // knots[span] <= t < knots[span + 1]
        let mut span = p;
        while t >= self.knots[span + 1] {
            span += 1;
        }
        span
    }

    /// Nonzero basis functions and their derivatives up to `order` at `t`
    /// (Cox-de Boor triangle with derivative recurrences). Returns the span
    /// and `ders[k][j]` = k-th derivative of `N_{span-p+j}`.
    fn basis_derivatives(&self, t: f64, order: usize) -> (usize, Vec<Vec<f64>>) {
        let p = self.degree;
        let u = &self.knots;
        let span = self.find_span(t);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let order = order.min(p);
        let mut ders = vec![vec![0.0; p + 1]; order + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=order {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if rk >= 0 {
                    let rk = rk as usize;
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk];
                    d = a[s2][0] * ndu[rk][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (k, d) in ders.iter_mut().enumerate().skip(1).take(order) {
            for v in d.iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        (span, ders)
    }

    /// Point and derivatives `[c(t), c'(t), c''(t), ...]` up to `order`.
    pub fn derivatives(&self, t: f64, order: usize) -> Vec<Point2> {
        let t = t.clamp(0.0, 1.0);
        let p = self.degree;
        let (span, ders) = self.basis_derivatives(t, order);
        let mut out = vec![Point2::ORIGIN; order + 1];
        for (k, row) in ders.iter().enumerate() {
            let mut acc = Point2::ORIGIN;
            for (j, &b) in row.iter().enumerate() {
                acc = acc + self.ctrl[span - p + j] * b;
            }
            out[k] = acc;
        }
        out
    }

    pub fn eval(&self, t: f64) -> Point2 {
        self.derivatives(t, 0)[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureMeasure {
    /// `∫ κ² ds`, integrated against arc length.
    ArcLength,
    /// `∫ κ² dt` over the raw spline parameter.
    Parameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplineSettings {
    /// Composite Simpson node count; must be odd.
    pub quadrature_nodes: usize,
    /// Uniform parameter samples used for collision checks.
    pub collision_samples: usize,
    pub curvature_measure: CurvatureMeasure,
}

impl Default for SplineSettings {
    fn default() -> Self {
        Self {
            quadrature_nodes: 101,
            collision_samples: 200,
            curvature_measure: CurvatureMeasure::ArcLength,
        }
    }
}

impl SplineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.quadrature_nodes < 3 || self.quadrature_nodes.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "quadrature_nodes must be odd and >= 3, got {}",
                self.quadrature_nodes
            )));
        }
        if self.collision_samples < 2 {
            return Err(Error::Config("collision_samples must be >= 2".into()));
        }
        Ok(())
    }
}

/// A planned path with its dense samples cached.
#[derive(Debug, Clone)]
pub struct SplinePath {
    polygon: ControlPolygon,
    spline: BSpline,
    samples: Vec<(f64, Point2)>,
    settings: SplineSettings,
}

impl SplinePath {
    pub fn build(action: &ActionVector, geometry: &SensorGeometry) -> Result<Self> {
        Self::build_with(action, geometry, SplineSettings::default())
    }

    pub fn build_with(
        action: &ActionVector,
        geometry: &SensorGeometry,
        settings: SplineSettings,
    ) -> Result<Self> {
        let polygon = ControlPolygon::from_action(action, geometry)?;
        Self::from_polygon(polygon, settings)
    }

    pub fn from_polygon(polygon: ControlPolygon, settings: SplineSettings) -> Result<Self> {
        settings.validate()?;
        let spline = BSpline::clamped_uniform(polygon.points().to_vec(), SPLINE_DEGREE)?;
        let s = settings.collision_samples;
        let samples = (0..s)
            .map(|j| {
                let t = j as f64 / (s - 1) as f64;
                (t, spline.eval(t))
            })
            .collect();
        Ok(Self {
            polygon,
            spline,
            samples,
            settings,
        })
    }

    pub fn polygon(&self) -> &ControlPolygon {
        &self.polygon
    }

    pub fn spline(&self) -> &BSpline {
        &self.spline
    }

    pub fn samples(&self) -> &[(f64, Point2)] {
        &self.samples
    }

    pub fn settings(&self) -> &SplineSettings {
        &self.settings
    }

    pub fn start(&self) -> Point2 {
        self.spline.eval(0.0)
    }

    pub fn end(&self) -> Point2 {
        self.spline.eval(1.0)
    }

    pub fn eval(&self, t: f64) -> Point2 {
        self.spline.eval(t)
    }

    /// Polyline length over the cached samples.
    pub fn sampled_length(&self) -> f64 {
        self.samples
            .windows(2)
            .map(|w| w[0].1.distance(w[1].1))
            .sum()
    }

    /// Dense polyline with `count` points, for following and plotting.
    pub fn polyline(&self, count: usize) -> Vec<Point2> {
        let count = count.max(2);
        (0..count)
            .map(|j| self.spline.eval(j as f64 / (count - 1) as f64))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x_m,y_m")?;
        for &(t, p) in &self.samples {
            writeln!(out, "{t},{},{}", p.x, p.y)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub rho1: f64,
    pub rho2: f64,
    pub rho3: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            rho1: 1.0,
            rho2: 0.5,
            rho3: 10.0,
        }
    }
}

impl CostWeights {
    pub fn new(rho1: f64, rho2: f64, rho3: f64) -> Self {
        Self { rho1, rho2, rho3 }
    }

    /// The distance-free weighting used when choosing a temporary target.
    pub fn without_distance(self) -> Self {
        Self { rho1: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("rho1", self.rho1), ("rho2", self.rho2), ("rho3", self.rho3)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn combine(&self, dist: f64, curv: f64, obs: u8) -> CostBreakdown {
        CostBreakdown {
            dist,
            curv,
            obs,
            total: self.rho1 * dist + self.rho2 * curv + self.rho3 * obs as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub dist: f64,
    pub curv: f64,
    pub obs: u8,
    pub total: f64,
}

pub fn distance_cost(path: &SplinePath, target: Point2) -> f64 {
    path.end().distance(target)
}

pub fn curvature_cost(path: &SplinePath) -> Result<f64> {
    curvature_cost_with(
        path,
        path.settings.quadrature_nodes,
        path.settings.curvature_measure,
    )
}

/// Composite Simpson integral of squared curvature.
pub fn curvature_cost_with(
    path: &SplinePath,
    nodes: usize,
    measure: CurvatureMeasure,
) -> Result<f64> {
    if nodes < 3 || nodes.is_multiple_of(2) {
        return Err(Error::contract(format!("Simpson needs an odd node count >= 3, got {nodes}")));
    }
    let h = 1.0 / (nodes - 1) as f64;
    let mut sum = 0.0;
    for i in 0..nodes {
        let t = i as f64 * h;
        let d = path.spline.derivatives(t, 2);
        let (d1, d2) = (d[1], d[2]);
        let speed = d1.norm();
        if speed < 1e-9 {
            return Err(Error::DegenerateSpeed { t, speed });
        }
        let kappa = d1.cross(d2) / speed.powi(3);
        let integrand = match measure {
            CurvatureMeasure::ArcLength => kappa * kappa * speed,
            CurvatureMeasure::Parameter => kappa * kappa,
        };
        let w = if i == 0 || i == nodes - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        sum += w * integrand;
    }
    Ok(sum * h / 3.0)
}

/// Cells `(ring, row)` visited by the path's collision samples, as a bit mask.
pub fn visited_mask(path: &SplinePath, geometry: &SensorGeometry) -> u64 {
    let n = geometry.n();
    path.samples
        .iter()
        .filter_map(|&(_, p)| geometry.locate_cell(p))
        .fold(0u64, |m, (ring, row)| m | 1 << (ring * n + row))
}

pub fn obstacle_cost(path: &SplinePath, grid: &OccupancyGrid) -> u8 {
    let g = grid.geometry();
    let hit = path
        .samples
        .iter()
        .filter_map(|&(_, p)| g.locate_cell(p))
        .any(|(ring, row)| grid.is_obstacle(ring, row));
    hit as u8
}

pub fn total_cost(
    path: &SplinePath,
    grid: &OccupancyGrid,
    target: Point2,
    weights: &CostWeights,
) -> Result<CostBreakdown> {
    let dist = distance_cost(path, target);
    let curv = curvature_cost(path)?;
    let obs = obstacle_cost(path, grid);
    Ok(weights.combine(dist, curv, obs))
}

#[derive(Debug, Clone, Copy)]
struct ActionEntry {
    end: Point2,
    curv: f64,
    visited: u64,
}

/// Precomputed endpoint, curvature energy and visited cells for every action
/// of a geometry, so costs against many grids reduce to mask tests.
#[derive(Debug, Clone)]
pub struct ActionTable {
    geometry: SensorGeometry,
    entries: Vec<ActionEntry>,
}

impl ActionTable {
    pub fn new(geometry: &SensorGeometry, settings: SplineSettings) -> Result<Self> {
        let n = geometry.n();
        let entries = (0..ActionVector::space_size(n))
            .map(|idx| {
                let action = ActionVector::from_index(idx, n);
                let path = SplinePath::build_with(&action, geometry, settings)?;
                Ok(ActionEntry {
                    end: path.end(),
                    curv: curvature_cost(&path)?,
                    visited: visited_mask(&path, geometry),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            geometry: *geometry,
            entries,
        })
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn curvature(&self, action: &ActionVector) -> f64 {
        self.entries[action.index(self.geometry.n())].curv
    }

    pub fn endpoint(&self, action: &ActionVector) -> Point2 {
        self.entries[action.index(self.geometry.n())].end
    }

    pub fn collides(&self, action: &ActionVector, grid: &OccupancyGrid) -> bool {
        self.collides_index(action.index(self.geometry.n()), grid.mask())
    }

    pub fn collides_index(&self, index: usize, grid_mask: u64) -> bool {
        self.entries[index].visited & grid_mask != 0
    }

    pub fn cost(
        &self,
        action: &ActionVector,
        grid: &OccupancyGrid,
        target: Point2,
        weights: &CostWeights,
    ) -> CostBreakdown {
        self.cost_index(action.index(self.geometry.n()), grid.mask(), target, weights)
    }

    pub fn cost_index(
        &self,
        index: usize,
        grid_mask: u64,
        target: Point2,
        weights: &CostWeights,
    ) -> CostBreakdown {
        let e = &self.entries[index];
        let obs = (e.visited & grid_mask != 0) as u8;
        weights.combine(e.end.distance(target), e.curv, obs)
    }

    /// Exhaustive minimum of the total cost over all actions; ties go to the
    /// lowest index.
    pub fn optimum(
        &self,
        grid: &OccupancyGrid,
        target: Point2,
        weights: &CostWeights,
    ) -> (ActionVector, CostBreakdown) {
        let mask = grid.mask();
        let (best, cost) = (0..self.entries.len())
            .map(|i| (i, self.cost_index(i, mask, target, weights)))
            .fold(None::<(usize, CostBreakdown)>, |acc, (i, c)| match acc {
                Some((_, b)) if b.total <= c.total => acc,
                _ => Some((i, c)),
            })
            .expect("action table is never empty");
        (ActionVector::from_index(best, self.geometry.n()), cost)
    }

    /// Whether any action avoids every obstacle of the grid.
    pub fn any_collision_free(&self, grid_mask: u64) -> bool {
        self.entries.iter().any(|e| e.visited & grid_mask == 0)
    }
}
