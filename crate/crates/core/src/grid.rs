//! Sector binning of robot-frame point clouds into the polar count grid and
//! the square occupancy grid fed to the networks.
//!
//! Cells are addressed as `(ring, angular_row)`. Rings grow outward from the
//! robot; angular row 0 holds the most negative bearing (rightmost) and row
//! `n - 1` the most positive. Both radial and angular bins are half-open
//! `[low, high)`.

use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorGeometry {
    pub fov_deg: f64,
    pub range_m: f64,
    pub radial_interval_m: f64,
    pub angular_intervals: usize,
    pub radial_intervals: usize,
    /// A cell is an obstacle iff its point count is strictly greater than this.
    pub point_threshold: u32,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self {
            fov_deg: 100.0,
            range_m: 3.0,
            radial_interval_m: 0.5,
            angular_intervals: 5,
            radial_intervals: 5,
            point_threshold: 0,
        }
    }
}

impl SensorGeometry {
    pub fn with_fov(fov_deg: f64) -> Self {
        Self {
            fov_deg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg <= 360.0) {
            return Err(Error::Config(format!("fov_deg {} not in (0, 360]", self.fov_deg)));
        }
        if !(self.radial_interval_m > 0.0) {
            return Err(Error::Config("radial_interval_m must be positive".into()));
        }
        if self.angular_intervals != self.radial_intervals || self.radial_intervals < 2 {
            return Err(Error::Config(format!(
                "grid must be square with n >= 2 (angular {}, radial {})",
                self.angular_intervals, self.radial_intervals
            )));
        }
        if self.radial_intervals * self.radial_intervals > 64 {
            return Err(Error::Config("grid larger than 8x8 is not supported".into()));
        }
        if self.span_m() > self.range_m + 1e-12 {
            return Err(Error::Config(format!(
                "grid span {} m exceeds sensor range {} m",
                self.span_m(),
                self.range_m
            )));
        }
        Ok(())
    }

    /// Grid side length `n`.
    pub fn n(&self) -> usize {
        self.radial_intervals
    }

    pub fn cell_count(&self) -> usize {
        self.n() * self.n()
    }

    /// Outer radius covered by the rings.
    pub fn span_m(&self) -> f64 {
        self.radial_intervals as f64 * self.radial_interval_m
    }

    pub fn half_fov_rad(&self) -> f64 {
        self.fov_deg.to_radians() / 2.0
    }

    pub fn angular_interval_rad(&self) -> f64 {
        self.fov_deg.to_radians() / self.angular_intervals as f64
    }

    pub fn middle_row(&self) -> usize {
        self.angular_intervals / 2
    }

    pub fn radial_bounds(&self, ring: usize) -> (f64, f64) {
        let dr = self.radial_interval_m;
        (ring as f64 * dr, (ring + 1) as f64 * dr)
    }

    pub fn angular_bounds(&self, row: usize) -> (f64, f64) {
        let lo = -self.half_fov_rad();
        let dt = self.angular_interval_rad();
        (lo + row as f64 * dt, lo + (row + 1) as f64 * dt)
    }

    /// Geometric center of a cell in the robot frame.
    pub fn cell_center(&self, ring: usize, row: usize) -> Result<Point2> {
        let n = self.n();
        if ring >= n || row >= n {
            return Err(Error::contract(format!(
                "cell ({ring}, {row}) outside {n}x{n} grid"
            )));
        }
        let r = (ring as f64 + 0.5) * self.radial_interval_m;
        let theta = -self.half_fov_rad() + (row as f64 + 0.5) * self.angular_interval_rad();
        Ok(Point2::from_polar(r, theta))
    }

    /// The cell containing `p`, or `None` outside the sector or ring span.
    pub fn locate_cell(&self, p: Point2) -> Option<(usize, usize)> {
        let n = self.n();
        let r = p.norm();
        if !(r < self.span_m()) {
            return None;
        }
        let theta = p.bearing();
        let half = self.half_fov_rad();
        if theta < -half || theta >= half {
            return None;
        }
        let mut ring = ((r / self.radial_interval_m).floor() as usize).min(n - 1);
        let mut row = (((theta + half) / self.angular_interval_rad()).floor() as usize).min(n - 1);
        // floor() can land one bin off right at a boundary; settle on the bounds.
        while ring > 0 && r < self.radial_bounds(ring).0 {
            ring -= 1;
        }
        while ring + 1 < n && r >= self.radial_bounds(ring).1 {
            ring += 1;
        }
        while row > 0 && theta < self.angular_bounds(row).0 {
            row -= 1;
        }
        while row + 1 < n && theta >= self.angular_bounds(row).1 {
            row += 1;
        }
        Some((ring, row))
    }
}

/// Raw point counts per cell, stored ring-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarCountGrid {
    counts: Vec<u32>,
    geometry: SensorGeometry,
}

impl PolarCountGrid {
    pub fn zeros(geometry: SensorGeometry) -> Self {
        Self {
            counts: vec![0; geometry.cell_count()],
            geometry,
        }
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn count(&self, ring: usize, row: usize) -> u32 {
        self.counts[ring * self.geometry.n() + row]
    }

    pub fn set_count(&mut self, ring: usize, row: usize, value: u32) {
        let n = self.geometry.n();
        self.counts[ring * n + row] = value;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Bin a robot-frame cloud into the sector grid. Points outside the sector or
/// beyond the ring span are dropped.
pub fn polar_binning(cloud: &[Point2], geometry: &SensorGeometry) -> PolarCountGrid {
    let mut grid = PolarCountGrid::zeros(*geometry);
    let n = geometry.n();
    for &p in cloud {
        if let Some((ring, row)) = geometry.locate_cell(p) {
            grid.counts[ring * n + row] += 1;
        }
    }
    grid
}

/// Binary obstacle grid. Cell `(ring, row)` is bit `ring * n + row` of the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    mask: u64,
    geometry: SensorGeometry,
    counts: Option<PolarCountGrid>,
}

pub fn threshold_grid(counts: PolarCountGrid) -> OccupancyGrid {
    let g = counts.geometry;
    let n = g.n();
    let mut mask = 0u64;
    for ring in 0..n {
        for row in 0..n {
            if counts.count(ring, row) > g.point_threshold {
                mask |= 1 << (ring * n + row);
            }
        }
    }
    OccupancyGrid {
        mask,
        geometry: g,
        counts: Some(counts),
    }
}

impl OccupancyGrid {
    pub fn free(geometry: SensorGeometry) -> Self {
        Self::from_mask(0, geometry)
    }

    pub fn full(geometry: SensorGeometry) -> Self {
        let bits = geometry.cell_count();
        let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
        Self::from_mask(mask, geometry)
    }

    pub fn from_mask(mask: u64, geometry: SensorGeometry) -> Self {
        Self {
            mask,
            geometry,
            counts: None,
        }
    }

    pub fn from_cloud(cloud: &[Point2], geometry: &SensorGeometry) -> Self {
        threshold_grid(polar_binning(cloud, geometry))
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn geometry(&self) -> &SensorGeometry {
        &self.geometry
    }

    pub fn counts(&self) -> Option<&PolarCountGrid> {
        self.counts.as_ref()
    }

    pub fn n(&self) -> usize {
        self.geometry.n()
    }

    pub fn is_obstacle(&self, ring: usize, row: usize) -> bool {
        self.mask >> (ring * self.n() + row) & 1 == 1
    }

    pub fn set_obstacle(&mut self, ring: usize, row: usize, value: bool) {
        let bit = 1u64 << (ring * self.n() + row);
        if value {
            self.mask |= bit;
        } else {
            self.mask &= !bit;
        }
    }

    pub fn obstacle_count(&self) -> u32 {
        self.mask.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    /// Square-grid image in row-major `[angular_row][ring]` order: the
    /// angular coordinate runs along y and the radial one along x.
    pub fn to_image(&self) -> Vec<f64> {
        let n = self.n();
        let mut img = vec![0.0; n * n];
        for row in 0..n {
            for ring in 0..n {
                if self.is_obstacle(ring, row) {
                    img[row * n + ring] = 1.0;
                }
            }
        }
        img
    }

    /// Parse the ASCII matrix produced by `Display`: one line per angular
    /// row, most positive bearing first, one character per ring.
    pub fn parse_ascii(text: &str, geometry: SensorGeometry) -> Result<Self> {
        let n = geometry.n();
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('%'))
            .collect();
        if lines.len() != n {
            return Err(Error::contract(format!("expected {n} grid lines, found {}", lines.len())));
        }
        let mut grid = Self::free(geometry);
        for (i, line) in lines.iter().enumerate() {
            let row = n - 1 - i;
            let cells: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
            if cells.len() != n {
                return Err(Error::contract(format!(
                    "grid line {} has {} cells, expected {n}",
                    i + 1,
                    cells.len()
                )));
            }
            for (ring, c) in cells.into_iter().enumerate() {
                match c {
                    '#' | '1' | 'X' | 'x' => grid.set_obstacle(ring, row, true),
                    '.' | '0' => {}
                    other => {
                        return Err(Error::contract(format!("unexpected grid character {other:?}")))
                    }
                }
            }
        }
        Ok(grid)
    }
}

impl fmt::Display for OccupancyGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.n();
        for row in (0..n).rev() {
            let line: String = (0..n)
                .map(|ring| if self.is_obstacle(ring, row) { '#' } else { '.' })
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Read `x_m,y_m` rows. A non-numeric first row is treated as a header.
pub fn read_cloud_csv<R: Read>(reader: R) -> Result<Vec<Point2>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut points = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::contract(format!("cloud row {} has fewer than 2 columns", i + 1)));
        }
        match (record[0].parse::<f64>(), record[1].parse::<f64>()) {
            (Ok(x), Ok(y)) => points.push(Point2::new(x, y)),
            _ if i == 0 => continue,
            _ => return Err(Error::contract(format!("cloud row {} is not numeric", i + 1))),
        }
    }
    Ok(points)
}

pub fn load_cloud_csv(path: &Path) -> Result<Vec<Point2>> {
    read_cloud_csv(std::fs::File::open(path)?)
}
