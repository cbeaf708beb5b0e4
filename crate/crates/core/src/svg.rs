//! Plain SVG renderings of a single plan and of a simulated episode.

use std::fmt::Write as _;

use crate::grid::OccupancyGrid;
use crate::planner::PlanResult;
use crate::point::Point2;
use crate::sim::{EpisodeResult, WorldScenario};

/// Maps metric coordinates onto an SVG viewport with y pointing up.
#[derive(Debug, Clone)]
pub struct SvgCanvas {
    min: Point2,
    max: Point2,
    scale: f64,
    body: String,
}

impl SvgCanvas {
    pub fn new(min: Point2, max: Point2, scale: f64) -> Self {
        Self {
            min,
            max,
            scale,
            body: String::new(),
        }
    }

    /// Canvas around `points`, padded by `margin` metres.
    pub fn fit(points: impl IntoIterator<Item = Point2>, margin: f64, scale: f64) -> Self {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            lo = Point2::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point2::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        if !lo.x.is_finite() {
            lo = Point2::ORIGIN;
            hi = Point2::ORIGIN;
        }
        let m = Point2::new(margin, margin);
        Self::new(lo - m, hi + m, scale)
    }

    fn px(&self, p: Point2) -> (f64, f64) {
        ((p.x - self.min.x) * self.scale, (self.max.y - p.y) * self.scale)
    }

    fn points_attr(&self, pts: &[Point2]) -> String {
        pts.iter()
            .map(|&p| {
                let (x, y) = self.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn polyline(&mut self, pts: &[Point2], stroke: &str, width: f64, extra: &str) {
        let attr = self.points_attr(pts);
        let _ = writeln!(
            self.body,
            r#"<polyline points="{attr}" fill="none" stroke="{stroke}" stroke-width="{width}" {extra}/>"#
        );
    }

    pub fn polygon(&mut self, pts: &[Point2], fill: &str, stroke: &str) {
        let attr = self.points_attr(pts);
        let _ = writeln!(
            self.body,
            r#"<polygon points="{attr}" fill="{fill}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    pub fn circle(&mut self, c: Point2, radius_px: f64, fill: &str) {
        let (x, y) = self.px(c);
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{radius_px}" fill="{fill}"/>"#);
    }

    pub fn text(&mut self, at: Point2, label: &str) {
        let (x, y) = self.px(at);
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="monospace" font-size="12">{label}</text>"#
        );
    }

    pub fn finish(self) -> String {
        let w = (self.max.x - self.min.x) * self.scale;
        let h = (self.max.y - self.min.y) * self.scale;
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.2} {h:.2}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }
}

fn sector_outline(grid: &OccupancyGrid, ring: usize, row: usize) -> Vec<Point2> {
    let g = grid.geometry();
    let (r0, r1) = g.radial_bounds(ring);
    let (a0, a1) = g.angular_bounds(row);
    let steps = 8;
    let mut pts = Vec::with_capacity(2 * steps + 2);
    for i in 0..=steps {
        pts.push(Point2::from_polar(r1, a0 + (a1 - a0) * i as f64 / steps as f64));
    }
    for i in (0..=steps).rev() {
        pts.push(Point2::from_polar(r0, a0 + (a1 - a0) * i as f64 / steps as f64));
    }
    pts
}

/// Sector grid with occupied cells shaded, the control polygon, the spline
/// and the normalized targets, in the robot frame.
pub fn render_plan(grid: &OccupancyGrid, plan: &PlanResult, cloud: &[Point2]) -> String {
    let n = grid.n();
    let span = grid.geometry().span_m();
    let mut canvas = SvgCanvas::new(Point2::new(-0.3, -span - 0.3), Point2::new(span + 0.3, span + 0.3), 160.0);
    for ring in 0..n {
        for row in 0..n {
            let fill = if grid.is_obstacle(ring, row) { "#bbbbbb" } else { "none" };
            canvas.polygon(&sector_outline(grid, ring, row), fill, "#888888");
        }
    }
    for &p in cloud {
        canvas.circle(p, 1.5, "#444444");
    }
    canvas.polyline(plan.path.polygon().points(), "#3366cc", 1.0, r#"stroke-dasharray="4 3""#);
    for &p in plan.path.polygon().points() {
        canvas.circle(p, 3.0, "#3366cc");
    }
    let color = if plan.cost.obs == 0 { "#118811" } else { "#cc2222" };
    canvas.polyline(&plan.path.polyline(200), color, 2.5, "");
    for (i, &t) in plan.frame.normalized_targets.iter().enumerate() {
        let fill = if i + 1 == plan.used_network { "#cc7700" } else { "#999999" };
        canvas.circle(t, 4.0, fill);
    }
    let label = format!(
        "network {} action {} status {} cost {:.3}",
        plan.used_network,
        plan.action,
        plan.status.as_str(),
        plan.cost.total
    );
    canvas.text(Point2::new(-0.25, span + 0.15), &label);
    canvas.finish()
}

/// World map with obstacles, each planned spline, and the driven trajectory.
pub fn render_episode(scenario: &WorldScenario, episode: &EpisodeResult) -> String {
    let bounds = scenario
        .obstacle_points
        .iter()
        .copied()
        .chain([scenario.start.position(), scenario.target])
        .chain(episode.trajectory.iter().map(|s| s.pose.position()));
    let mut canvas = SvgCanvas::fit(bounds, scenario.arrival_radius + 0.5, 40.0);
    let ring: Vec<Point2> = (0..=64)
        .map(|i| scenario.target + Point2::from_polar(scenario.arrival_radius, i as f64 * std::f64::consts::TAU / 64.0))
        .collect();
    canvas.polyline(&ring, "#cc7700", 1.0, r#"stroke-dasharray="5 4""#);
    canvas.circle(scenario.target, 4.0, "#cc7700");
    for &p in &scenario.obstacle_points {
        canvas.circle(p, 1.2, "#333333");
    }
    for event in &episode.replan_events {
        let color = if event.plan.fallback_used { "#cc2222" } else { "#88aadd" };
        canvas.polyline(&event.world_path, color, 1.0, "");
    }
    let driven: Vec<Point2> = episode.trajectory.iter().map(|s| s.pose.position()).collect();
    canvas.polyline(&driven, "#118811", 2.0, "");
    canvas.circle(scenario.start.position(), 4.0, "#118811");
    let label = format!(
        "{:?} after {} steps, {} replans, {} fallbacks",
        episode.termination,
        episode.steps,
        episode.replan_events.len(),
        episode.fallback_count()
    );
    let (lo, hi) = (canvas.min, canvas.max);
    canvas.text(Point2::new(lo.x + 0.2, hi.y - 0.4), &label);
    canvas.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canvas_flips_y() {
        let mut c = SvgCanvas::new(Point2::new(0.0, 0.0), Point2::new(1.0, 2.0), 10.0);
        assert_eq!(c.px(Point2::new(0.0, 2.0)), (0.0, 0.0));
        assert_eq!(c.px(Point2::new(1.0, 0.0)), (10.0, 20.0));
        c.circle(Point2::new(0.5, 1.0), 2.0, "red");
        let doc = c.finish();
        assert!(doc.starts_with("<svg") && doc.trim_end().ends_with("</svg>"));
        assert!(doc.contains(r#"cx="5.00" cy="10.00""#));
    }
}
