//! Minimal SVG overlays: ground truth, proposal, sampled path, and
//! obstacle boxes for one scenario. Hand-rolled so output bytes are fully
//! deterministic.

use std::fmt::Write as _;

use crate::eval::ego_headings;
use crate::scene::{Path, Scenario};

const VIEW_PX: f64 = 640.0;

struct Mapper {
    scale: f64,
    half: f64,
}

impl Mapper {
    fn new(extent: f64) -> Self {
        Self {
            scale: VIEW_PX / (2.0 * extent),
            half: VIEW_PX / 2.0,
        }
    }

    /// World (x forward, y left) to SVG pixels (x right, y down): forward
    /// is up, left is left.
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (self.half - y * self.scale, self.half - x * self.scale)
    }
}

fn polyline(out: &mut String, mapper: &Mapper, path: &Path, color: &str, dash: &str) {
    let mut points = String::new();
    let origin = mapper.map(0.0, 0.0);
    let _ = write!(points, "{:.2},{:.2}", origin.0, origin.1);
    for w in &path.waypoints {
        let (px, py) = mapper.map(w.x, w.y);
        let _ = write!(points, " {px:.2},{py:.2}");
    }
    let _ = writeln!(
        out,
        r#"  <polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#
    );
    for w in &path.waypoints {
        let (px, py) = mapper.map(w.x, w.y);
        let _ = writeln!(
            out,
            r#"  <circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{color}"/>"#
        );
    }
}

fn boxes(out: &mut String, mapper: &Mapper, scenario: &Scenario) {
    for o in &scenario.obstacles {
        let corners = o.initial.corners();
        let mut points = String::new();
        for (i, &(x, y)) in corners.iter().enumerate() {
            let (px, py) = mapper.map(x, y);
            if i > 0 {
                points.push(' ');
            }
            let _ = write!(points, "{px:.2},{py:.2}");
        }
        let _ = writeln!(
            out,
            r##"  <polygon points="{points}" fill="#8882" stroke="#555" stroke-width="1.5"/>"##
        );
    }
}

/// Render one scenario overlay with the ground-truth path (green), the
/// raw proposal (orange, dashed), and the sampled path (blue).
pub fn scenario_overlay(scenario: &Scenario, proposal: &Path, sampled: &Path) -> String {
    let mapper = Mapper::new(scenario.extent);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{VIEW_PX}" height="{VIEW_PX}" viewBox="0 0 {VIEW_PX} {VIEW_PX}">"#
    );
    let _ = writeln!(
        out,
        r##"  <rect width="{VIEW_PX}" height="{VIEW_PX}" fill="white" stroke="#ccc"/>"##
    );
    boxes(&mut out, &mapper, scenario);

    // Ego footprint at the origin.
    let ego = scenario.ego_box_at(0.0, 0.0, ego_headings(&scenario.gt_path).first().copied().unwrap_or(0.0));
    let mut points = String::new();
    for (i, &(x, y)) in ego.corners().iter().enumerate() {
        let (px, py) = mapper.map(x, y);
        if i > 0 {
            points.push(' ');
        }
        let _ = write!(points, "{px:.2},{py:.2}");
    }
    let _ = writeln!(
        out,
        r##"  <polygon points="{points}" fill="#4444" stroke="#222" stroke-width="1.5"/>"##
    );

    polyline(&mut out, &mapper, &scenario.gt_path, "#2a9d2a", "");
    polyline(
        &mut out,
        &mapper,
        proposal,
        "#e08820",
        r#" stroke-dasharray="6 4""#,
    );
    polyline(&mut out, &mapper, sampled, "#2454c4", "");
    let _ = writeln!(
        out,
        r#"  <text x="10" y="20" font-family="monospace" font-size="13">{}</text>"#,
        scenario.id
    );
    out.push_str("</svg>\n");
    out
}
