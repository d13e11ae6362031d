//! Qualitative scene overlays as self-contained SVG files.
//!
//! Per scene: observed past as solid dark lines, each predicted hypothesis
//! as a dotted line, ground-truth future as a solid green overlay, and the
//! hypothesis closest to the ground truth highlighted in pink.

use anyhow::{bail, Result};
use flowcast_core::sampler::SampleRecord;
use flowcast_core::scene::Scene;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 640.0;
const MARGIN: f64 = 48.0;

const PAST_COLOR: &str = "#1f2937";
const GT_COLOR: &str = "#10b981";
const HYP_COLOR: &str = "#9ca3af";
const BEST_COLOR: &str = "#ec4899";

struct Frame {
    min_x: f64,
    min_y: f64,
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Result<Frame> {
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for [x, y] in points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        if !min_x.is_finite() {
            bail!("nothing to plot");
        }
        let span_x = (max_x - min_x).max(1e-9);
        let span_y = (max_y - min_y).max(1e-9);
        let scale = ((WIDTH - 2.0 * MARGIN) / span_x).min((HEIGHT - 2.0 * MARGIN) / span_y);
        Ok(Frame { min_x, min_y, scale })
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        // World y grows upward; SVG y grows downward.
        (
            MARGIN + (p[0] - self.min_x) * self.scale,
            HEIGHT - MARGIN - (p[1] - self.min_y) * self.scale,
        )
    }
}

fn polyline(frame: &Frame, pts: &[[f64; 2]], stroke: &str, width: f64, dashed: bool) -> String {
    let coords: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = frame.map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let dash = if dashed { " stroke-dasharray=\"5 4\"" } else { "" };
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"{dash} stroke-linecap=\"round\"/>\n",
        coords.join(" ")
    )
}

fn endpoint_dot(frame: &Frame, p: [f64; 2], fill: &str) -> String {
    let (x, y) = frame.map(p);
    format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3.5\" fill=\"{fill}\"/>\n")
}

/// Index of the hypothesis with the lowest scene-mean displacement from
/// the ground truth over the full horizon.
fn closest_hypothesis(record: &SampleRecord, scene: &Scene) -> Result<usize> {
    let preds = record.to_tensor()?;
    let gt = scene.future_tensor();
    let (k_n, a_n, t_f) = (preds.shape()[0], preds.shape()[1], preds.shape()[2]);
    if gt.shape() != [a_n, t_f, 2] {
        bail!(
            "sample dump for scene `{}` does not match the scene geometry",
            scene.scene_id
        );
    }
    let mut best = (0usize, f64::INFINITY);
    for k in 0..k_n {
        let mut acc = 0.0;
        for a in 0..a_n {
            for t in 0..t_f {
                let dx = preds[[k, a, t, 0]] - gt[[a, t, 0]];
                let dy = preds[[k, a, t, 1]] - gt[[a, t, 1]];
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
        if acc < best.1 {
            best = (k, acc);
        }
    }
    Ok(best.0)
}

/// Render one scene with its predictions into an SVG document.
pub fn render_scene(scene: &Scene, record: &SampleRecord) -> Result<String> {
    if record.scene_id != scene.scene_id {
        bail!(
            "sample record `{}` does not belong to scene `{}`",
            record.scene_id,
            scene.scene_id
        );
    }
    let best = closest_hypothesis(record, scene)?;

    let all_points = scene
        .agents
        .iter()
        .flat_map(|a| a.past.iter().chain(a.future.iter()).copied())
        .chain(
            record
                .predictions
                .iter()
                .flatten()
                .flatten()
                .copied(),
        );
    let frame = Frame::fit(all_points)?;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // Hypotheses first (dotted), non-best then best so pink stays on top.
    for (k, hyp) in record.predictions.iter().enumerate() {
        if k == best {
            continue;
        }
        for (a, agent) in scene.agents.iter().enumerate() {
            let mut pts = vec![*agent.past.last().expect("nonempty past")];
            pts.extend(hyp[a].iter().copied());
            svg.push_str(&polyline(&frame, &pts, HYP_COLOR, 1.5, true));
        }
    }
    for (a, agent) in scene.agents.iter().enumerate() {
        let mut pts = vec![*agent.past.last().expect("nonempty past")];
        pts.extend(record.predictions[best][a].iter().copied());
        svg.push_str(&polyline(&frame, &pts, BEST_COLOR, 2.5, true));
        svg.push_str(&endpoint_dot(&frame, *pts.last().unwrap(), BEST_COLOR));
    }

    // Ground truth overlay and observed past (solid).
    for agent in &scene.agents {
        let mut pts = vec![*agent.past.last().expect("nonempty past")];
        pts.extend(agent.future.iter().copied());
        svg.push_str(&polyline(&frame, &pts, GT_COLOR, 2.0, false));
        svg.push_str(&polyline(&frame, &agent.past, PAST_COLOR, 2.0, false));
        svg.push_str(&endpoint_dot(&frame, *agent.past.last().unwrap(), PAST_COLOR));
    }

    svg.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"28\" font-family=\"monospace\" font-size=\"14\" fill=\"{PAST_COLOR}\">{}</text>\n",
        scene.scene_id
    ));
    let legend = [
        (PAST_COLOR, "past"),
        (GT_COLOR, "ground truth"),
        (HYP_COLOR, "hypotheses"),
        (BEST_COLOR, "closest to ground truth"),
    ];
    for (i, (color, label)) in legend.iter().enumerate() {
        let y = 50.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{MARGIN}\" y=\"{}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n",
            y - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{y}\" font-family=\"monospace\" font-size=\"12\" fill=\"{PAST_COLOR}\">{label}</text>\n",
            MARGIN + 18.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
