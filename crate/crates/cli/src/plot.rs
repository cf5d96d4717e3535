//! Static SVG overlays of one prediction on the map.
//!
//! Layers, bottom to top: occupancy raster, sampled futures, quadrature
//! abscissae, truth, history. Abscissae on cells with value ≥ 0.5 carry the
//! `collide` class so the picture and its tests agree on what "colliding"
//! means.

use std::fmt::Write as _;

use ccmotion::dist::TrajectoryMixture;
use ccmotion::occupancy::OccupancyGrid;
use ccmotion::quad_cost::{abscissae_points, CostConfig, HermiteRule};
use ccmotion::traj_core::TimedPath;
use ccmotion::Result;

/// Pixels per meter.
const SCALE: f64 = 16.0;

pub struct CasePlot<'a> {
    pub title: &'a str,
    pub grid: &'a OccupancyGrid,
    pub history: &'a TimedPath,
    pub truth: &'a TimedPath,
    pub mixture: &'a TrajectoryMixture,
    pub cost: &'a CostConfig,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlotStats {
    pub abscissae: usize,
    pub colliding: usize,
    pub samples: usize,
}

struct Canvas {
    lo: [f64; 2],
    height: f64,
}

impl Canvas {
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        ((p[0] - self.lo[0]) * SCALE, self.height - (p[1] - self.lo[1]) * SCALE)
    }

    fn polyline(&self, out: &mut String, class: &str, pts: impl Iterator<Item = [f64; 2]>) {
        let coords: Vec<String> = pts
            .map(|p| {
                let (x, y) = self.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(out, r#"<polyline class="{class}" points="{}"/>"#, coords.join(" "));
    }
}

pub fn render_case(plot: &CasePlot) -> Result<(String, PlotStats)> {
    let grid = plot.grid;
    let (lo, hi) = grid.extent();
    let (w, h) = ((hi[0] - lo[0]) * SCALE, (hi[1] - lo[1]) * SCALE);
    let canvas = Canvas { lo, height: h };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", xml_escape(plot.title));
    out.push_str(
        "<style>\
         .occ{fill:#444}\
         .sample{fill:none;stroke:#4a90d9;stroke-opacity:0.35;stroke-width:1}\
         .truth{fill:none;stroke:#2a9d2a;stroke-width:2}\
         .history{fill:none;stroke:#111;stroke-width:2}\
         .abscissa{fill:#e08a00;fill-opacity:0.5}\
         .abscissa.collide{fill:#d62828;fill-opacity:0.9}\
         </style>\n",
    );
    let _ = writeln!(out, r##"<rect width="{w:.2}" height="{h:.2}" fill="#fafafa"/>"##);

    out.push_str("<g id=\"occupancy\">\n");
    let cell = grid.resolution * SCALE;
    for r in 0..grid.height {
        for c in 0..grid.width {
            if grid.get(c, r) >= 0.5 {
                let (x, y) = canvas.px([
                    lo[0] + c as f64 * grid.resolution,
                    lo[1] + (r + 1) as f64 * grid.resolution,
                ]);
                let _ = writeln!(out, r#"<rect class="occ" x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}"/>"#);
            }
        }
    }
    out.push_str("</g>\n");

    let times = plot.cost.times();
    let horizon = plot.cost.horizon;
    let dense: Vec<f64> = (0..=60).map(|k| k as f64 * horizon / 60.0).collect();
    out.push_str("<g id=\"samples\">\n");
    for k in 0..plot.samples {
        let traj = plot.mixture.sample_trajectory(plot.seed.wrapping_add(k as u64));
        canvas.polyline(&mut out, "sample", dense.iter().map(|&t| {
            let (x, y) = traj.eval(t);
            [x, y]
        }));
    }
    out.push_str("</g>\n");

    let rule = HermiteRule::new(plot.cost.nodes)?;
    let mut stats = PlotStats {
        abscissae: 0,
        colliding: 0,
        samples: plot.samples,
    };
    out.push_str("<g id=\"abscissae\">\n");
    for &t in &times {
        let slice = plot.mixture.project_at_time(t);
        for (mean, cov) in slice.means.iter().zip(&slice.covariances) {
            for (p, _) in abscissae_points(mean, cov, &rule)? {
                let hit = grid.value_at(p) >= 0.5;
                stats.abscissae += 1;
                stats.colliding += usize::from(hit);
                let (x, y) = canvas.px(p);
                let class = if hit { "abscissa collide" } else { "abscissa" };
                let _ = writeln!(out, r#"<circle class="{class}" cx="{x:.2}" cy="{y:.2}" r="1.5"/>"#);
            }
        }
    }
    out.push_str("</g>\n");

    let path_pts = |p: &TimedPath| p.samples().iter().map(|s| [s.x, s.y]).collect::<Vec<_>>();
    canvas.polyline(&mut out, "truth", path_pts(plot.truth).into_iter());
    canvas.polyline(&mut out, "history", path_pts(plot.history).into_iter());
    out.push_str("</svg>\n");
    Ok((out, stats))
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
