//! Quick-look SVG rendering of a simulated engagement.
//!
//! Four panels: the planar trajectory `(r cos lambda, r sin lambda)` coloured
//! by confidence (red = analytical, blue = learned), then `sigma(t)`, `r(t)`
//! and `rho(t)`.

use std::fmt::Write;

use crate::guidance_sim::{SimResult, TracePoint};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 40.0;
/// Trace points drawn per panel at most.
const MAX_POINTS: usize = 600;

struct Panel {
    x0: f64,
    y0: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Panel {
    fn new(col: usize, row: usize, xr: (f64, f64), yr: (f64, f64)) -> Self {
        let pad = |(lo, hi): (f64, f64)| {
            let span = if hi > lo { hi - lo } else { 1.0 };
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        Self {
            x0: MARGIN + col as f64 * (PANEL_W + MARGIN),
            y0: MARGIN + row as f64 * (PANEL_H + MARGIN),
            xr: pad(xr),
            yr: pad(yr),
        }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * PANEL_W;
        let py = self.y0 + PANEL_H - (y - self.yr.0) / (self.yr.1 - self.yr.0) * PANEL_H;
        (px, py)
    }

    fn frame(&self, out: &mut String, title: &str) {
        let _ = write!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#888"/>"##,
            self.x0, self.y0
        );
        let _ = write!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" font-family="sans-serif">{title}</text>"#,
            self.x0 + 4.0,
            self.y0 - 6.0
        );
        for (v, anchor, x, y) in [
            (self.xr.0, "start", self.x0, self.y0 + PANEL_H + 14.0),
            (self.xr.1, "end", self.x0 + PANEL_W, self.y0 + PANEL_H + 14.0),
            (self.yr.0, "end", self.x0 - 3.0, self.y0 + PANEL_H),
            (self.yr.1, "end", self.x0 - 3.0, self.y0 + 10.0),
        ] {
            let _ = write!(
                out,
                r#"<text x="{x:.1}" y="{y:.1}" font-size="10" font-family="sans-serif" text-anchor="{anchor}">{v:.2}</text>"#
            );
        }
    }

    fn polyline(&self, out: &mut String, pts: &[(f64, f64)], colour: &str) {
        let mut d = String::new();
        for &(x, y) in pts {
            let (px, py) = self.map(x, y);
            let _ = write!(d, "{px:.2},{py:.2} ");
        }
        let _ = write!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Red at `rho = 0` through blue at `rho = 1`.
fn confidence_colour(rho: f64) -> String {
    let rho = rho.clamp(0.0, 1.0);
    let r = (220.0 * (1.0 - rho) + 30.0 * rho) as u8;
    let b = (30.0 * (1.0 - rho) + 220.0 * rho) as u8;
    format!("rgb({r},40,{b})")
}

fn thinned(trace: &[TracePoint]) -> Vec<TracePoint> {
    let stride = trace.len().div_ceil(MAX_POINTS).max(1);
    let mut pts: Vec<TracePoint> = trace.iter().step_by(stride).copied().collect();
    if let Some(last) = trace.last() {
        if pts.last() != Some(last) {
            pts.push(*last);
        }
    }
    pts
}

/// Renders the trace as a standalone SVG document.
pub fn trace_svg(result: &SimResult, title: &str) -> String {
    let pts = thinned(&result.trace);
    let width = 2.0 * PANEL_W + 3.0 * MARGIN;
    let height = 2.0 * PANEL_H + 3.0 * MARGIN + 20.0;
    let mut out = String::new();
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    out.push_str(r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = write!(
        out,
        r#"<text x="{MARGIN}" y="18" font-size="14" font-family="sans-serif">{} | hit={} miss={:.2e} dt_f={:.2e} J={:.4}</text>"#,
        escape(title),
        result.hit,
        result.miss_distance,
        result.impact_time_error,
        result.effort
    );

    let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.r * p.lambda.cos(), p.r * p.lambda.sin())).collect();
    let xr = range(xy.iter().map(|p| p.0).chain([0.0]));
    let yr = range(xy.iter().map(|p| p.1).chain([0.0]));
    // Equal axis scaling for the planar view.
    let span = (xr.1 - xr.0).max(yr.1 - yr.0).max(1e-9);
    let (cx, cy) = (0.5 * (xr.0 + xr.1), 0.5 * (yr.0 + yr.1));
    let traj = Panel::new(0, 0, (cx - 0.5 * span, cx + 0.5 * span), (cy - 0.5 * span, cy + 0.5 * span));
    traj.frame(&mut out, "trajectory (colour: rho)");
    for (w, p) in xy.windows(2).zip(&pts) {
        let (a, b) = (traj.map(w[0].0, w[0].1), traj.map(w[1].0, w[1].1));
        let _ = write!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="2"/>"#,
            a.0,
            a.1,
            b.0,
            b.1,
            confidence_colour(p.rho)
        );
    }
    let (tx, ty) = traj.map(0.0, 0.0);
    let _ = write!(out, r#"<circle cx="{tx:.2}" cy="{ty:.2}" r="4" fill="black"/>"#);

    let tr = range(pts.iter().map(|p| p.t));
    type Series = (&'static str, fn(&TracePoint) -> f64, usize, usize);
    let series: [Series; 3] = [
        ("sigma(t)", |p| p.sigma, 1, 0),
        ("r(t)", |p| p.r, 0, 1),
        ("rho(t)", |p| p.rho, 1, 1),
    ];
    for (name, f, col, row) in series {
        let yr = if name == "rho(t)" { (0.0, 1.0) } else { range(pts.iter().map(f)) };
        let panel = Panel::new(col, row, tr, yr);
        panel.frame(&mut out, name);
        let line: Vec<(f64, f64)> = pts.iter().map(|p| (p.t, f(p))).collect();
        panel.polyline(&mut out, &line, "#1f4e9c");
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance_sim::Termination;

    fn point(t: f64, rho: f64) -> TracePoint {
        TracePoint {
            t,
            r: 1.0 - t,
            lambda: 0.1 * t,
            sigma: 0.5 - t,
            u: 0.0,
            mu_star: 0.0,
            sigma_star: 0.1,
            a_p: 0.0,
            rho,
        }
    }

    #[test]
    fn renders_all_panels() {
        let res = SimResult {
            trace: (0..2000).map(|k| point(k as f64 * 4e-4, k as f64 / 2000.0)).collect(),
            miss_distance: 1e-3,
            impact_time_error: 1e-4,
            effort: 1.0,
            hit: true,
            termination: Termination::Hit,
        };
        let svg = trace_svg(&res, "a<b");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("a&lt;b"));
        assert!(svg.matches("<line").count() <= MAX_POINTS + 1);
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn colour_endpoints() {
        assert_eq!(confidence_colour(0.0), "rgb(220,40,30)");
        assert_eq!(confidence_colour(1.0), "rgb(30,40,220)");
    }
}
