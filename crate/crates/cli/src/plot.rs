//! Deterministic SVG rendering of pose sequences and α traces.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use slg_core::corpus::FRAME_DIM;
use slg_core::pose::{bones, JOINTS};
use slg_core::ptgen::PoseSequence;

const PANEL: f64 = 160.0;
const MARGIN: f64 = 12.0;
const COLUMNS: usize = 8;
const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

pub enum PlotInput {
    Pose(Vec<Vec<f32>>),
    Alpha(Vec<Vec<f32>>),
}

/// Reads a pose CSV (`j0…j149,counter`) or an α trace (`frame,alpha1…`),
/// telling them apart by the first header cell.
pub fn read_plot_csv(path: &Path) -> Result<PlotInput> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let first = r.headers()?.get(0).map(str::to_string);
    match first.as_deref() {
        Some("j0") => Ok(PlotInput::Pose(PoseSequence::read_csv(path)?.frames)),
        Some("frame") => {
            let width = r.headers()?.len();
            if width < 2 {
                bail!("{}: α trace needs at least one alpha column", path.display());
            }
            let mut rows = Vec::new();
            for (n, rec) in r.records().enumerate() {
                let rec = rec.with_context(|| format!("{}: row {}", path.display(), n + 2))?;
                if rec.len() != width {
                    bail!("{}:{}: expected {width} columns, found {}", path.display(), n + 2, rec.len());
                }
                let alpha = rec
                    .iter()
                    .skip(1)
                    .map(|v| v.trim().parse::<f32>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("{}:{}: bad number", path.display(), n + 2))?;
                if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
                    bail!("{}:{}: α values must be finite and non-negative", path.display(), n + 2);
                }
                rows.push(alpha);
            }
            Ok(PlotInput::Alpha(rows))
        }
        _ => bail!("{}: unrecognized CSV header (expected a pose or α trace)", path.display()),
    }
}

pub fn render(input: &PlotInput) -> String {
    match input {
        PlotInput::Pose(frames) => pose_svg(frames),
        PlotInput::Alpha(rows) => alpha_svg(rows),
    }
}

/// One stick-figure panel per frame, laid out in rows of eight. All panels
/// share one scale so motion amplitude stays comparable.
pub fn pose_svg(frames: &[Vec<f32>]) -> String {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for f in frames {
        for j in 0..JOINTS.min(f.len() / 3) {
            for a in 0..2 {
                let v = f[3 * j + a] as f64;
                if v.is_finite() {
                    lo[a] = lo[a].min(v);
                    hi[a] = hi[a].max(v);
                }
            }
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = if span.is_finite() && span > 0.0 { (PANEL - 2.0 * MARGIN) / span } else { 1.0 };
    let cols = frames.len().clamp(1, COLUMNS);
    let rows = frames.len().div_ceil(COLUMNS).max(1);
    let (w, h) = (cols as f64 * PANEL, rows as f64 * PANEL);
    let mut s = header(w, h);
    let bones = bones();
    for (t, f) in frames.iter().enumerate() {
        let (ox, oy) = ((t % COLUMNS) as f64 * PANEL, (t / COLUMNS) as f64 * PANEL);
        let _ = writeln!(s, r#"<g class="frame" data-frame="{t}" transform="translate({ox:.1},{oy:.1})">"#);
        let _ = writeln!(
            s,
            r##"<rect width="{PANEL}" height="{PANEL}" fill="none" stroke="#dddddd"/><text x="4" y="12" font-size="10">{t}</text>"##
        );
        let at = |j: usize, a: usize| MARGIN + (f[3 * j + a] as f64 - lo[a]) * scale;
        if f.len() == FRAME_DIM {
            for &(a, b) in &bones {
                let _ = writeln!(
                    s,
                    r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="{}"/>"#,
                    at(a, 0),
                    at(a, 1),
                    at(b, 0),
                    at(b, 1),
                    if a < 8 && b < 8 { "#333333" } else { "#4e79a7" },
                    if a < 8 && b < 8 { 2 } else { 1 },
                );
            }
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Stacked-area chart of per-frame importance coefficients, one polygon
/// per source.
pub fn alpha_svg(rows: &[Vec<f32>]) -> String {
    let (w, h, pad) = (640.0, 260.0, 30.0);
    let k = rows.first().map_or(0, Vec::len);
    let t = rows.len();
    let x = |i: usize| {
        if t <= 1 {
            w / 2.0
        } else {
            pad + i as f64 * (w - 2.0 * pad) / (t - 1) as f64
        }
    };
    let y = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = header(w, h);
    let mut lower = vec![0.0f64; t];
    for src in 0..k {
        let upper: Vec<f64> = rows.iter().zip(&lower).map(|(r, l)| l + r[src] as f64).collect();
        let mut pts: Vec<String> = (0..t).map(|i| format!("{:.2},{:.2}", x(i), y(upper[i]))).collect();
        pts.extend((0..t).rev().map(|i| format!("{:.2},{:.2}", x(i), y(lower[i]))));
        let _ = writeln!(
            s,
            r#"<polygon class="alpha" data-source="{}" fill="{}" fill-opacity="0.8" points="{}"/>"#,
            src + 1,
            PALETTE[src % PALETTE.len()],
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="16" font-size="11" fill="{}">alpha{}</text>"#,
            pad + 60.0 * src as f64,
            PALETTE[src % PALETTE.len()],
            src + 1
        );
        lower = upper;
    }
    let _ = writeln!(
        s,
        r##"<line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="#333333"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{0}" stroke="#333333"/>"##,
        h - pad,
        w - pad
    );
    s.push_str("</svg>\n");
    s
}

fn header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}
