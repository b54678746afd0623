//! Standalone SVG line chart of active vs total context size.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use kvfreeze_core::StepMetrics;

use crate::error::{HarnessError, Result};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn points(
    rows: &[StepMetrics],
    value: impl Fn(&StepMetrics) -> usize,
    x_max: f64,
    y_max: f64,
) -> String {
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let x0 = rows[0].step as f64;
    let mut s = String::new();
    for (i, r) in rows.iter().enumerate() {
        let x = LEFT + (r.step as f64 - x0) / (x_max - x0).max(1.0) * pw;
        let y = TOP + ph - value(r) as f64 / y_max * ph;
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x:.2},{y:.2}").unwrap();
    }
    s
}

/// Renders the chart. Needs at least two rows.
pub fn render_svg(rows: &[StepMetrics], title: &str) -> Result<String> {
    if rows.len() < 2 {
        return Err(HarnessError::Usage(
            "chart needs at least 2 metric rows".into(),
        ));
    }
    let x_max = rows.last().unwrap().step as f64;
    let y_max = rows
        .iter()
        .map(|r| r.total.max(r.active))
        .max()
        .unwrap()
        .max(1) as f64;
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    // axes
    writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" stroke="black" fill="none"/>"#,
        TOP + ph,
        LEFT + pw
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = TOP + ph - f * ph;
        let x = LEFT + f * pw;
        let x_label = rows[0].step as f64 + f * (x_max - rows[0].step as f64);
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.0}</text>"#,
            LEFT - 6.0,
            y + 4.0,
            f * y_max
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{x_label:.0}</text>"#,
            TOP + ph + 18.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">generation step</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 16.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">KV cache size (tokens)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<polyline id="baseline" fill="none" stroke="gray" stroke-dasharray="6 4" points="{}"/>"#,
        points(rows, |r| r.total, x_max, y_max)
    )
    .unwrap();
    writeln!(
        s,
        r#"<polyline id="policy" fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        points(rows, |r| r.active, x_max, y_max)
    )
    .unwrap();
    // legend
    let lx = LEFT + 16.0;
    writeln!(
        s,
        r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="gray" stroke-dasharray="6 4"/>"#,
        TOP + 10.0,
        lx + 24.0,
        TOP + 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}">total (full cache)</text>"#,
        lx + 30.0,
        TOP + 14.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="steelblue" stroke-width="1.5"/>"#,
        TOP + 28.0,
        lx + 24.0,
        TOP + 28.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="{}">active (soft freeze)</text>"#,
        lx + 30.0,
        TOP + 32.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

pub fn emit_chart(rows: &[StepMetrics], title: &str, path: &Path) -> Result<()> {
    let svg = render_svg(rows, title)?;
    fs::write(path, svg).map_err(|e| HarnessError::io(path, e))
}

/// The `points` attribute of the polyline with the given id, parsed back.
pub fn polyline_points(svg: &str, id: &str) -> Option<Vec<(f64, f64)>> {
    let start = svg.find(&format!(r#"<polyline id="{id}""#))?;
    let rest = &svg[start..];
    let p = rest.find("points=\"")? + 8;
    let end = rest[p..].find('"')?;
    rest[p..p + end]
        .split(' ')
        .map(|pair| {
            let (x, y) = pair.split_once(',')?;
            Some((x.parse().ok()?, y.parse().ok()?))
        })
        .collect()
}
