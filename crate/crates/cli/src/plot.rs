//! Static SVG line charts from JSONL metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde_json::Value;

use crate::{PlotArgs, UsageError};

const WIDTH: f64 = 760.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 24.0;
const PANEL_TOP: f64 = 28.0;
const PANEL_BOTTOM: f64 = 40.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Points of one series in one file, in record order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub fn run(a: &PlotArgs) -> Result<()> {
    if a.series.is_empty() {
        return Err(UsageError("at least one --series is required".into()).into());
    }
    let mut panels = Vec::with_capacity(a.series.len());
    for name in &a.series {
        let mut lines = Vec::with_capacity(a.inputs.len());
        for path in &a.inputs {
            lines.push(read_series(path, name)?);
        }
        panels.push((name.clone(), lines));
    }
    let svg = render(a.title.as_deref(), &panels);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    emit!("wrote {}", a.out.display());
    Ok(())
}

/// Reads `series` against `step` (or the record index when a record has no
/// step). Null values are skipped, other fields are ignored.
pub fn read_series(path: &Path, series: &str) -> Result<Series> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut points = Vec::new();
    let mut present = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: not a JSON record", path.display(), i + 1))?;
        let x = rec.get("step").and_then(Value::as_f64).unwrap_or(i as f64);
        match rec.get(series) {
            None => {}
            Some(Value::Null) => present = true,
            Some(v) => {
                present = true;
                let y = v.as_f64().ok_or_else(|| {
                    anyhow!(
                        "{}:{}: series '{series}' is not numeric",
                        path.display(),
                        i + 1
                    )
                })?;
                points.push((x, y));
            }
        }
    }
    if !present {
        return Err(
            UsageError(format!("series '{series}' not found in {}", path.display())).into(),
        );
    }
    Ok(Series {
        label: label_for(path),
        points,
    })
}

fn label_for(path: &Path) -> String {
    let parent = path
        .parent()
        .and_then(Path::file_name)
        .map(|s| s.to_string_lossy().into_owned());
    let file = path.file_name().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    match parent {
        Some(p) if file == "metrics.jsonl" => format!("{p}/{file}"),
        _ => file,
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && c != '\t' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".to_string()
        } else {
            s.to_string()
        }
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 1e-12 {
            lo.abs() * 0.1
        } else {
            0.5
        };
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

/// One stacked panel per series; every panel shares the x axis range.
pub fn render(title: Option<&str>, panels: &[(String, Vec<Series>)]) -> String {
    let header = if title.is_some() { 30.0 } else { 0.0 };
    let files = panels.first().map_or(0, |p| p.1.len());
    let legend_h = 18.0 * files as f64 + 12.0;
    let panel_total = PANEL_TOP + PANEL_HEIGHT + PANEL_BOTTOM;
    let height = header + legend_h + panel_total * panels.len() as f64;
    let (x0, x1) = range(
        panels
            .iter()
            .flat_map(|p| p.1.iter())
            .flat_map(|s| s.points.iter().map(|p| p.0)),
    );
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(t) = title {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(t)
        );
    }
    let _ = writeln!(s, r#"<g class="legend">"#);
    if let Some((_, series)) = panels.first() {
        for (i, ser) in series.iter().enumerate() {
            let y = header + 14.0 + 18.0 * i as f64;
            let color = PALETTE[i % PALETTE.len()];
            let _ = writeln!(
                s,
                r#"<line x1="{MARGIN_LEFT}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
                MARGIN_LEFT + 24.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                MARGIN_LEFT + 30.0,
                y + 4.0,
                escape(&ser.label)
            );
        }
    }
    let _ = writeln!(s, "</g>");

    for (pi, (name, series)) in panels.iter().enumerate() {
        let top = header + legend_h + panel_total * pi as f64 + PANEL_TOP;
        let bottom = top + PANEL_HEIGHT;
        let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
        let sy = |y: f64| bottom - (y - y0) / (y1 - y0) * PANEL_HEIGHT;
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN_LEFT}" y="{:.2}" font-size="12" font-weight="bold">{}</text>"#,
            top - 8.0,
            escape(name)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_LEFT}" y="{top:.2}" width="{plot_w:.2}" height="{PANEL_HEIGHT}" fill="none" stroke="#444"/>"##
        );
        for t in 0..TICKS {
            let f = t as f64 / (TICKS - 1) as f64;
            let xv = x0 + f * (x1 - x0);
            let yv = y0 + f * (y1 - y0);
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                r##"<line x1="{px:.2}" y1="{bottom:.2}" x2="{px:.2}" y2="{:.2}" stroke="#444"/>"##,
                bottom + 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                bottom + 16.0,
                escape(&fmt_tick(xv))
            );
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{MARGIN_LEFT}" y2="{py:.2}" stroke="#444"/>"##,
                MARGIN_LEFT - 4.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 7.0,
                py + 4.0,
                escape(&fmt_tick(yv))
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
            MARGIN_LEFT + plot_w / 2.0,
            bottom + 32.0
        );
        for (i, ser) in series.iter().enumerate() {
            let pts: Vec<String> = ser
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                PALETTE[i % PALETTE.len()],
                pts.join(" ")
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ser(label: &str, pts: &[(f64, f64)]) -> Series {
        Series {
            label: label.into(),
            points: pts.to_vec(),
        }
    }

    #[test]
    fn one_polyline_per_file_per_panel() {
        let panels = vec![
            (
                "a".to_string(),
                vec![ser("x", &[(0.0, 1.0), (1.0, 2.0)]), ser("y", &[(0.0, 0.5)])],
            ),
            (
                "b".to_string(),
                vec![ser("x", &[(0.0, 1.0)]), ser("y", &[(2.0, 3.0)])],
            ),
        ];
        let svg = render(Some("t & <u>"), &panels);
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("t &amp; &lt;u&gt;"));
    }

    #[test]
    fn ticks_format_compactly() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(0.25), "0.25");
        assert_eq!(fmt_tick(2000.0), "2000");
        assert_eq!(fmt_tick(1e-6), "1.00e-6");
    }

    #[test]
    fn flat_range_is_padded() {
        let (lo, hi) = range([2.0, 2.0].into_iter());
        assert!(lo < 2.0 && hi > 2.0);
        assert_eq!(range(std::iter::empty()), (0.0, 1.0));
    }
}
