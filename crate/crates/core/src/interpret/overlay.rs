//! Per-position overlays: CSV tables and standalone SVG plots.

use std::fmt::Write as _;

use super::{InterpretError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayRow {
    pub position: usize,
    pub amplitude: Option<f64>,
    pub attention: f64,
    pub attribution: f64,
}

pub fn overlay_rows(amplitudes: &[Option<f64>], attention: &[f64], attribution: &[f64]) -> Result<Vec<OverlayRow>> {
    if amplitudes.len() != attention.len() || attention.len() != attribution.len() {
        return Err(InterpretError::InvalidArgument("overlay columns differ in length".into()));
    }
    Ok((0..amplitudes.len())
        .map(|p| OverlayRow {
            position: p,
            amplitude: amplitudes[p],
            attention: attention[p],
            attribution: attribution[p],
        })
        .collect())
}

/// `position,amplitude,attention,attribution`; the amplitude is empty off
/// the signal runs.
pub fn overlay_csv(rows: &[OverlayRow]) -> String {
    let mut out = String::from("position,amplitude,attention,attribution\n");
    for r in rows {
        let amp = r.amplitude.map(|a| format!("{a:e}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{:e},{:e}", r.position, amp, r.attention, r.attribution);
    }
    out
}

pub fn parse_overlay_csv(text: &str) -> Result<Vec<OverlayRow>> {
    let bad = |line: usize, m: &str| InterpretError::InvalidArgument(format!("overlay line {line}: {m}"));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "position,amplitude,attention,attribution" => {}
        _ => return Err(bad(1, "missing header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(i + 1, "expected 4 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, &format!("not a number: `{s}`")));
        rows.push(OverlayRow {
            position: f[0].parse().map_err(|_| bad(i + 1, "bad position"))?,
            amplitude: if f[1].is_empty() { None } else { Some(num(f[1])?) },
            attention: num(f[2])?,
            attribution: num(f[3])?,
        });
    }
    Ok(rows)
}

const WIDTH: f64 = 960.0;
const PANEL: f64 = 140.0;
const MARGIN: f64 = 40.0;

fn scale(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Signal trace on top, attention (filled band) and attribution (bars,
/// signed) below, sharing the position axis.
pub fn render_overlay_svg(rows: &[OverlayRow], title: &str) -> String {
    let n = rows.len().max(1) as f64;
    let x = |p: usize| MARGIN + (p as f64 + 0.5) / n * (WIDTH - 2.0 * MARGIN);
    let height = 3.0 * PANEL + 2.0 * MARGIN;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#,
        escape(title)
    );

    // signal trace
    let (lo, hi) = scale(rows.iter().filter_map(|r| r.amplitude));
    let top = MARGIN;
    let y = |a: f64| top + PANEL - (a - lo) / (hi - lo) * (PANEL - 10.0) - 5.0;
    let mut path = String::new();
    let mut pen_down = false;
    for r in rows {
        match r.amplitude {
            Some(a) => {
                let _ = write!(path, "{}{:.2},{:.2} ", if pen_down { "L" } else { "M" }, x(r.position), y(a));
                pen_down = true;
            }
            None => pen_down = false,
        }
    }
    let _ = writeln!(svg, r##"<path d="{}" fill="none" stroke="#222222" stroke-width="1"/>"##, path.trim_end());
    label(&mut svg, top, "amplitude");

    // attention band
    let top = MARGIN + PANEL;
    let (_, amax) = scale(rows.iter().map(|r| r.attention).chain([0.0]));
    let base = top + PANEL - 5.0;
    let mut band = format!("M{:.2},{base:.2} ", x(0));
    for r in rows {
        let h = r.attention / amax * (PANEL - 10.0);
        let _ = write!(band, "L{:.2},{:.2} ", x(r.position), base - h);
    }
    let _ = write!(band, "L{:.2},{base:.2} Z", x(rows.len().saturating_sub(1)));
    let _ = writeln!(svg, r##"<path d="{band}" fill="#1f77b4" fill-opacity="0.45" stroke="#1f77b4"/>"##);
    label(&mut svg, top, "attention");

    // attribution bars around a zero line
    let top = MARGIN + 2.0 * PANEL;
    let m = rows.iter().map(|r| r.attribution.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let zero = top + PANEL / 2.0;
    let bar = ((WIDTH - 2.0 * MARGIN) / n).max(0.5);
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{zero:.2}" x2="{:.2}" y2="{zero:.2}" stroke="#999999"/>"##,
        WIDTH - MARGIN
    );
    for r in rows {
        let h = r.attribution / m * (PANEL / 2.0 - 5.0);
        let (y0, hh) = if h >= 0.0 { (zero - h, h) } else { (zero, -h) };
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{y0:.2}" width="{bar:.2}" height="{hh:.2}" fill="#d62728"/>"##,
            x(r.position) - bar / 2.0
        );
    }
    label(&mut svg, top, "attribution");
    svg.push_str("</svg>\n");
    svg
}

fn label(svg: &mut String, top: f64, text: &str) {
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" fill="#555555">{text}</text>"##,
        MARGIN + 4.0,
        top + 14.0
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let rows = overlay_rows(&[None, Some(1.5), Some(-0.25), None], &[0.1, 0.4, 0.3, 0.2], &[0.0, -1.0, 2.5, 0.0]).unwrap();
        let text = overlay_csv(&rows);
        assert!(text.lines().nth(1).unwrap().starts_with("0,,"));
        assert_eq!(parse_overlay_csv(&text).unwrap(), rows);
        assert!(parse_overlay_csv("a,b\n").is_err());
        assert!(parse_overlay_csv("position,amplitude,attention,attribution\n0,x,1,1\n").is_err());
        assert!(overlay_rows(&[None], &[], &[]).is_err());
    }

    #[test]
    fn svg_is_well_formed() {
        let rows = overlay_rows(&[None, Some(1.0), Some(2.0), None], &[0.25; 4], &[0.0, 1.0, -1.0, 0.0]).unwrap();
        let svg = render_overlay_svg(&rows, "a < b");
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<rect").count(), 1 + 4);
        assert!(!svg.contains("NaN"));
        let empty = render_overlay_svg(&[], "empty");
        assert!(!empty.contains("NaN"));
    }
}
