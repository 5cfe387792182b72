//! Minimal hand-written SVG charts. Output is a pure function of the input,
//! so reruns produce identical files.

use std::fmt::Write;

use ndarray::ArrayView2;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Tick label with a fixed number of significant digits.
fn label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

/// One filled series of bars over shared bin edges.
pub struct HistogramSeries<'a> {
    pub name: &'a str,
    pub counts: &'a [usize],
}

/// Overlaid histograms sharing `edges` (`counts.len() + 1` values).
pub fn histogram(edges: &[f64], series: &[HistogramSeries<'_>], title: &str, x_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let lo = edges.first().copied().unwrap_or(0.0);
    let hi = edges.last().copied().unwrap_or(1.0);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let max_count = series
        .iter()
        .flat_map(|s| s.counts.iter().copied())
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let sx = |v: f64| left + (v - lo) / span * plot_w;
    let sy = |c: f64| top + plot_h - c / max_count * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (i, &c) in s.counts.iter().enumerate() {
            if c == 0 || i + 1 >= edges.len() {
                continue;
            }
            let x0 = sx(edges[i]);
            let x1 = sx(edges[i + 1]);
            let y = sy(c as f64);
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                (x1 - x0).max(0.0),
                top + plot_h - y
            );
        }
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="12" height="12" fill="{color}" fill-opacity="0.6"/><text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            left + plot_w - 120.0,
            top + 6.0 + 18.0 * k as f64,
            left + plot_w - 102.0,
            top + 17.0 + 18.0 * k as f64,
            escape(s.name)
        );
    }
    let axis_y = top + plot_h;
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{axis_y}" x2="{:.1}" y2="{axis_y}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{axis_y}" stroke="black"/>"#,
        left + plot_w
    );
    for i in 0..=4 {
        let v = lo + span * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            sx(v),
            axis_y + 16.0,
            label(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        left + plot_w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
        left - 6.0,
        top + 4.0,
        max_count
    );
    out.push_str("</svg>\n");
    out
}

pub struct LineSeries<'a> {
    pub name: String,
    pub values: &'a [f64],
}

/// Overlaid polylines against their index; non-finite points are skipped.
pub fn lines(series: &[LineSeries<'_>], title: &str, x_label: &str, y_label: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let mut lo = finite().fold(f64::INFINITY, f64::min);
    let mut hi = finite().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        let mid = if lo.is_finite() { lo } else { 0.0 };
        lo = mid - 1.0;
        hi = mid + 1.0;
    }
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(1).max(2);
    let sx = |i: usize| left + i as f64 / (len - 1) as f64 * plot_w;
    let sy = |v: f64| top + plot_h - (v - lo) / (hi - lo) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}" font-family="sans-serif" font-size="12">{}</text>"#,
            left + plot_w - 110.0,
            top + 14.0 + 16.0 * k as f64,
            escape(&s.name)
        );
    }
    let axis_y = top + plot_h;
    let _ = writeln!(
        out,
        r#"<line x1="{left}" y1="{axis_y}" x2="{:.1}" y2="{axis_y}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{axis_y}" stroke="black"/>"#,
        left + plot_w
    );
    for (v, y) in [(hi, top + 4.0), (lo, axis_y)] {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{y:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{}</text>"#,
            left - 6.0,
            label(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        left + plot_w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(y_label)
    );
    out.push_str("</svg>\n");
    out
}

/// Grid of cells shaded by value (white = 0, dark blue = max).
pub fn heatmap(values: ArrayView2<f64>, row_labels: &[String], col_labels: &[&str], title: &str) -> String {
    let (rows, cols) = values.dim();
    let cell_w = 80.0;
    let cell_h = 16.0;
    let left = 50.0;
    let top = 60.0;
    let w = left + cell_w * cols as f64 + 20.0;
    let h = top + cell_h * rows as f64 + 20.0;
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    for (j, name) in col_labels.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            left + cell_w * (j as f64 + 0.5),
            top - 8.0,
            escape(name)
        );
    }
    for i in 0..rows {
        let y = top + cell_h * i as f64;
        if let Some(l) = row_labels.get(i) {
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#,
                left - 6.0,
                y + cell_h - 4.0,
                escape(l)
            );
        }
        for j in 0..cols {
            let v = values[[i, j]];
            let t = if max > 0.0 { v.abs() / max } else { 0.0 };
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            let _ = writeln!(
                out,
                r##"<rect x="{:.1}" y="{y:.1}" width="{cell_w}" height="{cell_h}" fill="#{:02x}{:02x}{:02x}"><title>{}</title></rect>"##,
                left + cell_w * j as f64,
                shade(8.0),
                shade(48.0),
                shade(107.0),
                label(v)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
