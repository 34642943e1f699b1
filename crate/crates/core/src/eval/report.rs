//! Text renderings of evaluation results: CSV, markdown and SVG.

use std::fmt::Write;

use super::EvalReport;

fn label(labels: &[String], i: usize) -> String {
    labels.get(i).cloned().unwrap_or_else(|| format!("class_{i}"))
}

fn axis_labels(labels: &[String], n: usize) -> Vec<String> {
    let mut out: Vec<String> = (0..n).map(|i| label(labels, i)).collect();
    out.push("background".into());
    out
}

pub fn confusion_csv(matrix: &[Vec<usize>], labels: &[String]) -> String {
    let names = axis_labels(labels, matrix.len().saturating_sub(1));
    let mut s = String::from("gt\\pred");
    for n in &names {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for (row, n) in matrix.iter().zip(&names) {
        s.push_str(n);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// mAP at each threshold plus the average, as a one-row markdown table.
pub fn map_table(rows: &[(String, &EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else { return String::new() };
    let mut s = String::from("| model |");
    for t in &first.thresholds {
        let _ = write!(s, " mAP@{t:.1} |");
    }
    s.push_str(" avg |\n|---|");
    for _ in 0..=first.thresholds.len() {
        s.push_str("---|");
    }
    s.push('\n');
    for (name, r) in rows {
        let _ = write!(s, "| {name} |");
        for m in &r.map_per_threshold {
            let _ = write!(s, " {:.2} |", 100.0 * m);
        }
        let _ = writeln!(s, " {:.2} |", 100.0 * r.avg_map);
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Row-normalised heatmap of a confusion matrix.
pub fn confusion_svg(matrix: &[Vec<usize>], labels: &[String]) -> String {
    let n = matrix.len();
    let names = axis_labels(labels, n.saturating_sub(1));
    let (cell, margin) = (40usize, 110usize);
    let size = margin + n * cell + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    );
    for (i, row) in matrix.iter().enumerate() {
        let total: usize = row.iter().sum();
        for (j, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (margin + j * cell, margin + i * cell);
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#999"/>"##
            );
            let ink = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v}</text>"#,
                x + cell / 2,
                y + cell / 2 + 4
            );
        }
    }
    for (i, name) in names.iter().enumerate() {
        let name = escape(name);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{name}</text>"#, margin - 6, margin + i * cell + cell / 2 + 4);
        let (x, y) = (margin + i * cell + cell / 2, margin - 6);
        let _ = writeln!(s, r#"<text x="{x}" y="{y}" transform="rotate(-45 {x} {y})">{name}</text>"#);
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars with optional error whiskers, values in [0, 1].
pub fn bar_chart_svg(title: &str, names: &[String], values: &[f64], spread: Option<&[f64]>) -> String {
    let (bar, gap, height, left, bottom) = (48usize, 24usize, 220.0, 50usize, 70usize);
    let width = left + names.len() * (bar + gap) + gap;
    let total_h = height as usize + bottom + 40;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, width / 2, escape(title));
    let base = 30.0 + height;
    let _ = writeln!(s, r#"<line x1="{left}" y1="30" x2="{left}" y2="{base}" stroke="black"/>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = base - v * height;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 4, y + 4.0);
    }
    for (i, (name, &v)) in names.iter().zip(values).enumerate() {
        let x = left + gap + i * (bar + gap);
        let h = v.clamp(0.0, 1.0) * height;
        let _ = writeln!(s, r##"<rect x="{x}" y="{:.1}" width="{bar}" height="{h:.1}" fill="#4878a8"/>"##, base - h);
        if let Some(e) = spread.and_then(|sp| sp.get(i)) {
            let cx = x + bar / 2;
            let (y0, y1) = (base - (v - e).clamp(0.0, 1.0) * height, base - (v + e).clamp(0.0, 1.0) * height);
            let _ = writeln!(s, r#"<line x1="{cx}" y1="{y0:.1}" x2="{cx}" y2="{y1:.1}" stroke="black"/>"#);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, x + bar / 2, base - h - 4.0);
        let (tx, ty) = (x + bar / 2, base as usize + 14);
        let _ = writeln!(s, r#"<text x="{tx}" y="{ty}" text-anchor="end" transform="rotate(-30 {tx} {ty})">{}</text>"#, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// mAP against tIoU threshold, one polyline per series.
pub fn map_curve_svg(series: &[(String, &EvalReport)]) -> String {
    let (w, left, top, ph) = (420.0, 50.0, 30.0, 180.0);
    let h = top + ph + 40.0 + 12.0 * series.len() as f64;
    let pw = w - left - 20.0;
    let colors = ["#4878a8", "#d1603d", "#5a9e52", "#8c63a8", "#c2a83e", "#444444"];
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">mAP vs tIoU threshold</text>"#, w / 2.0);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let Some((_, first)) = series.first() else {
        s.push_str("</svg>\n");
        return s;
    };
    let ts = &first.thresholds;
    let (t0, t1) = (ts.iter().cloned().fold(f64::INFINITY, f64::min), ts.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    let span = if t1 > t0 { t1 - t0 } else { 1.0 };
    let px = |t: f64| left + (t - t0) / span * pw;
    let py = |m: f64| top + (1.0 - m.clamp(0.0, 1.0)) * ph;
    for &t in ts {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text>"#, px(t), top + ph + 14.0);
    }
    for tick in 0..=4 {
        let m = tick as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{m:.2}</text>"#, left - 4.0, py(m) + 4.0);
    }
    for (i, (name, r)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = r.thresholds.iter().zip(&r.map_per_threshold).map(|(&t, &m)| format!("{:.1},{:.1}", px(t), py(m))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} ({:.3})</text>"#,
            left + 4.0,
            top + ph + 30.0 + 12.0 * i as f64,
            escape(name),
            r.avg_map
        );
    }
    s.push_str("</svg>\n");
    s
}
