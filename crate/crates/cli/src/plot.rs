//! Static SVG figures. Every mark carries its exact data value in a
//! `data-*` attribute so the files can be parsed back.

use std::fmt::Write;

use posegrid::metrics::EvalReport;
use posegrid::train::HistoryEntry;

const WIDTH: f64 = 640.0;
const PANEL_HEIGHT: f64 = 150.0;
const MARGIN: f64 = 48.0;

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One panel per loss series, each on its own linear scale.
pub fn loss_curves(history: &[HistoryEntry]) -> String {
    type Series = (&'static str, fn(&HistoryEntry) -> f64);
    let series: [Series; 5] = [
        ("total", |h| h.loss.total),
        ("cls", |h| h.loss.cls),
        ("loc", |h| h.loss.loc),
        ("pose2d", |h| h.loss.pose2d),
        ("pose3d", |h| h.loss.pose3d),
    ];
    let height = MARGIN + series.len() as f64 * (PANEL_HEIGHT + MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let steps: Vec<f64> = history.iter().map(|h| h.step as f64).collect();
    let (s0, s1) = (steps[0], *steps.last().unwrap());
    let sx = |s: f64| MARGIN + (WIDTH - 2.0 * MARGIN) * if s1 > s0 { (s - s0) / (s1 - s0) } else { 0.5 };
    for (k, (name, get)) in series.iter().enumerate() {
        let values: Vec<f64> = history.iter().map(get).collect();
        let finite = values.iter().filter(|v| v.is_finite());
        let lo = finite.clone().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.cloned().fold(f64::NEG_INFINITY, f64::max);
        let top = MARGIN + k as f64 * (PANEL_HEIGHT + MARGIN);
        let sy = |v: f64| top + PANEL_HEIGHT * if hi > lo { (hi - v) / (hi - lo) } else { 0.5 };
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN}" y="{top}" width="{}" height="{PANEL_HEIGHT}" fill="none" stroke="#999"/>"##,
            WIDTH - 2.0 * MARGIN
        );
        let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{}">{name} [{lo:.4e}, {hi:.4e}]</text>"#, top - 6.0);
        let points: Vec<String> = steps
            .iter()
            .zip(&values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&s, &v)| format!("{:.2},{:.2}", sx(s), sy(v)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline data-series="{name}" data-steps="{}" data-values="{}" points="{}" fill="none" stroke="#1f77b4"/>"##,
            join(steps.iter().copied()),
            join(values.iter().copied()),
            points.join(" ")
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        WIDTH / 2.0,
        height - 12.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of 3DPCK per root-distance bin plus the overall value.
pub fn pck_by_distance(report: &EvalReport) -> String {
    let mut bars: Vec<(String, Option<f64>)> = report
        .pck3d_per_distance_bin
        .iter()
        .map(|b| (b.label.clone(), b.pck))
        .collect();
    bars.push(("All".into(), Some(report.pck3d)));
    let height = PANEL_HEIGHT * 2.0 + 2.0 * MARGIN;
    let plot_h = PANEL_HEIGHT * 2.0;
    let slot = (WIDTH - 2.0 * MARGIN) / bars.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{}">3DPCK (%) by root distance (m), threshold {} mm</text>"#,
        MARGIN - 16.0,
        report.pck_threshold_mm
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="#333"/>"##,
        WIDTH - MARGIN,
        y = MARGIN + plot_h
    );
    for (k, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN + k as f64 * slot + 0.15 * slot;
        let label = escape(label);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#,
            x + 0.35 * slot,
            MARGIN + plot_h + 14.0
        );
        match value {
            Some(v) => {
                let h = plot_h * (v / 100.0).clamp(0.0, 1.0);
                let _ = writeln!(
                    svg,
                    r##"<rect data-label="{label}" data-value="{v}" x="{x:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="#2ca02c"/>"##,
                    MARGIN + plot_h - h,
                    0.7 * slot
                );
                let _ = writeln!(
                    svg,
                    r#"<text x="{}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#,
                    x + 0.35 * slot,
                    MARGIN + plot_h - h - 4.0
                );
            }
            None => {
                let _ = writeln!(
                    svg,
                    r#"<text data-label="{label}" data-value="none" x="{}" y="{}" text-anchor="middle">n/a</text>"#,
                    x + 0.35 * slot,
                    MARGIN + plot_h - 4.0
                );
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}
