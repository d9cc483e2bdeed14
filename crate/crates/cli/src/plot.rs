//! Static SVG rendering of a training-fraction sweep: accuracy on the left
//! panel, sensitivity on the right, one seed-averaged line per pipeline.

use std::fmt::Write as _;

use mricascade::pipeline::{PipelineKind, SweepReport};

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;
const LEGEND_H: f64 = 24.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn color(kind: PipelineKind) -> &'static str {
    let i = PipelineKind::ALL.iter().position(|&k| k == kind).unwrap_or(0);
    COLORS[i % COLORS.len()]
}

/// Seed-averaged `(fraction, value)` points per kind, skipping undefined means.
pub fn series(report: &SweepReport, sensitivity: bool) -> Vec<(PipelineKind, Vec<(f64, f64)>)> {
    report
        .kinds()
        .into_iter()
        .map(|k| {
            let pts = report
                .fractions()
                .into_iter()
                .filter_map(|f| {
                    let v = if sensitivity { report.mean_sensitivity(k, f) } else { report.mean_accuracy(k, f) };
                    v.map(|v| (f, v))
                })
                .collect();
            (k, pts)
        })
        .collect()
}

fn panel(svg: &mut String, x0: f64, title: &str, data: &[(PipelineKind, Vec<(f64, f64)>)], fractions: &[f64]) {
    let (lo, hi) = match (fractions.first(), fractions.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.05, a + 0.05),
        _ => (0.0, 1.0),
    };
    let left = x0 + MARGIN;
    let right = x0 + PANEL_W - 12.0;
    let top = MARGIN / 2.0 + LEGEND_H;
    let bottom = top + PANEL_H - MARGIN;
    let sx = |f: f64| left + (f - lo) / (hi - lo) * (right - left);
    let sy = |v: f64| bottom - v.clamp(0.0, 1.0) * (bottom - top);
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{title}</text>"#, (left + right) / 2.0, top - 8.0);
    let _ = writeln!(svg, r#"<rect x="{left:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="dimgray"/>"#, right - left, bottom - top);
    for t in 0..=4 {
        let v = t as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{v:.2}</text>"#, left - 4.0, sy(v) + 3.0);
    }
    for &f in fractions {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{:.0}%</text>"#, sx(f), bottom + 14.0, f * 100.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">training fraction</text>"#, (left + right) / 2.0, bottom + 30.0);
    for (kind, pts) in data {
        let c = color(*kind);
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|&(f, v)| format!("{:.1},{:.1}", sx(f), sy(v))).collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, path.join(" "));
        }
        for &(f, v) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, sx(f), sy(v));
        }
    }
}

/// Two-panel figure; a single fraction still yields one marker per kind.
pub fn sweep_svg(report: &SweepReport) -> String {
    let fractions = report.fractions();
    let width = 2.0 * PANEL_W;
    let height = PANEL_H + LEGEND_H;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, kind) in report.kinds().into_iter().enumerate() {
        let x = 12.0 + i as f64 * 170.0;
        let _ = writeln!(svg, r#"<rect x="{x:.1}" y="6" width="12" height="12" fill="{}"/>"#, color(kind));
        let _ = writeln!(svg, r#"<text x="{:.1}" y="16" font-size="11">{}</text>"#, x + 16.0, kind.display_name());
    }
    panel(&mut svg, 0.0, "(a) accuracy", &series(report, false), &fractions);
    panel(&mut svg, PANEL_W, "(b) sensitivity", &series(report, true), &fractions);
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use mricascade::pipeline::SweepCell;

    fn cell(kind: PipelineKind, fraction: f64, seed: u64, acc: f64) -> SweepCell {
        SweepCell { kind, fraction, seed, accuracy: Some(acc), sensitivity: Some(acc / 2.0) }
    }

    #[test]
    fn single_point_still_plotted() {
        let r = SweepReport { cells: vec![cell(PipelineKind::UnetLstm, 0.9, 0, 0.8)] };
        let svg = sweep_svg(&r);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(!svg.contains("<polyline"));
    }

    #[test]
    fn means_over_seeds() {
        let r = SweepReport {
            cells: vec![cell(PipelineKind::UnetRnn, 0.5, 0, 0.6), cell(PipelineKind::UnetRnn, 0.5, 1, 0.8)],
        };
        let s = series(&r, false);
        assert!((s[0].1[0].1 - 0.7).abs() < 1e-12);
        let s = series(&r, true);
        assert!((s[0].1[0].1 - 0.35).abs() < 1e-12);
    }
}
