//! Minimal SVG line charts of a metrics log.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use mscl::training::MetricsLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

const SERIES: [(&str, &str); 5] = [
    ("l_rgb", "#1f77b4"),
    ("l_flow", "#ff7f0e"),
    ("l_rf", "#2ca02c"),
    ("l_lmc", "#d62728"),
    ("total", "#000000"),
];

fn column(log: &MetricsLog, name: &str) -> Vec<f64> {
    log.records()
        .iter()
        .map(|r| match name {
            "l_rgb" => r.l_rgb,
            "l_flow" => r.l_flow,
            "l_rf" => r.l_rf,
            "l_lmc" => r.l_lmc,
            _ => r.total,
        })
        .collect()
}

/// Loss curves against step; each total-loss row also gets a `<circle class="point">` marker.
pub fn render_svg(log: &MetricsLog) -> Result<String> {
    let steps: Vec<f64> = log.records().iter().map(|r| r.step as f64).collect();
    if steps.is_empty() {
        bail!("metrics log has no rows to plot");
    }
    let all: Vec<f64> = SERIES.iter().flat_map(|(n, _)| column(log, n)).collect();
    if all.iter().any(|v| !v.is_finite()) {
        bail!("metrics log contains non-finite values");
    }
    let (x0, x1) = (steps[0], *steps.last().expect("non-empty"));
    let y0 = all.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let y1 = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sx = |x: f64| MARGIN + if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 } * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 } * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#,
        W = WIDTH,
        H = HEIGHT
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r##"<g stroke="#888" fill="none"><line x1="{m}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}"/></g>"##,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN
    );
    let _ = writeln!(
        s,
        r#"<g font-family="sans-serif" font-size="11"><text x="{}" y="{}">step {}</text><text x="{}" y="{}" text-anchor="end">step {}</text><text x="4" y="{}">{:.3}</text><text x="4" y="{}">{:.3}</text></g>"#,
        MARGIN,
        HEIGHT - MARGIN + 16.0,
        x0,
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 16.0,
        x1,
        sy(y1) + 4.0,
        y1,
        sy(y0) + 4.0,
        y0
    );
    for (i, (name, colour)) in SERIES.iter().enumerate() {
        let ys = column(log, name);
        let pts: Vec<String> = steps
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-name="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            name,
            colour,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{}">{}</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 14.0 * i as f64,
            colour,
            name
        );
        if *name == "total" {
            for (&x, &y) in steps.iter().zip(&ys) {
                let _ = writeln!(
                    s,
                    r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                    sx(x),
                    sy(y),
                    colour
                );
            }
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mscl::training::StepRecord;

    fn log(rows: usize) -> MetricsLog {
        let mut l = MetricsLog::new();
        for i in 0..rows {
            l.push(StepRecord {
                step: i,
                lr: 0.01,
                l_rgb: 1.0,
                l_flow: 2.0,
                l_rf: 3.0,
                l_lmc: 0.5,
                total: 6.5 - i as f64,
            })
            .unwrap();
        }
        l
    }

    #[test]
    fn one_marker_per_row() {
        let svg = render_svg(&log(2)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches(r#"class="point""#).count(), 2);
        assert_eq!(svg.matches("<polyline").count(), SERIES.len());
    }

    #[test]
    fn single_row_and_empty_logs() {
        assert_eq!(render_svg(&log(1)).unwrap().matches("<circle").count(), 1);
        assert!(render_svg(&MetricsLog::new()).is_err());
    }
}
