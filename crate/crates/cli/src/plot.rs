//! Minimal SVG line chart of mean ± std per method.

use std::fmt::Write as _;

use agmm_core::bench::{Method, SummaryRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

fn color(method: Method) -> &'static str {
    match method {
        Method::AdaptiveGmm => "#1f77b4",
        Method::Icp => "#d62728",
    }
}

/// One polyline of means per method, with std error bars drawn as lines.
pub fn line_chart(rows: &[SummaryRow], x_label: &str) -> String {
    let (mut x_min, mut x_max) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.value), hi.max(r.value)));
    if !(x_min < x_max) {
        let centre = if x_min.is_finite() { x_min } else { 0.0 };
        x_min = centre - 1.0;
        x_max = centre + 1.0;
    }
    let top = rows.iter().map(|r| r.mean + r.std).fold(0.0, f64::max);
    let y_max = if top > 0.0 && top.is_finite() { top * 1.05 } else { 1.0 };
    let sx = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * (WIDTH - LEFT - RIGHT);
    let sy = |y: f64| HEIGHT - BOTTOM - y / y_max * (HEIGHT - TOP - BOTTOM);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let xv = x_min + (x_max - x_min) * i as f64 / 4.0;
        let yv = y_max * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            sx(xv),
            y0 + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            sy(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">{x_label}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.2})">rotation error</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort_by_key(|m| m.name());
    methods.dedup();
    for (k, method) in methods.iter().enumerate() {
        let c = color(*method);
        let series: Vec<&SummaryRow> = rows.iter().filter(|r| r.method == *method).collect();
        let points: Vec<String> = series
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.value), sy(r.mean)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="{}" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            method.name(),
            points.join(" ")
        );
        for r in &series {
            let x = sx(r.value);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{c}" stroke-width="1"/>"#,
                sy((r.mean - r.std).max(0.0)),
                sy(r.mean + r.std)
            );
        }
        let ly = TOP + 16.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{c}" stroke-width="2"/>"#,
            x1 - 90.0,
            x1 - 70.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12">{}</text>"#,
            x1 - 64.0,
            ly + 4.0,
            method.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: Method, value: f64, mean: f64) -> SummaryRow {
        SummaryRow { method, value, count: 1, mean, std: 0.1 }
    }

    #[test]
    fn one_polyline_per_method() {
        let rows = vec![
            row(Method::AdaptiveGmm, 0.0, 0.1),
            row(Method::Icp, 0.0, 0.3),
            row(Method::AdaptiveGmm, 1.0, 0.2),
            row(Method::Icp, 1.0, 0.4),
        ];
        let svg = line_chart(&rows, "noise");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(r#"class="agmm""#) && svg.contains(r#"class="icp""#));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn single_value_does_not_divide_by_zero() {
        let svg = line_chart(&[row(Method::Icp, 0.0, 0.0)], "rotation");
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn ticks_are_trimmed() {
        assert_eq!(tick(0.5), "0.5");
        assert_eq!(tick(-60.0), "-60");
        assert_eq!(tick(-0.0001), "0");
    }
}
