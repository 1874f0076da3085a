//! Minimal SVG line charts for the logged stage data. Hand-rolled on
//! purpose: the plots are diagnostic artifacts, not a charting surface.

/// One labeled polyline.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 16.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn esc(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Round tick labels to a few significant digits.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10();
    if (-3.0..6.0).contains(&magnitude) {
        let decimals = (3.0 - magnitude).ceil().max(0.0) as usize;
        let s = format!("{v:.decimals$}");
        let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
        if s.is_empty() {
            "0".to_string()
        } else {
            s
        }
    } else {
        format!("{v:.2e}")
    }
}

/// Roughly five round-numbered ticks covering [lo, hi].
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).abs().max(1e-12);
    let raw_step = span / 4.0;
    let power = 10f64.powf(raw_step.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .iter()
        .map(|m| m * power)
        .find(|s| span / s <= 5.0)
        .unwrap_or(power * 10.0);
    let first = (lo / step).ceil() * step;
    let mut out = Vec::new();
    let mut t = first;
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

/// Render labeled series as a fixed-size SVG line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_lo, mut x_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(*x), hi.max(*x)));
    let (mut y_lo, mut y_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, y)| (lo.min(*y), hi.max(*y)));
    if points.is_empty() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi - x_lo < 1e-12 {
        x_lo -= 0.5;
        x_hi += 0.5;
    }
    if y_hi - y_lo < 1e-12 {
        let pad = y_lo.abs().max(1.0) * 0.05;
        y_lo -= pad;
        y_hi += pad;
    } else {
        let pad = (y_hi - y_lo) * 0.05;
        y_lo -= pad;
        y_hi += pad;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = move |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = move |y: f64| MARGIN_TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    ));
    svg.push('\n');
    svg.push_str(&format!(r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{}" y="20" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        esc(title)
    ));
    svg.push('\n');

    for t in ticks(x_lo, x_hi) {
        let x = sx(t);
        svg.push_str(&format!(
            r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            MARGIN_TOP,
            MARGIN_TOP + plot_h
        ));
        svg.push_str(&format!(
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + plot_h + 18.0,
            tick_label(t)
        ));
        svg.push('\n');
    }
    for t in ticks(y_lo, y_hi) {
        let y = sy(t);
        svg.push_str(&format!(
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            MARGIN_LEFT,
            MARGIN_LEFT + plot_w
        ));
        svg.push_str(&format!(
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            y + 4.0,
            tick_label(t)
        ));
        svg.push('\n');
    }
    svg.push_str(&format!(
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#333"/>"##
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        esc(x_label)
    ));
    svg.push('\n');
    svg.push_str(&format!(
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        esc(y_label)
    ));
    svg.push('\n');

    for (ix, s) in series.iter().enumerate() {
        let color = PALETTE[ix % PALETTE.len()];
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            svg.push_str(&format!(
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            ));
        } else {
            let path: Vec<String> =
                s.points.iter().map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y))).collect();
            svg.push_str(&format!(
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                path.join(" ")
            ));
        }
        svg.push('\n');
        let ly = MARGIN_TOP + 14.0 + ix as f64 * 16.0;
        let lx = MARGIN_LEFT + plot_w - 150.0;
        svg.push_str(&format!(
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        ));
        svg.push_str(&format!(
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            esc(&s.label)
        ));
        svg.push('\n');
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_series_and_labels() {
        let svg = line_chart(
            "Fitness",
            "generation",
            "perplexity",
            &[
                Series {
                    label: "with init".to_string(),
                    points: vec![(0.0, 8.0), (1.0, 7.5), (2.0, 7.2)],
                },
                Series { label: "random".to_string(), points: vec![(0.0, 8.4), (2.0, 7.4)] },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("with init"));
        assert!(svg.contains("random"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("generation"));
    }

    #[test]
    fn degenerate_ranges_do_not_divide_by_zero() {
        let svg = line_chart(
            "Flat",
            "x",
            "y",
            &[Series { label: "flat".to_string(), points: vec![(1.0, 3.0), (2.0, 3.0)] }],
        );
        assert!(svg.contains("polyline"));
        let single = line_chart(
            "Point",
            "x",
            "y",
            &[Series { label: "one".to_string(), points: vec![(1.0, 3.0)] }],
        );
        assert!(single.contains("circle"));
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(2.5), "2.5");
        assert_eq!(tick_label(100.0), "100");
        assert!(tick_label(1.0e-7).contains('e'));
    }
}
