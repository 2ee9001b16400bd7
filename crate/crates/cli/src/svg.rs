//! Static throughput-vs-latency scatter, frontier points highlighted.

use std::fmt::Write;

use servesim::sweep::SweepPoint;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

pub fn scatter(title: &str, points: &[SweepPoint], frontier: &[SweepPoint]) -> String {
    let (x0, x1) = range(points.iter().map(|p| p.latency_mean));
    let (y0, y1) = range(points.iter().map(|p| p.throughput_rps));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">mean latency (s): {x0:.3} to {x1:.3}</text>"#, WIDTH / 2.0, HEIGHT - 20.0);
    let _ = writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">throughput (req/s): {y0:.3} to {y1:.3}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );

    if frontier.len() > 1 {
        let path: Vec<String> = frontier
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.latency_mean), sy(p.throughput_rps)))
            .collect();
        let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="1.5"/>"##, path.join(" "));
    }
    for p in points {
        let on_frontier = frontier.iter().any(|f| f.config_label == p.config_label);
        let (fill, r) = if on_frontier { ("#d62728", 5.0) } else { ("#1f77b4", 3.5) };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}"><title>{}</title></circle>"#,
            sx(p.latency_mean),
            sy(p.throughput_rps),
            escape(&p.config_label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
