use std::fmt::Write;

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

pub struct Bar {
    pub label: String,
    pub value: f64,
}

pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    /// Series name; each distinct name gets a colour and a legend entry.
    pub class: String,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bars on a fixed `[0, 1]` axis.
pub fn bar_chart_svg(title: &str, bars: &[Bar]) -> String {
    let (w, h, left, bottom, top) = (120 + 90 * bars.len().max(1), 360, 60.0, 300.0, 40.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, w / 2, escape(title));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = bottom - v * (bottom - top);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/>"##, w - 20);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
    }
    for (i, b) in bars.iter().enumerate() {
        let x = left + 20.0 + 90.0 * i as f64;
        let v = b.value.clamp(0.0, 1.0);
        let y = bottom - v * (bottom - top);
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{y:.1}" width="60" height="{:.1}" fill="{}"/>"#,
            bottom - y,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, x + 30.0, y - 5.0, b.value);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, x + 30.0, bottom + 18.0, escape(&b.label));
    }
    let _ = writeln!(s, r#"<line x1="{left}" y1="{bottom}" x2="{}" y2="{bottom}" stroke="black"/>"#, w - 20);
    s.push_str("</svg>\n");
    s
}

/// Scatter plot scaled to the data's bounding box.
pub fn scatter_svg(title: &str, points: &[ScatterPoint]) -> String {
    let (w, h, pad) = (640.0, 520.0, 50.0);
    let mut classes: Vec<&str> = Vec::new();
    for p in points {
        if !classes.contains(&p.class.as_str()) {
            classes.push(&p.class);
        }
    }
    let fold = |f: fn(&ScatterPoint) -> f64| {
        points.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (x0, x1) = fold(|p| p.x);
    let (y0, y1) = fold(|p| p.y);
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad - 100.0);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    for p in points {
        let c = classes.iter().position(|&k| k == p.class).unwrap_or(0);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
            sx(p.x),
            sy(p.y),
            PALETTE[c % PALETTE.len()]
        );
    }
    for (i, c) in classes.iter().enumerate() {
        let y = pad + 18.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{y}" r="5" fill="{}"/>"#, w - 120.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - 110.0, y + 4.0, escape(c));
    }
    s.push_str("</svg>\n");
    s
}
