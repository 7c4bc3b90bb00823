use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="18" y="{y}" text-anchor="middle" transform="rotate(-90 18 {y})">{}</text>"#,
        escape(y_label),
        y = TOP + (HEIGHT - TOP - BOTTOM) / 2.0,
    );
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn new(values: impl Iterator<Item = f64>) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn px(ax: &Axis, x: f64) -> f64 {
    LEFT + ax.frac(x) * (WIDTH - LEFT - RIGHT)
}

fn py(ay: &Axis, y: f64) -> f64 {
    HEIGHT - BOTTOM - ay.frac(y) * (HEIGHT - TOP - BOTTOM)
}

fn frame(out: &mut String, ax: Option<&Axis>, ay: &Axis) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
    let _ = writeln!(
        out,
        r#"<polyline points="{x0},{y0} {x0},{y1} {x1},{y1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = ay.lo + (ay.hi - ay.lo) * k as f64 / 4.0;
        let y = py(ay, v);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            tick(v)
        );
        if let Some(ax) = ax {
            let v = ax.lo + (ax.hi - ax.lo) * k as f64 / 4.0;
            let x = px(ax, v);
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{y1}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y1 + 5.0,
                y1 + 20.0,
                tick(v)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (k, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * k as f64;
        let x = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            COLORS[k % COLORS.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

/// Line chart with one polyline per named series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    let ax = Axis::new(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let ay = Axis::new(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    frame(&mut out, Some(&ax), &ay);
    for (k, (_, points)) in series.iter().enumerate() {
        let pts: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(&ax, x), py(&ay, y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            pts.join(" "),
            COLORS[k % COLORS.len()]
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Bar chart with one bar per `(label, value)`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title, "", y_label);
    let ay = Axis::new(bars.iter().map(|b| b.1).chain([0.0]));
    frame(&mut out, None, &ay);
    let slot = (WIDTH - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (k, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * k as f64 + slot * 0.15;
        let (y0, y1) = (py(&ay, 0.0), py(&ay, *v));
        let _ = writeln!(
            out,
            r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/><text x="{:.2}" y="{}" text-anchor="middle" font-size="10">{}</text>"#,
            y0.min(y1),
            slot * 0.7,
            (y0 - y1).abs(),
            COLORS[k % COLORS.len()],
            x + slot * 0.35,
            HEIGHT - BOTTOM + 15.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let line = line_chart(
            "a < b",
            "x",
            "y",
            &[("s&1".into(), vec![(0.0, 0.5), (0.1, 0.9)]), ("flat".into(), vec![(0.0, 1.0)])],
        );
        assert!(line.contains(r#"viewBox="0 0 800 500""#));
        assert!(line.contains("a &lt; b") && line.contains("s&amp;1"));
        assert_eq!(line.matches("<polyline").count(), 3);
        let bars = bar_chart("epochs", "epochs", &[("none".into(), 100.0), ("sh".into(), 30.0)]);
        assert_eq!(bars.matches("<rect").count(), 3);
        assert!(bars.ends_with("</svg>\n"));
    }

    #[test]
    fn degenerate_axes_do_not_divide_by_zero() {
        let s = line_chart("t", "x", "y", &[("one".into(), vec![(0.1, 1.0)])]);
        assert!(!s.contains("NaN") && !s.contains("inf"));
    }
}
