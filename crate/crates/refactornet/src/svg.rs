//! Minimal static SVG charts. Output depends only on the input numbers.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        W / 2.0,
        escape(title)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(out: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64), xlabel: &str) {
    let (l, r, t, b) = (PAD, W - PAD / 2.0, PAD, H - PAD);
    let _ = writeln!(out, "<path d=\"M{l} {t}V{b}H{r}\" fill=\"none\" stroke=\"black\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{l}\" y=\"{}\" text-anchor=\"middle\">{x0:.3}</text>",
        b + 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{r}\" y=\"{}\" text-anchor=\"middle\">{x1:.3}</text>",
        b + 14.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (l + r) / 2.0,
        b + 30.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{b}\" text-anchor=\"end\">{y0:.3}</text>",
        l - 4.0
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>",
        l - 4.0,
        t + 4.0
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = PAD + 14.0 * i as f64;
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            W - 150.0,
            y,
            COLORS[i % COLORS.len()],
            W - 136.0,
            y + 9.0,
            escape(name)
        );
    }
}

/// Line chart of each `(name, ys)` series against the shared `xs`.
pub fn line_chart(title: &str, xlabel: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let xr = range(xs.iter().copied());
    let yr = range(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    axes(&mut out, xr, yr, xlabel);
    let px = |x: f64| PAD + (x - xr.0) / (xr.1 - xr.0) * (W - 1.5 * PAD);
    let py = |y: f64| H - PAD - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * PAD);
    for (i, (_, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
            COLORS[i % COLORS.len()],
            pts.join(" ")
        );
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Vertical bars, one per `(label, value)`.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-12);
    axes(&mut out, (0.0, bars.len() as f64), (0.0, hi), "");
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v.max(0.0) / hi * (H - 2.0 * PAD);
        let x = PAD + slot * (i as f64 + 0.15);
        let _ = writeln!(
            out,
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
            H - PAD - h,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{} ({v:.4})</text>",
            x + slot * 0.35,
            H - PAD - h - 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
