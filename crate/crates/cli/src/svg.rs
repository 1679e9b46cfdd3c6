//! Overlaid ID/OOD score histograms as a standalone SVG.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn density(values: &[f64], lo: f64, width: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize
        } else {
            0
        };
        counts[b] += 1.0;
    }
    let n = values.len().max(1) as f64;
    counts.iter_mut().for_each(|c| *c /= n);
    counts
}

/// Renders both score sets over a shared range; bar heights are per-set
/// fractions so unequal set sizes stay comparable.
pub fn histogram_svg(title: &str, id: &[f64], ood: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let all = id.iter().chain(ood).copied();
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let span = hi - lo;
    let hid = density(id, lo, span, bins);
    let hood = density(ood, lo, span, bins);
    let peak = hid.iter().chain(&hood).copied().fold(0.0, f64::max).max(1e-12);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / bins as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, "<title>{}</title>", escape(title));
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    for (counts, color, name) in [(&hid, "#1f77b4", "id"), (&hood, "#d62728", "ood")] {
        let _ = writeln!(s, r#"<g class="{name}" fill="{color}" fill-opacity="0.5">"#);
        for (b, &c) in counts.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            let h = c / peak * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/>"#,
                MARGIN + b as f64 * bar_w,
                HEIGHT - MARGIN - h,
                bar_w,
                h
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let axis_y = HEIGHT - MARGIN;
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="black"/>"#,
        WIDTH - MARGIN
    );
    for (x, v, anchor) in [(MARGIN, lo, "start"), (WIDTH - MARGIN, hi, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{v:.4}</text>"#,
            axis_y + 16.0
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="#1f77b4">ID (n={})</text>"##,
        WIDTH - MARGIN - 120.0,
        MARGIN + 4.0,
        id.len()
    );
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="#d62728">OOD (n={})</text>"##,
        WIDTH - MARGIN - 120.0,
        MARGIN + 20.0,
        ood.len()
    );
    s.push_str("</svg>\n");
    s
}
