//! SVG rendering of threshold sweeps.

use std::fmt::Write;

use crate::metrics::MetricReport;

const W: f64 = 360.0;
const H: f64 = 240.0;
const MARGIN: f64 = 44.0;

fn panel(out: &mut String, x0: f64, title: &str, xs: &[f64], ys: &[f64], best: usize, colour: &str) {
    let ymax = ys.iter().copied().fold(0.0f64, f64::max).max(1e-9);
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    let px = |t: f64| x0 + MARGIN + t * pw;
    let py = |v: f64| MARGIN + ph - v / ymax * ph;
    let _ = writeln!(out, r#"<g font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="13">{title}</text>"#, x0 + W / 2.0);
    let _ = writeln!(
        out,
        r#"<rect x="{:.1}" y="{MARGIN:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#,
        x0 + MARGIN
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let _ =
            writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t:.2}</text>"#, px(t), H - MARGIN + 14.0);
        let v = ymax * t;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            x0 + MARGIN - 4.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">threshold</text>"#, x0 + W / 2.0, H - 8.0);
    let pts: Vec<String> = xs.iter().zip(ys).map(|(&t, &v)| format!("{:.2},{:.2}", px(t), py(v))).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
    if let (Some(&t), Some(&v)) = (xs.get(best), ys.get(best)) {
        let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{colour}"/>"#, px(t), py(v));
    }
    let _ = writeln!(out, "</g>");
}

/// Two panels: mean IoU and mean HD95 against the threshold, with the
/// best threshold marked. `meta` pairs are written into a comment.
pub fn sweep_svg(report: &MetricReport, meta: &[(&str, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" viewBox="0 0 {} {H}">"#,
        2.0 * W,
        2.0 * W
    );
    for (k, v) in meta {
        let _ = writeln!(out, "<!-- {k}: {v} -->");
    }
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let iou = &report.iou_sweep;
    let hd = &report.hd95_sweep;
    panel(
        &mut out,
        0.0,
        &format!("IoU (max {:.3}, AIU {:.3})", report.iou_max, report.aiu),
        &iou.thresholds,
        &iou.values,
        iou.argmax(),
        "#1f77b4",
    );
    panel(
        &mut out,
        W,
        &format!("HD95 (min {:.2}, AHD95 {:.2})", report.hd95_min, report.ahd95),
        &hd.thresholds,
        &hd.values,
        hd.argmin(),
        "#d62728",
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{BinaryMask, ProbabilityMap};
    use crate::metrics::{default_thresholds, RestorationPairs};

    #[test]
    fn svg_has_both_curves_and_metadata() {
        let gt = BinaryMask::from_fn(8, 8, |y, _| y == 3);
        let p = ProbabilityMap::new(8, 8, (0..64).map(|i| if i / 8 == 3 { 0.8 } else { 0.1 }).collect()).unwrap();
        let r = MetricReport::compute(&["a".into()], &[p], &[gt], &default_thresholds(), &RestorationPairs::default())
            .unwrap();
        let svg = sweep_svg(&r, &[("config_hash", "abc".into())]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("config_hash: abc"));
        assert_eq!(svg, sweep_svg(&r, &[("config_hash", "abc".into())]));
    }
}
