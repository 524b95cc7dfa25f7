//! Static SVG figures: segment timelines and per-epoch curves.

use std::fmt::Write;

use smcnca::eval::segments_from_labels;

const WIDTH: f64 = 800.0;
const ROW: f64 = 28.0;
const GAP: f64 = 6.0;
const LABEL_W: f64 = 48.0;

/// Fixed colour for a class id: hues step by the golden angle so neighbouring ids differ.
pub fn class_color(id: usize) -> String {
    let hue = (id as f64 * 137.507_764_050_037_85) % 360.0;
    let (r, g, b) = hsl_to_rgb(hue, 0.65, 0.55);
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> (u8, u8, u8) {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    (to(r), to(g), to(b))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn band(out: &mut String, row: &str, labels: &[usize], y: f64, names: &[String]) {
    let t = labels.len().max(1) as f64;
    let scale = (WIDTH - LABEL_W) / t;
    writeln!(out, r#"  <g class="{row}">"#).unwrap();
    writeln!(out, r#"    <text x="0" y="{:.1}" font-size="12">{row}</text>"#, y + ROW * 0.65).unwrap();
    for s in segments_from_labels(labels).segments {
        let name = names.get(s.label).map(String::as_str).unwrap_or("?");
        writeln!(
            out,
            r#"    <rect x="{:.3}" y="{y:.1}" width="{:.3}" height="{ROW}" fill="{}"><title>{} [{}, {})</title></rect>"#,
            LABEL_W + s.start as f64 * scale,
            (s.end - s.start) as f64 * scale,
            class_color(s.label),
            escape(name),
            s.start,
            s.end
        )
        .unwrap();
    }
    writeln!(out, "  </g>").unwrap();
}

/// Two colour bands, ground truth above prediction, one rect per segment.
pub fn timeline_svg(title: &str, gt: &[usize], pred: &[usize], names: &[String]) -> String {
    let height = 20.0 + 2.0 * ROW + GAP;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    )
    .unwrap();
    writeln!(out, r#"  <text x="0" y="13" font-size="13">{}</text>"#, escape(title)).unwrap();
    band(&mut out, "gt", gt, 18.0, names);
    band(&mut out, "pred", pred, 18.0 + ROW + GAP, names);
    out.push_str("</svg>\n");
    out
}

/// Line chart with one point per epoch for each named series. Series share the x axis;
/// each is scaled to its own range.
pub fn curve_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (WIDTH, 320.0, 36.0);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-epochs="{n}">"#
    )
    .unwrap();
    writeln!(out, r#"  <text x="{pad}" y="20" font-size="13">{}</text>"#, escape(title)).unwrap();
    writeln!(
        out,
        r#"  <line x1="{pad}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#,
        h - pad,
        w - pad
    )
    .unwrap();
    let x_at = |i: usize| {
        if n <= 1 {
            pad
        } else {
            pad + i as f64 * (w - 2.0 * pad) / (n - 1) as f64
        }
    };
    for (k, (name, values)) in series.iter().enumerate() {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", x_at(i), h - pad - (v - lo) / span * (h - 2.0 * pad - 16.0)))
            .collect();
        writeln!(
            out,
            r#"  <polyline class="series" data-name="{}" data-points="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            values.len(),
            class_color(k),
            points.join(" ")
        )
        .unwrap();
        writeln!(
            out,
            r#"  <text x="{:.1}" y="{:.1}" font-size="11" fill="{}">{}</text>"#,
            w - pad - 120.0,
            36.0 + 14.0 * k as f64,
            class_color(k),
            escape(name)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("a{i}")).collect()
    }

    #[test]
    fn two_segments_two_rects_per_row() {
        let gt = [0, 0, 0, 1, 1];
        let pred = [2, 2, 1, 1, 1];
        let svg = timeline_svg("v", &gt, &pred, &names(3));
        let gt_block = svg.split(r#"<g class="gt">"#).nth(1).unwrap().split("</g>").next().unwrap();
        let pred_block = svg.split(r#"<g class="pred">"#).nth(1).unwrap().split("</g>").next().unwrap();
        assert_eq!(gt_block.matches("<rect").count(), 2);
        assert_eq!(pred_block.matches("<rect").count(), 2);
        assert!(gt_block.contains(&class_color(1)) && pred_block.contains(&class_color(2)));
    }

    #[test]
    fn colors_are_stable_and_distinct() {
        assert_eq!(class_color(3), class_color(3));
        let all: Vec<String> = (0..19).map(class_color).collect();
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 19);
        assert!(all.iter().all(|c| c.len() == 7 && c.starts_with('#')));
    }

    #[test]
    fn curve_has_one_point_per_epoch() {
        let svg = curve_svg("loss", &[("l_total".into(), vec![3.0, 2.0, 1.5, 1.2])]);
        assert!(svg.contains(r#"data-epochs="4""#));
        let pts = svg.split(r#" points=""#).nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 4);
    }
}
