//! Deterministic SVG rendering: grid heatmaps for accessibility maps and
//! line plots with confidence bands for effect curves.

use std::fmt::Write;

use commute_core::kre::AccessibilityMap;
use commute_core::outcome::EffectCurve;

/// Anchors of a perceptually-ordered ramp (viridis-like), dark to bright.
const RAMP: [(f64, f64, f64); 8] = [
    (68.0, 1.0, 84.0),
    (70.0, 50.0, 127.0),
    (54.0, 92.0, 141.0),
    (39.0, 127.0, 142.0),
    (31.0, 161.0, 135.0),
    (74.0, 194.0, 109.0),
    (159.0, 218.0, 58.0),
    (253.0, 231.0, 37.0),
];

fn ramp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let mix = |a: f64, b: f64| (a + f * (b - a)).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(RAMP[i].0, RAMP[i + 1].0),
        mix(RAMP[i].1, RAMP[i + 1].1),
        mix(RAMP[i].2, RAMP[i + 1].2)
    )
}

/// Grid heatmap with a campus marker and a value legend.
pub fn heatmap(map: &AccessibilityMap<f64>) -> String {
    let cell = 6.0f64;
    let legend_w = 70.0;
    let width = map.nx as f64 * cell + legend_w + 20.0;
    let height = map.ny as f64 * cell + 20.0;

    let lo = map.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);

    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    );
    let _ = write!(s, "<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>\n");

    // Row 0 of the grid sits at the bottom (northing grows upward).
    for iy in 0..map.ny {
        for ix in 0..map.nx {
            let v = map.value_at(ix, iy);
            let t = (v - lo) / span;
            let x = 10.0 + ix as f64 * cell;
            let y = 10.0 + (map.ny - 1 - iy) as f64 * cell;
            let _ = write!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" fill=\"{}\"/>\n",
                ramp_color(1.0 - t)
            );
        }
    }

    // Campus marker.
    let cx = 10.0 + (map.campus.pos.x1 - map.origin.x1) / map.spacing * cell;
    let cy = 10.0 + (map.ny as f64 - 1.0 - (map.campus.pos.x2 - map.origin.x2) / map.spacing) * cell;
    let _ = write!(
        s,
        "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"6\" fill=\"none\" stroke=\"#ffffff\" stroke-width=\"2.5\"/>\n\
         <circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"2.5\" fill=\"#ffffff\"/>\n"
    );

    // Legend: stacked ramp with min/mid/max labels in minutes.
    let lx = 10.0 + map.nx as f64 * cell + 14.0;
    let lh = map.ny as f64 * cell;
    let steps = 32;
    for i in 0..steps {
        let t = i as f64 / (steps - 1) as f64;
        let y = 10.0 + lh * (1.0 - t) - lh / steps as f64 / 2.0;
        let _ = write!(
            s,
            "<rect x=\"{lx:.1}\" y=\"{y:.1}\" width=\"14\" height=\"{:.2}\" fill=\"{}\"/>\n",
            lh / steps as f64 + 0.5,
            ramp_color(1.0 - t)
        );
    }
    for (t, label) in [(0.0, lo), (0.5, lo + span / 2.0), (1.0, hi)] {
        let y = 10.0 + lh * (1.0 - t);
        let _ = write!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\">{label:.1} min</text>\n",
            lx + 18.0,
            y + 3.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Overlayed effect curves: the reference (unweighted) in grey, the
/// weighted one in orange, both with translucent confidence bands.
pub fn curves(title: &str, reference: &EffectCurve, weighted: Option<&EffectCurve>) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 36.0, 44.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;

    let mut xs = reference.grid.clone();
    let mut ys: Vec<f64> = reference.lo.iter().chain(&reference.hi).cloned().collect();
    if let Some(c) = weighted {
        xs.extend_from_slice(&c.grid);
        ys.extend(c.lo.iter().chain(&c.hi).cloned());
    }
    ys.push(0.0);
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_span = (x_hi - x_lo).max(1e-12);
    let y_span = (y_hi - y_lo).max(1e-12);

    let px = |x: f64| ml + (x - x_lo) / x_span * pw;
    let py = |y: f64| mt + (1.0 - (y - y_lo) / y_span) * ph;

    let band_path = |c: &EffectCurve| -> String {
        let mut d = String::new();
        for (i, (&x, &v)) in c.grid.iter().zip(&c.hi).enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(v));
        }
        for (&x, &v) in c.grid.iter().rev().zip(c.lo.iter().rev()) {
            let _ = write!(d, "L{:.2},{:.2} ", px(x), py(v));
        }
        d.push('Z');
        d
    };
    let line_path = |c: &EffectCurve| -> String {
        let mut d = String::new();
        for (i, (&x, &v)) in c.grid.iter().zip(&c.estimate).enumerate() {
            let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(v));
        }
        d
    };

    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
         viewBox=\"0 0 {w:.0} {h:.0}\">\n<rect width=\"{w:.0}\" height=\"{h:.0}\" fill=\"#ffffff\"/>\n"
    );
    let _ = write!(
        s,
        "<text x=\"{:.1}\" y=\"22\" font-size=\"14\" font-family=\"sans-serif\">{title}</text>\n",
        ml
    );

    // Axes, zero line, and x ticks in minutes.
    let _ = write!(
        s,
        "<line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#333333\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = write!(
        s,
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{:.1}\" stroke=\"#333333\"/>\n",
        mt + ph
    );
    if y_lo < 0.0 && y_hi > 0.0 {
        let _ = write!(
            s,
            "<line x1=\"{ml}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n",
            py(0.0),
            ml + pw,
            py(0.0)
        );
    }
    for i in 0..=4 {
        let x = x_lo + x_span * f64::from(i) / 4.0;
        let _ = write!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"middle\">{:.0} min</text>\n",
            px(x),
            mt + ph + 16.0,
            x * 60.0
        );
        let y = y_lo + y_span * f64::from(i) / 4.0;
        let _ = write!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" font-family=\"sans-serif\" text-anchor=\"end\">{y:.2}</text>\n",
            ml - 6.0,
            py(y) + 3.0
        );
    }

    let _ = write!(
        s,
        "<path d=\"{}\" fill=\"#bbbbbb\" fill-opacity=\"0.35\"/>\n<path d=\"{}\" fill=\"none\" stroke=\"#777777\" stroke-width=\"1.8\"/>\n",
        band_path(reference),
        line_path(reference)
    );
    if let Some(c) = weighted {
        let _ = write!(
            s,
            "<path d=\"{}\" fill=\"#ff9933\" fill-opacity=\"0.30\"/>\n<path d=\"{}\" fill=\"none\" stroke=\"#e07820\" stroke-width=\"1.8\"/>\n",
            band_path(c),
            line_path(c)
        );
    }
    let _ = write!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#777777\">unweighted</text>\n",
        ml + pw - 150.0,
        mt + 14.0
    );
    if weighted.is_some() {
        let _ = write!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#e07820\">weighted</text>\n",
            ml + pw - 150.0,
            mt + 28.0
        );
    }
    s.push_str("</svg>\n");
    s
}
