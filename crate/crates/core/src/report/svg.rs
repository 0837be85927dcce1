//! Self-contained SVG 1.1 charts. Output bytes depend only on the inputs.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::aggregate::AggregateReport;

use super::curve::{CurveRow, CurveTable};

const WIDTH: f64 = 820.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

type Accessor = fn(&CurveRow) -> Option<f64>;

/// Legend label, colour, and column of each curve.
pub const SERIES: [(&str, &str, Accessor); 6] = [
    ("learned", "#d62728", |r| Some(r.v_learned)),
    ("learned-greedy", "#ff7f0e", |r| r.v_learned_greedy),
    ("best-single", "#1f77b4", |r| Some(r.v_best_single)),
    ("top5-ever", "#2ca02c", |r| Some(r.v_top5_ever)),
    ("top5-recent", "#9467bd", |r| Some(r.v_top5_recent)),
    ("initial", "#7f7f7f", |r| Some(r.v_initial)),
];

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".to_string()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, px_lo: f64, px_hi: f64) -> Self {
        let (lo, hi) = if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        Self { lo, hi, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / n as f64)
            .collect()
    }
}

fn open(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>
<text x="{cx}" y="22" text-anchor="middle" font-size="15">{title}</text>"#,
        w = WIDTH,
        h = HEIGHT,
        cx = num((LEFT + WIDTH - RIGHT) / 2.0),
        title = escape(title),
    );
}

fn axes(svg: &mut String, x: &Scale, y: &Scale, x_label: &str, y_label: &str, x_ticks: bool) {
    let x0 = LEFT;
    let x1 = WIDTH - RIGHT;
    let y0 = HEIGHT - BOTTOM;
    let _ = writeln!(
        svg,
        r#"<line x1="{a}" y1="{b}" x2="{c}" y2="{b}" stroke="black"/>
<line x1="{a}" y1="{d}" x2="{a}" y2="{b}" stroke="black"/>"#,
        a = num(x0),
        b = num(y0),
        c = num(x1),
        d = num(TOP),
    );
    for t in y.ticks(5) {
        let py = num(y.map(t));
        let _ = writeln!(
            svg,
            r##"<line x1="{a}" y1="{py}" x2="{c}" y2="{py}" stroke="#e0e0e0"/>
<text x="{lx}" y="{py}" text-anchor="end" dominant-baseline="middle">{label}</text>"##,
            a = num(x0),
            c = num(x1),
            lx = num(x0 - 6.0),
            label = format_tick(t),
        );
    }
    if x_ticks {
        for t in x.ticks(5) {
            let px = num(x.map(t));
            let _ = writeln!(
                svg,
                r#"<line x1="{px}" y1="{a}" x2="{px}" y2="{b}" stroke="black"/>
<text x="{px}" y="{ly}" text-anchor="middle">{label}</text>"#,
                a = num(y0),
                b = num(y0 + 5.0),
                ly = num(y0 + 18.0),
                label = format_tick(t),
            );
        }
    }
    let _ = writeln!(
        svg,
        r#"<text x="{cx}" y="{ly}" text-anchor="middle">{x_label}</text>
<text x="16" y="{cy}" text-anchor="middle" transform="rotate(-90 16 {cy})">{y_label}</text>"#,
        cx = num((x0 + x1) / 2.0),
        ly = num(HEIGHT - 12.0),
        cy = num((TOP + y0) / 2.0),
        x_label = escape(x_label),
        y_label = escape(y_label),
    );
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        num(v)
    }
}

/// Mean, min and max of one curve across seeds at one global step.
struct Band {
    step: f64,
    mean: f64,
    min: f64,
    max: f64,
}

/// Line chart of the six estimator curves: the mean across seeds as a line,
/// the min-max range across seeds as a shaded band, a marker at every point.
pub fn curve_chart(table: &CurveTable, title: &str) -> Option<String> {
    if table.is_empty() {
        return None;
    }
    let mut by_step: BTreeMap<u64, Vec<&CurveRow>> = BTreeMap::new();
    for r in table.rows() {
        by_step.entry(r.global_step).or_default().push(r);
    }

    let bands: Vec<Vec<Band>> = SERIES
        .iter()
        .map(|(_, _, get)| {
            by_step
                .iter()
                .filter_map(|(step, rows)| {
                    let vals: Vec<f64> = rows.iter().filter_map(|r| get(r)).collect();
                    if vals.is_empty() {
                        return None;
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    Some(Band {
                        step: *step as f64,
                        mean,
                        min: vals.iter().copied().fold(f64::INFINITY, f64::min),
                        max: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    })
                })
                .collect()
        })
        .collect();

    let all = bands.iter().flatten();
    let y_lo = all.clone().map(|b| b.min).fold(f64::INFINITY, f64::min);
    let y_hi = all.map(|b| b.max).fold(f64::NEG_INFINITY, f64::max);
    let x_lo = *by_step.keys().next()? as f64;
    let x_hi = *by_step.keys().next_back()? as f64;
    let x = Scale::new(x_lo, x_hi, LEFT, WIDTH - RIGHT);
    let y = Scale::new(y_lo, y_hi, HEIGHT - BOTTOM, TOP);

    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, &x, &y, "global step", "return", true);

    for ((label, colour, _), series) in SERIES.iter().zip(&bands) {
        if series.is_empty() {
            continue;
        }
        let _ = writeln!(svg, r#"<g class="series" data-label="{label}">"#);
        if series.len() > 1 {
            let upper = series
                .iter()
                .map(|b| format!("{},{}", num(x.map(b.step)), num(y.map(b.max))));
            let lower = series
                .iter()
                .rev()
                .map(|b| format!("{},{}", num(x.map(b.step)), num(y.map(b.min))));
            let pts: Vec<String> = upper.chain(lower).collect();
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{colour}" fill-opacity="0.15" stroke="none"/>"#,
                pts.join(" ")
            );
            let line: Vec<String> = series
                .iter()
                .map(|b| format!("{},{}", num(x.map(b.step)), num(y.map(b.mean))))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                line.join(" ")
            );
        }
        for b in series {
            let _ = writeln!(
                svg,
                r#"<circle cx="{}" cy="{}" r="2.5" fill="{colour}"/>"#,
                num(x.map(b.step)),
                num(y.map(b.mean))
            );
        }
        svg.push_str("</g>\n");
    }

    let lx = WIDTH - RIGHT + 15.0;
    for (i, (label, colour, _)) in SERIES.iter().enumerate() {
        let ly = TOP + 10.0 + 22.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{colour}" stroke-width="3"/>
<text x="{t}" y="{ly}" dominant-baseline="middle">{label}</text>"#,
            a = num(lx),
            b = num(lx + 22.0),
            t = num(lx + 28.0),
            ly = num(ly),
        );
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

/// Bar chart of aggregate reports with confidence-interval whiskers.
pub fn aggregate_chart(reports: &[(String, AggregateReport)], title: &str) -> Option<String> {
    if reports.is_empty() {
        return None;
    }
    let lo = reports.iter().map(|(_, r)| r.ci_low).fold(0.0, f64::min);
    let hi = reports.iter().map(|(_, r)| r.ci_high).fold(1.0, f64::max);
    let y = Scale::new(lo, hi, HEIGHT - BOTTOM, TOP);
    let n = reports.len() as f64;
    let x = Scale::new(0.0, n, LEFT, WIDTH - RIGHT);

    let mut svg = String::new();
    open(&mut svg, title);
    axes(&mut svg, &x, &y, "", "normalized practical sub-optimality", false);

    let slot = (WIDTH - RIGHT - LEFT) / n;
    let bar = slot * 0.6;
    let zero = y.map(0.0);
    for (i, (label, r)) in reports.iter().enumerate() {
        let cx = x.map(i as f64 + 0.5);
        let top = y.map(r.point_estimate);
        let (y_top, h) = if top < zero {
            (top, zero - top)
        } else {
            (zero, top - zero)
        };
        let _ = writeln!(
            svg,
            r##"<g class="bar" data-label="{label}">
<rect x="{bx}" y="{by}" width="{bw}" height="{bh}" fill="#1f77b4"/>
<line class="whisker" x1="{cx}" y1="{wl}" x2="{cx}" y2="{wh}" stroke="black" stroke-width="1.5"/>
<line x1="{c0}" y1="{wl}" x2="{c1}" y2="{wl}" stroke="black" stroke-width="1.5"/>
<line x1="{c0}" y1="{wh}" x2="{c1}" y2="{wh}" stroke="black" stroke-width="1.5"/>
<text x="{cx}" y="{ty}" text-anchor="middle">{label}</text>
<text x="{cx}" y="{vy}" text-anchor="middle" font-size="11">{value}</text>
</g>"##,
            label = escape(label),
            bx = num(cx - bar / 2.0),
            by = num(y_top),
            bw = num(bar),
            bh = num(h),
            cx = num(cx),
            c0 = num(cx - bar / 6.0),
            c1 = num(cx + bar / 6.0),
            wl = num(y.map(r.ci_low)),
            wh = num(y.map(r.ci_high)),
            ty = num(HEIGHT - BOTTOM + 18.0),
            vy = num(y.map(r.ci_high) - 6.0),
            value = num(r.point_estimate),
        );
    }
    svg.push_str("</svg>\n");
    Some(svg)
}
