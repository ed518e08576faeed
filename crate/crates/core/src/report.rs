//! Standalone SVG box plots of c-MSE per method group.

use std::fmt::Write as _;

use crate::eval::{fmt_f64, quantile, EvalRecord};
use crate::scm::Experiment;

const WIDTH_PER_BOX: f64 = 90.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 70.0;

struct BoxStats {
    label: String,
    min: f64,
    q1: f64,
    median: f64,
    q3: f64,
    max: f64,
    count: usize,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn group_label(r: &EvalRecord) -> String {
    match r.noise {
        Some(n) => format!(
            "{} n={} z={} w={}",
            r.method,
            r.n_train,
            fmt_f64(n.var_z),
            fmt_f64(n.var_w)
        ),
        None => format!("{} n={}", r.method, r.n_train),
    }
}

fn boxes(records: &[EvalRecord]) -> Vec<BoxStats> {
    let mut labels: Vec<String> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for r in records {
        let label = group_label(r);
        let slot = match labels.iter().position(|l| *l == label) {
            Some(i) => i,
            None => {
                labels.push(label);
                values.push(Vec::new());
                labels.len() - 1
            }
        };
        if let Some(c) = r.c_mse {
            values[slot].push(c);
        }
    }
    labels
        .into_iter()
        .zip(values)
        .filter(|(_, v)| !v.is_empty())
        .map(|(label, mut v)| {
            v.sort_by(f64::total_cmp);
            BoxStats {
                label,
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
                count: v.len(),
            }
        })
        .collect()
}

/// One box per (method, n, noise) group with at least one successful record:
/// quartile box, median line, whiskers at the extremes. Groups with no
/// successful fit are left out.
pub fn boxplot_svg(records: &[EvalRecord], experiment: Option<Experiment>) -> String {
    let stats = boxes(records);
    let plot_w = WIDTH_PER_BOX * stats.len().max(1) as f64;
    let total_w = MARGIN_LEFT + plot_w + 20.0;
    let total_h = MARGIN_TOP + HEIGHT + MARGIN_BOTTOM;
    let hi = stats.iter().map(|b| b.max).fold(0.0f64, f64::max);
    let hi = if hi > 0.0 { hi * 1.05 } else { 1.0 };
    let y = |v: f64| MARGIN_TOP + HEIGHT * (1.0 - v / hi);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let title = match experiment {
        Some(e) => format!("c-MSE by method ({e})"),
        None => "c-MSE by method".to_string(),
    };
    let _ = writeln!(
        s,
        r#"  <text x="{:.1}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
        total_w / 2.0,
        escape(&title)
    );
    let _ = writeln!(
        s,
        r#"  <line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" y2="{:.1}" stroke="black"/>"#,
        MARGIN_TOP + HEIGHT
    );
    for k in 0..=4 {
        let v = hi * k as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            s,
            r#"  <line x1="{:.1}" y1="{yy:.1}" x2="{MARGIN_LEFT}" y2="{yy:.1}" stroke="black"/>"#,
            MARGIN_LEFT - 4.0
        );
        let _ = writeln!(
            s,
            r#"  <text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 6.0,
            yy + 4.0,
            escape(&format!("{v:.3}"))
        );
    }
    for (i, b) in stats.iter().enumerate() {
        let cx = MARGIN_LEFT + WIDTH_PER_BOX * (i as f64 + 0.5);
        let half = WIDTH_PER_BOX * 0.3;
        let _ = writeln!(s, r#"  <g class="box">"#);
        let _ = writeln!(
            s,
            r#"    <title>{}</title>"#,
            escape(&format!(
                "{}: median {} over {} fits",
                b.label,
                fmt_f64(b.median),
                b.count
            ))
        );
        let _ = writeln!(
            s,
            r#"    <line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.max),
            y(b.q3)
        );
        let _ = writeln!(
            s,
            r#"    <line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
            y(b.q1),
            y(b.min)
        );
        for v in [b.min, b.max] {
            let _ = writeln!(
                s,
                r#"    <line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
                cx - half / 2.0,
                y(v),
                cx + half / 2.0,
                y(v)
            );
        }
        let _ = writeln!(
            s,
            r##"    <rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            r#"    <line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(b.median),
            cx + half,
            y(b.median)
        );
        let _ = writeln!(
            s,
            r#"    <text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + HEIGHT + 16.0,
            escape(&b.label)
        );
        let _ = writeln!(s, "  </g>");
    }
    s.push_str("</svg>\n");
    s
}
