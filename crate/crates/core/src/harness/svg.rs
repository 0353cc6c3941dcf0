//! Self-contained SVG charts. Output depends only on the input rows, and
//! every coordinate is printed with fixed precision so files diff cleanly.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::report::{CorruptionRow, FeaturePoint, MetricsRow};
use crate::error::{Error, Result};

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#ad494a", "#637939", "#8c6d31", "#843c39", "#7b4173",
    "#3182bd", "#e6550d", "#31a354", "#756bb1",
];

const W: f64 = 560.0;
const H: f64 = 380.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 50.0); // left, right, top, bottom

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(out: &mut String, width: f64, height: f64, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

/// Linear map from data range to a pixel interval.
#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Scale {
    fn new(lo: f64, hi: f64, from: f64, to: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Scale { lo, hi, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

/// Draws both axes. `xticks` lists the x tick values; `ticks` evenly spaced
/// ones are used on y.
fn axes(out: &mut String, x: Scale, y: Scale, xlabel: &str, ylabel: &str, xticks: &[f64], ticks: usize) {
    let _ = writeln!(
        out,
        r#"<g stroke="black" fill="none"><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/></g>"#,
        x.from, y.from, x.to, y.from, x.from, y.from, x.from, y.to
    );
    for &xv in xticks {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x.map(xv),
            y.from + 16.0,
            tick_label(xv)
        );
    }
    for i in 0..=ticks {
        let yv = y.lo + i as f64 / ticks as f64 * (y.hi - y.lo);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x.from - 6.0,
            y.map(yv) + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x.from + x.to) / 2.0,
        y.from + 36.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (y.from + y.to) / 2.0,
        (y.from + y.to) / 2.0,
        escape(ylabel)
    );
}

fn tick_label(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{:.0}", v)
    } else {
        format!("{:.2}", v)
    }
}

/// Accuracy (all seen classes, in percent) against the number of seen
/// classes, one line per run id, averaged over seeds.
pub fn curve(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Format("curve needs at least one metrics row".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut series: BTreeMap<&str, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        if !order.contains(&r.run_id.as_str()) {
            order.push(&r.run_id);
        }
        let e = series
            .entry(&r.run_id)
            .or_default()
            .entry(r.metrics.n_seen_classes)
            .or_insert((0.0, 0));
        e.0 += 100.0 * r.metrics.acc_all_seen;
        e.1 += 1;
    }
    let xs: Vec<usize> = rows.iter().map(|r| r.metrics.n_seen_classes).collect();
    let (xmin, xmax) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
    let (l, r, t, b) = MARGIN;
    let x = Scale::new(xmin as f64, xmax as f64, l, W - r - 110.0);
    let y = Scale::new(0.0, 100.0, H - b, t);
    let mut out = String::new();
    open(&mut out, W, H, "Accuracy on all seen classes");
    let mut xticks: Vec<f64> = xs.iter().map(|&n| n as f64).collect();
    xticks.sort_by(f64::total_cmp);
    xticks.dedup();
    axes(&mut out, x, y, "number of classes", "accuracy (%)", &xticks, 5);
    for (i, id) in order.iter().enumerate() {
        let pts: Vec<(f64, f64)> = series[id]
            .iter()
            .map(|(&n, &(sum, c))| (x.map(n as f64), y.map(sum / c as f64)))
            .collect();
        let c = color(i);
        if pts.len() > 1 {
            let path: Vec<String> = pts.iter().map(|(px, py)| format!("{px:.1},{py:.1}")).collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
                path.join(" ")
            );
        }
        for (px, py) in &pts {
            let _ = writeln!(out, r#"<circle cx="{px:.1}" cy="{py:.1}" r="3" fill="{c}"/>"#);
        }
        let ly = t + 14.0 + 16.0 * i as f64;
        let lx = W - r - 100.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{c}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            lx + 14.0,
            escape(id)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Two-dimensional features, one panel per stage, colored by label.
pub fn scatter2d(points: &[FeaturePoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::Format("scatter needs at least one feature row".into()));
    }
    let mut stages: Vec<usize> = points.iter().map(|p| p.stage).collect();
    stages.sort_unstable();
    stages.dedup();
    let mut labels: Vec<usize> = points.iter().map(|p| p.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let panel = 260.0;
    let pad = 20.0;
    let width = pad + stages.len() as f64 * (panel + pad);
    let height = panel + 70.0;
    let mut out = String::new();
    open(&mut out, width, height, "Feature space by stage");
    for (si, &stage) in stages.iter().enumerate() {
        let pts: Vec<&FeaturePoint> = points.iter().filter(|p| p.stage == stage).collect();
        let fold = |f: fn(&FeaturePoint) -> f64| {
            pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(f(p)), hi.max(f(p)))
            })
        };
        let (x0, x1) = fold(|p| p.x);
        let (y0, y1) = fold(|p| p.y);
        let left = pad + si as f64 * (panel + pad);
        let top = 40.0;
        let x = Scale::new(x0, x1, left + 4.0, left + panel - 4.0);
        let y = Scale::new(y0, y1, top + panel - 4.0, top + 4.0);
        let _ = writeln!(
            out,
            r##"<rect x="{left:.1}" y="{top:.1}" width="{panel:.0}" height="{panel:.0}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">stage {stage}</text>"#,
            left + panel / 2.0,
            top + panel + 18.0
        );
        for p in pts {
            let li = labels.binary_search(&p.label).expect("label collected");
            let _ = writeln!(
                out,
                r#"<circle cx="{:.1}" cy="{:.1}" r="1.8" fill="{}" fill-opacity="0.7"/>"#,
                x.map(p.x),
                y.map(p.y),
                color(li)
            );
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Accuracy under each corruption (mean over seeds), grouped by run id.
pub fn corruption_bars(rows: &[CorruptionRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Format("bar chart needs at least one corruption row".into()));
    }
    let mut kinds: Vec<&str> = Vec::new();
    let mut runs: Vec<&str> = Vec::new();
    let mut acc: BTreeMap<(&str, &str), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if !kinds.contains(&r.corruption.as_str()) {
            kinds.push(&r.corruption);
        }
        if !runs.contains(&r.run_id.as_str()) {
            runs.push(&r.run_id);
        }
        let e = acc.entry((&r.run_id, &r.corruption)).or_insert((0.0, 0));
        e.0 += 100.0 * r.accuracy;
        e.1 += 1;
    }
    let (l, r, t, b) = MARGIN;
    let y = Scale::new(0.0, 100.0, H - b, t);
    let x = Scale::new(0.0, kinds.len() as f64, l, W - r - 110.0);
    let mut out = String::new();
    open(&mut out, W, H, "Accuracy under corruption");
    let _ = writeln!(
        out,
        r#"<g stroke="black"><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/></g>"#,
        x.from, y.from, x.to, y.from, x.from, y.from, x.from, y.to
    );
    for i in 0..=5 {
        let v = 20.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#,
            x.from - 6.0,
            y.map(v) + 4.0
        );
    }
    let group = x.map(1.0) - x.map(0.0);
    let bar = 0.8 * group / runs.len() as f64;
    for (ki, kind) in kinds.iter().enumerate() {
        let gx = x.map(ki as f64) + 0.1 * group;
        for (ri, run) in runs.iter().enumerate() {
            if let Some(&(sum, n)) = acc.get(&(*run, *kind)) {
                let v = sum / n as f64;
                let _ = writeln!(
                    out,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar:.1}" height="{:.1}" fill="{}"/>"#,
                    gx + ri as f64 * bar,
                    y.map(v),
                    y.from - y.map(v),
                    color(ri)
                );
            }
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x.map(ki as f64 + 0.5),
            y.from + 16.0,
            escape(kind)
        );
    }
    for (ri, run) in runs.iter().enumerate() {
        let ly = t + 14.0 + 16.0 * ri as f64;
        let lx = W - r - 100.0;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            color(ri),
            lx + 14.0,
            escape(run)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::StageMetrics;

    fn metrics(stage: usize, acc: f64) -> MetricsRow {
        MetricsRow {
            run_id: "r".into(),
            seed: 1,
            metrics: StageMetrics {
                stage,
                n_seen_classes: 2 * stage,
                acc_all_seen: acc,
                acc_new_task: acc,
                acc_old_classes: None,
                average_accuracy: acc,
                forgetting: None,
                forgetting_clamped: None,
                ece: 0.0,
            },
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn single_point_curve_renders() {
        let s = curve(&[metrics(1, 0.5)]).unwrap();
        assert!(s.starts_with("<svg"));
        assert_eq!(s.matches("<circle").count(), 1);
        assert!(!s.contains("<polyline"));
        assert_eq!(s, curve(&[metrics(1, 0.5)]).unwrap());
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(curve(&[]).is_err());
        assert!(scatter2d(&[]).is_err());
        assert!(corruption_bars(&[]).is_err());
    }

    #[test]
    fn scatter_panels_per_stage() {
        let pts: Vec<FeaturePoint> = (0..6)
            .map(|i| FeaturePoint {
                x: i as f64,
                y: -(i as f64),
                label: i % 2,
                stage: 1 + i / 3,
            })
            .collect();
        let s = scatter2d(&pts).unwrap();
        assert_eq!(s.matches("<circle").count(), 6);
        assert!(s.contains("stage 1") && s.contains("stage 2"));
    }
}
