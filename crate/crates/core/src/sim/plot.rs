//! Plain SVG figures of a Monte Carlo run. Output is a pure function of the
//! replicate rows and the truth, with fixed number formatting.

use std::fmt::Write as _;

use super::mc::{Estimator, ReplicateRow, SummaryRow};
use super::TrueValues;

const PANEL_W: f64 = 300.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 50.0;
const COLORS: [(Estimator, &str); 2] = [(Estimator::Undersmoothed, "#1f77b4"), (Estimator::Cv, "#d62728")];

/// Named SVG documents.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotSet {
    pub files: Vec<(String, String)>,
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

struct Panel {
    x0: f64,
    y0: f64,
    xlim: (f64, f64),
    ylim: (f64, f64),
}

impl Panel {
    fn new(col: usize, row: usize, xlim: (f64, f64), ylim: (f64, f64)) -> Self {
        let pad = |(a, b): (f64, f64)| {
            let d = if b > a { 0.05 * (b - a) } else { 0.5 * a.abs().max(1.0) };
            (a - d, b + d)
        };
        Self {
            x0: MARGIN + col as f64 * (PANEL_W + MARGIN),
            y0: MARGIN + row as f64 * (PANEL_H + MARGIN),
            xlim: pad(xlim),
            ylim: pad(ylim),
        }
    }

    fn x(&self, v: f64) -> f64 {
        self.x0 + (v - self.xlim.0) / (self.xlim.1 - self.xlim.0) * PANEL_W
    }

    fn y(&self, v: f64) -> f64 {
        self.y0 + PANEL_H - (v - self.ylim.0) / (self.ylim.1 - self.ylim.0) * PANEL_H
    }

    fn frame(&self, svg: &mut String, title: &str, xlabels: Option<&[(f64, String)]>) {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{PANEL_W:.2}" height="{PANEL_H:.2}" fill="none" stroke="#444"/>"##,
            self.x0, self.y0
        );
        let _ = writeln!(
            svg,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{title}</text>"##,
            self.x0 + PANEL_W / 2.0,
            self.y0 - 8.0
        );
        for t in nice_ticks(self.ylim.0, self.ylim.1) {
            let y = self.y(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#444"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{}</text>"##,
                self.x0 - 4.0,
                self.x0,
                self.x0 - 6.0,
                y + 3.0,
                fmt_tick(t)
            );
        }
        let generated: Vec<(f64, String)>;
        let labels = match xlabels {
            Some(l) => l,
            None => {
                generated = nice_ticks(self.xlim.0, self.xlim.1).into_iter().map(|t| (t, fmt_tick(t))).collect();
                &generated
            }
        };
        for (t, label) in labels {
            let x = self.x(*t);
            let yb = self.y0 + PANEL_H;
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{yb:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" font-size="10">{label}</text>"##,
                yb + 4.0,
                yb + 15.0
            );
        }
    }

    fn polyline(&self, svg: &mut String, pts: &[(f64, f64)], stroke: &str, dashed: bool) {
        if pts.is_empty() {
            return;
        }
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.x(x), self.y(y))).collect();
        let dash = if dashed { r##" stroke-dasharray="6,4""## } else { "" };
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"{dash}/>"##,
            path.join(" ")
        );
    }

    fn markers(&self, svg: &mut String, pts: &[(f64, f64)], fill: &str) {
        for &(x, y) in pts {
            let _ = writeln!(svg, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{fill}"/>"##, self.x(x), self.y(y));
        }
    }
}

fn document(cols: usize, rows: usize, title: &str, body: &str) -> String {
    let w = MARGIN + cols as f64 * (PANEL_W + MARGIN);
    let h = MARGIN + rows as f64 * (PANEL_H + MARGIN) + 20.0;
    let mut legend = String::new();
    for (i, (e, c)) in COLORS.iter().enumerate() {
        let x = MARGIN + i as f64 * 140.0;
        let y = h - 22.0;
        let _ = writeln!(
            legend,
            r##"<rect x="{x:.2}" y="{:.2}" width="12" height="12" fill="{c}"/><text x="{:.2}" y="{y:.2}" font-size="11">{e}</text>"##,
            y - 10.0,
            x + 16.0
        );
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n{body}{legend}</svg>\n",
        w / 2.0
    )
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    vals.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn fix(r: (f64, f64)) -> (f64, f64) {
    if r.0.is_finite() { r } else { (0.0, 1.0) }
}

fn n_axis(summary: &[SummaryRow]) -> (Vec<usize>, Vec<(f64, String)>) {
    let mut ns: Vec<usize> = summary.iter().map(|s| s.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let labels = ns.iter().map(|&n| ((n as f64).ln(), n.to_string())).collect();
    (ns, labels)
}

fn series(summary: &[SummaryRow], e: Estimator, f: impl Fn(&SummaryRow) -> Option<f64>) -> Vec<(f64, f64)> {
    summary
        .iter()
        .filter(|s| s.estimator == e && s.replicates > 0)
        .filter_map(|s| f(s).filter(|v| v.is_finite()).map(|v| ((s.n as f64).ln(), v)))
        .collect()
}

fn moments_plot(summary: &[SummaryRow], truth: &TrueValues, title: &str) -> String {
    let (ns, labels) = n_axis(summary);
    let xlim = fix(range(ns.iter().map(|&n| (n as f64).ln())));
    let metrics: [(&str, fn(&SummaryRow) -> Option<f64>, bool); 3] = [
        ("sqrt(n) bias", |s| Some(s.sqrt_n_bias), false),
        ("n variance", |s| Some(s.n_variance), true),
        ("n MSE", |s| Some(s.n_mse), true),
    ];
    let mut body = String::new();
    for (col, (name, f, with_bound)) in metrics.iter().enumerate() {
        let mut ys: Vec<f64> = summary.iter().filter_map(f).collect();
        ys.push(if *with_bound { truth.efficiency_bound } else { 0.0 });
        let p = Panel::new(col, 0, xlim, fix(range(ys.into_iter())));
        p.frame(&mut body, name, Some(&labels));
        let reference = if *with_bound { truth.efficiency_bound } else { 0.0 };
        p.polyline(&mut body, &[(p.xlim.0, reference), (p.xlim.1, reference)], "#555", true);
        for (e, c) in COLORS {
            let pts = series(summary, e, f);
            p.polyline(&mut body, &pts, c, false);
            p.markers(&mut body, &pts, c);
        }
    }
    document(3, 1, title, &body)
}

fn histogram_plot(summary: &[SummaryRow], rows: &[ReplicateRow], truth: &TrueValues, title: &str) -> String {
    let (ns, _) = n_axis(summary);
    let sd = truth.efficiency_bound.sqrt();
    let mut body = String::new();
    for (col, &n) in ns.iter().enumerate() {
        let rn = (n as f64).sqrt();
        let scaled = |e: Estimator| -> Vec<f64> {
            rows.iter()
                .filter(|r| r.n == n && r.estimator == e && r.ok())
                .map(|r| rn * (r.psi.unwrap() - truth.psi0))
                .filter(|v| v.is_finite())
                .collect()
        };
        let all: Vec<f64> = COLORS.iter().flat_map(|(e, _)| scaled(*e)).collect();
        let (lo, hi) = fix(range(all.iter().copied().chain([-4.0 * sd, 4.0 * sd])));
        let bins = 24usize;
        let width = (hi - lo) / bins as f64;
        let mut hists = Vec::new();
        let mut top = 0.0f64;
        for (e, c) in COLORS {
            let v = scaled(e);
            let mut counts = vec![0usize; bins];
            for x in &v {
                let b = (((x - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let dens: Vec<f64> = counts
                .iter()
                .map(|&k| if v.is_empty() { 0.0 } else { k as f64 / (v.len() as f64 * width) })
                .collect();
            top = dens.iter().copied().fold(top, f64::max);
            hists.push((c, dens));
        }
        let peak = 1.0 / (sd * (2.0 * std::f64::consts::PI).sqrt());
        let p = Panel::new(col, 0, (lo, hi), (0.0, top.max(peak)));
        p.frame(&mut body, &format!("n = {n}"), None);
        for (i, (c, dens)) in hists.iter().enumerate() {
            let (fill, opacity) = if i == 0 { (*c, "0.45") } else { ("none", "1") };
            for (b, d) in dens.iter().enumerate() {
                if *d <= 0.0 {
                    continue;
                }
                let x0 = p.x(lo + b as f64 * width);
                let x1 = p.x(lo + (b + 1) as f64 * width);
                let y = p.y(*d);
                let _ = writeln!(
                    body,
                    r##"<rect x="{x0:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{fill}" fill-opacity="{opacity}" stroke="{c}"/>"##,
                    x1 - x0,
                    p.y(0.0) - y
                );
            }
        }
        let curve: Vec<(f64, f64)> = (0..=120)
            .map(|k| {
                let x = lo + (hi - lo) * k as f64 / 120.0;
                (x, peak * (-0.5 * (x / sd).powi(2)).exp())
            })
            .collect();
        p.polyline(&mut body, &curve, "#000", true);
    }
    document(ns.len().max(1), 1, title, &body)
}

fn trace_plot(summary: &[SummaryRow], rows: &[ReplicateRow], title: &str) -> String {
    let (ns, labels) = n_axis(summary);
    let xlim = fix(range(ns.iter().map(|&n| (n as f64).ln())));
    let metrics: [(&str, fn(&ReplicateRow) -> Option<f64>, fn(&SummaryRow) -> Option<f64>); 2] = [
        ("sqrt(n) P_n D*", |r| r.sqrt_n_pn_dstar, |s| s.mean_sqrt_n_pn_dstar),
        ("sqrt(n) min active P_n phi", |r| r.sqrt_n_min_active_pn_phi, |s| s.mean_sqrt_n_min_active_pn_phi),
    ];
    let mut body = String::new();
    for (col, (name, per_row, per_summary)) in metrics.iter().enumerate() {
        let points: Vec<(Estimator, f64, f64)> = rows
            .iter()
            .filter(|r| r.ok())
            .filter_map(|r| per_row(r).filter(|v| v.is_finite()).map(|v| (r.estimator, (r.n as f64).ln(), v)))
            .collect();
        let ylim = fix(range(points.iter().map(|p| p.2).chain([0.0])));
        let p = Panel::new(col, 0, xlim, ylim);
        p.frame(&mut body, name, Some(&labels));
        p.polyline(&mut body, &[(p.xlim.0, 0.0), (p.xlim.1, 0.0)], "#555", true);
        let offset = 0.03 * (p.xlim.1 - p.xlim.0);
        for (i, (e, c)) in COLORS.iter().enumerate() {
            let shift = if i == 0 { -offset } else { offset };
            for (_, x, y) in points.iter().filter(|q| q.0 == *e) {
                let _ = writeln!(
                    body,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{c}" fill-opacity="0.35"/>"##,
                    p.x(x + shift),
                    p.y(*y)
                );
            }
            let pts: Vec<(f64, f64)> = series(summary, *e, per_summary).into_iter().map(|(x, y)| (x + shift, y)).collect();
            p.polyline(&mut body, &pts, c, false);
            p.markers(&mut body, &pts, c);
        }
    }
    document(2, 1, title, &body)
}

/// Bias, variance and MSE against n, sampling distributions with the normal
/// limit overlaid, and the per-replicate diagnostics.
pub fn render_plots(summary: &[SummaryRow], rows: &[ReplicateRow], truth: &TrueValues, title: &str) -> PlotSet {
    PlotSet {
        files: vec![
            ("bias_variance_mse.svg".into(), moments_plot(summary, truth, title)),
            ("sampling_distribution.svg".into(), histogram_plot(summary, rows, truth, title)),
            ("diagnostics.svg".into(), trace_plot(summary, rows, title)),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_round() {
        assert_eq!(nice_ticks(0.0, 1.0), vec![0.0, 0.5, 1.0]);
        assert_eq!(nice_ticks(-3.0, 7.0), vec![0.0, 5.0]);
        assert_eq!(nice_ticks(0.0, 0.7), vec![0.0, 0.2, 0.4, 0.6000000000000001]);
        assert_eq!(fmt_tick(0.6000000000000001), "0.6");
        assert_eq!(fmt_tick(-0.0), "0");
    }

    #[test]
    fn empty_input_renders() {
        let truth = TrueValues {
            psi0: 0.0,
            efficiency_bound: 1.0,
        };
        let set = render_plots(&[], &[], &truth, "empty");
        assert_eq!(set.files.len(), 3);
        assert!(set.files.iter().all(|(_, s)| s.starts_with("<svg") && s.ends_with("</svg>\n")));
    }
}
