//! Metric-versus-PNR charts from run summaries, as standalone SVG.
//!
//! One chart per (dataset, attack, metric), one series per aggregator,
//! vertical error bars of one standard deviation. Each point carries its
//! exact values in `data-*` attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::runner::RunSummary;
use crate::sim::MeanStd;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub dataset: String,
    pub attack: String,
    pub metric: String,
    /// aggregator -> points sorted by PNR.
    pub series: BTreeMap<String, Vec<(f64, MeanStd)>>,
}

impl Chart {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}.svg", slug(&self.dataset), slug(&self.attack), slug(&self.metric))
    }

    pub fn to_svg(&self) -> String {
        render(self)
    }
}

/// Groups summaries into charts. All summaries of one (dataset, attack)
/// must report the same metrics.
pub fn charts(summaries: &[RunSummary]) -> Result<Vec<Chart>> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument("no summaries to plot".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry((s.dataset.clone(), s.attack.clone())).or_default().push(s);
    }
    let mut out = Vec::new();
    for ((dataset, attack), group) in groups {
        let metrics: BTreeSet<&String> = group[0].metrics.keys().collect();
        for s in &group[1..] {
            let other: BTreeSet<&String> = s.metrics.keys().collect();
            if other != metrics {
                return Err(Error::SummaryMismatch(format!(
                    "{dataset}/{attack}: metrics {metrics:?} vs {other:?} ({} at pnr {})",
                    s.aggregator, s.pnr
                )));
            }
        }
        for metric in metrics {
            let mut series: BTreeMap<String, Vec<(f64, MeanStd)>> = BTreeMap::new();
            for s in &group {
                let points = series.entry(s.aggregator.clone()).or_default();
                if points.iter().any(|(pnr, _)| *pnr == s.pnr) {
                    return Err(Error::SummaryMismatch(format!(
                        "{dataset}/{attack}: two summaries for {} at pnr {}",
                        s.aggregator, s.pnr
                    )));
                }
                points.push((s.pnr, s.metrics[metric]));
            }
            for points in series.values_mut() {
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
            }
            out.push(Chart {
                dataset: dataset.clone(),
                attack: attack.clone(),
                metric: metric.clone(),
                series,
            });
        }
    }
    Ok(out)
}

/// Reads summary files and writes one SVG per chart into `out_dir`.
pub fn plot_files(summaries: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let loaded = summaries
        .iter()
        .map(|p| RunSummary::load(p))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    charts(&loaded)?
        .iter()
        .map(|c| {
            let path = out_dir.join(c.file_name());
            std::fs::write(&path, c.to_svg()).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn bounded_metric(metric: &str) -> bool {
    matches!(metric, "f1" | "asr_lf" | "ba")
}

fn render(chart: &Chart) -> String {
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let y_max = if bounded_metric(&chart.metric) {
        1.0
    } else {
        let top = chart
            .series
            .values()
            .flatten()
            .map(|(_, m)| m.mean + m.std)
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        if top > 0.0 {
            top * 1.1
        } else {
            1.0
        }
    };
    let x = |pnr: f64| LEFT + pnr.clamp(0.0, 1.0) * plot_w;
    let y = |v: f64| TOP + plot_h - (v / y_max).clamp(0.0, 1.0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{} / {}: {}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&chart.dataset),
        escape(&chart.attack),
        escape(&chart.metric)
    );

    // Axes and ticks.
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT} {TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let (tx, ty) = (x(t), y(t * y_max));
        let _ = writeln!(
            svg,
            r#"<line x1="{tx}" y1="{}" x2="{tx}" y2="{}" stroke="black"/><text x="{tx}" y="{}" text-anchor="middle">{:.0}%</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0,
            t * 100.0
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{ty}" x2="{LEFT}" y2="{ty}" stroke="black"/><line x1="{LEFT}" y1="{ty}" x2="{}" y2="{ty}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{:.3}</text>"##,
            LEFT - 5.0,
            LEFT + plot_w,
            LEFT - 8.0,
            ty + 4.0,
            t * y_max
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">PNR</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&chart.metric)
    );

    for (i, (agg, points)) in chart.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let name = escape(agg);
        let _ = writeln!(svg, r#"<g class="series" data-aggregator="{name}" stroke="{color}" fill="{color}">"#);
        if points.len() > 1 {
            let coords: Vec<String> = points.iter().map(|(p, m)| format!("{},{}", x(*p), y(m.mean))).collect();
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke-width="2"/>"#, coords.join(" "));
        }
        for (pnr, m) in points {
            let (px, py) = (x(*pnr), y(m.mean));
            let _ = writeln!(
                svg,
                r#"<line class="error-bar" x1="{px}" y1="{}" x2="{px}" y2="{}"/>"#,
                y(m.mean - m.std),
                y(m.mean + m.std)
            );
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="3.5"/>"#);
            let _ = writeln!(
                svg,
                r#"<text class="value" x="{}" y="{}" stroke="none" font-size="10" data-aggregator="{name}" data-pnr="{pnr}" data-mean="{}" data-std="{}" data-n="{}">{:.3}</text>"#,
                px + 5.0,
                py - 5.0,
                m.mean,
                m.std,
                m.n,
                m.mean
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke-width="2"/><text x="{}" y="{}" stroke="none">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(agg: &str, pnr: f64, f1: f64, with_ba: bool) -> RunSummary {
        let mut metrics = BTreeMap::new();
        metrics.insert("f1".to_string(), MeanStd { mean: f1, std: 0.01, n: 5 });
        if with_ba {
            metrics.insert("ba".to_string(), MeanStd { mean: 0.5, std: 0.1, n: 5 });
        }
        RunSummary {
            dataset: "mnist".into(),
            attack: "backdoor".into(),
            pnr,
            aggregator: agg.into(),
            seed: 1,
            repeats: 1,
            rounds: 5,
            n_nodes: 10,
            metrics,
            per_repeat: Vec::new(),
        }
    }

    #[test]
    fn single_summary_gives_single_points() {
        let c = charts(&[summary("sentinel", 0.5, 0.9, false)]).unwrap();
        assert_eq!(c.len(), 1);
        let svg = c[0].to_svg();
        assert!(!svg.contains("<polyline"));
        assert_eq!(svg.matches("<circle").count(), 1);
        assert_eq!(c[0].file_name(), "mnist_backdoor_f1.svg");
    }

    #[test]
    fn three_pnrs_give_polylines() {
        let s: Vec<RunSummary> = [0.8, 0.1, 0.5]
            .iter()
            .flat_map(|&p| [summary("fedavg", p, 0.5, true), summary("sentinel", p, 0.9, true)])
            .collect();
        let c = charts(&s).unwrap();
        assert_eq!(c.len(), 2);
        let svg = c.iter().find(|c| c.metric == "f1").unwrap().to_svg();
        assert_eq!(svg.matches("<polyline").count(), 2);
        let pnrs: Vec<f64> = c[0].series["fedavg"].iter().map(|(p, _)| *p).collect();
        assert_eq!(pnrs, vec![0.1, 0.5, 0.8]);
    }

    #[test]
    fn values_are_embedded_exactly() {
        let s = summary("sentinel", 0.5, 0.912345678901, false);
        let svg = charts(std::slice::from_ref(&s)).unwrap()[0].to_svg();
        assert!(svg.contains(&format!("data-mean=\"{}\"", s.metrics["f1"].mean)));
    }

    #[test]
    fn mismatched_metrics_rejected() {
        let e = charts(&[summary("fedavg", 0.1, 0.5, true), summary("sentinel", 0.1, 0.9, false)]);
        assert!(matches!(e, Err(Error::SummaryMismatch(_))));
        let dup = charts(&[summary("fedavg", 0.1, 0.5, false), summary("fedavg", 0.1, 0.6, false)]);
        assert!(matches!(dup, Err(Error::SummaryMismatch(_))));
    }
}
