//! Aggregate table and self-contained SVG line charts from sweep results.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::eval::{aggregate, write_aggregate_csv, AggregateRecord, MetricsRecord};
use crate::pretrain::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    F1,
    RecallAtK,
}

impl Metric {
    fn title(self) -> &'static str {
        match self {
            Metric::F1 => "Bag-level F1",
            Metric::RecallAtK => "Recall@K (top 40% of instances)",
        }
    }

    fn stats(self, r: &AggregateRecord) -> (f64, f64) {
        match self {
            Metric::F1 => (r.f1_mean, r.f1_std),
            Metric::RecallAtK => (r.recall_mean, r.recall_std),
        }
    }
}

const PALETTE: [&str; 5] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

/// Line chart, one series per method. Witness rates run along the x axis
/// in descending order at even spacing; a method missing a rate leaves a
/// gap in its line.
pub fn render_chart(rows: &[AggregateRecord], metric: Metric) -> String {
    let mut rates: Vec<f64> = rows.iter().map(|r| r.witness_rate).collect();
    rates.sort_by(|a, b| b.total_cmp(a));
    rates.dedup();
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();

    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_at = |i: usize| {
        if rates.len() <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (rates.len() - 1) as f64
        }
    };
    let y_at = |v: f64| TOP + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        metric.title()
    );
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        let y = y_at(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"##,
            LEFT + plot_w,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (i, wr) in rates.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}%</text>"#,
            x_at(i),
            TOP + plot_h + 18.0,
            wr * 100.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">witness rate</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );

    for (s, method) in methods.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<Option<(f64, f64, f64)>> = rates
            .iter()
            .enumerate()
            .map(|(i, wr)| {
                rows.iter()
                    .find(|r| r.method == *method && r.witness_rate == *wr)
                    .map(|r| {
                        let (mean, std) = metric.stats(r);
                        (x_at(i), mean, std)
                    })
            })
            .collect();
        let _ = writeln!(svg, r#"<g class="series" data-method="{method}">"#);
        for run in points.split(Option::is_none).filter(|run| run.len() > 1) {
            let coords: Vec<String> = run
                .iter()
                .flatten()
                .map(|&(x, mean, _)| format!("{x:.2},{:.2}", y_at(mean)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                coords.join(" ")
            );
        }
        for &(x, mean, std) in points.iter().flatten() {
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                y_at(mean - std),
                y_at(mean + std),
                y_at(mean)
            );
        }
        let ly = TOP + 16.0 + 20.0 * s as f64;
        let lx = WIDTH - RIGHT + 16.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{method}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub aggregate_csv: PathBuf,
    pub f1_chart: PathBuf,
    pub recall_chart: PathBuf,
}

/// Writes `aggregate.csv`, `f1.svg` and `recall_at_k.svg` into `out`.
pub fn write_report(records: &[MetricsRecord], out: &Path) -> Result<(Vec<AggregateRecord>, ReportFiles)> {
    fs::create_dir_all(out)?;
    let rows = aggregate(records)?;
    let files = ReportFiles {
        aggregate_csv: out.join("aggregate.csv"),
        f1_chart: out.join("f1.svg"),
        recall_chart: out.join("recall_at_k.svg"),
    };
    write_aggregate_csv(BufWriter::new(File::create(&files.aggregate_csv)?), &rows)?;
    fs::write(&files.f1_chart, render_chart(&rows, Metric::F1))?;
    fs::write(&files.recall_chart, render_chart(&rows, Metric::RecallAtK))?;
    Ok((rows, files))
}
