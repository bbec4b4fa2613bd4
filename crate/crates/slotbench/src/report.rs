//! Summary tables and plots assembled from the results ledger.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{HarnessError, Result};
use crate::export::{write_csv, write_json};
use crate::ledger::{Ledger, LedgerEntry};

/// One evaluated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub stage: String,
    pub config_hash: String,
    /// Runs sharing a series hash differ only in plotted or averaged fields.
    pub series: String,
    pub model: String,
    pub k: usize,
    pub n_blocks: usize,
    pub episodes: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Mean over seeds at one x position of one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub curve: String,
    pub x: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for one seed.
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    Blocks,
    Episodes,
}

impl Axis {
    fn of(self, r: &SummaryRow) -> usize {
        match self {
            Axis::K => r.k,
            Axis::Blocks => r.n_blocks,
            Axis::Episodes => r.episodes,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Axis::K => "slots K",
            Axis::Blocks => "blocks",
            Axis::Episodes => "training episodes",
        }
    }

    /// Curve identity: everything except the x field and the seed.
    fn curve(self, r: &SummaryRow) -> String {
        let mut parts = vec![r.experiment.clone(), r.model.clone()];
        if self != Axis::K {
            parts.push(format!("K={}", r.k));
        }
        if self != Axis::Blocks {
            parts.push(format!("blocks={}", r.n_blocks));
        }
        if self != Axis::Episodes {
            parts.push(format!("episodes={}", r.episodes));
        }
        parts.push(r.series.clone());
        parts.join(" ")
    }
}

pub fn summary_rows(entries: &[LedgerEntry]) -> Vec<SummaryRow> {
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for e in entries {
        let (metric, model_field) = match e.stage.as_str() {
            "eval-pck" => ("mean_pck", "model_kind"),
            "eval-policy" => ("success_rate", "variant"),
            _ => continue,
        };
        if !seen.insert((e.stage.clone(), e.config_hash.clone())) {
            continue;
        }
        let m = &e.metrics;
        let u = |f: &str| m[f].as_u64().unwrap_or(0);
        rows.push(SummaryRow {
            experiment: e.experiment.clone(),
            stage: e.stage.clone(),
            config_hash: e.config_hash.clone(),
            series: m["series"].as_str().unwrap_or_default().into(),
            model: m[model_field].as_str().unwrap_or_default().into(),
            k: u("k") as usize,
            n_blocks: u("n_blocks") as usize,
            episodes: u("episodes") as usize,
            seed: u("seed"),
            metric: metric.into(),
            value: m[metric].as_f64().unwrap_or(f64::NAN),
        });
    }
    rows
}

/// Seed-averaged curves over `axis`, sorted by curve then x.
pub fn curves(rows: &[SummaryRow], stage: &str, axis: Axis) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.stage == stage) {
        groups.entry((axis.curve(r), axis.of(r))).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((curve, x), v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 { (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            CurvePoint { curve, x, mean, sd, n }
        })
        .collect()
}

/// Write `summary.csv`, `summary.json`, the curve tables and SVG plots into
/// `dir`.
pub fn write_report(ledger: &Ledger, dir: &Path) -> Result<Vec<SummaryRow>> {
    let rows = summary_rows(&ledger.entries()?);
    if rows.is_empty() {
        return Err(HarnessError::Report(format!("no completed evaluation results in {}", ledger.path().display())));
    }
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("summary.csv"), &rows)?;
    write_json(&dir.join("summary.json"), &rows)?;
    let plots = [
        ("success_vs_episodes", "eval-policy", Axis::Episodes, "success rate"),
        ("success_vs_k", "eval-policy", Axis::K, "success rate"),
        ("pck_vs_blocks", "eval-pck", Axis::Blocks, "mean PCK"),
        ("pck_vs_k", "eval-pck", Axis::K, "mean PCK"),
    ];
    for (stem, stage, axis, ylabel) in plots {
        let pts = curves(&rows, stage, axis);
        write_csv(&dir.join(format!("{stem}.csv")), &pts)?;
        write_atomic(&dir.join(format!("{stem}.svg")), plot_svg(&pts, axis.label(), ylabel)?.as_bytes())?;
    }
    Ok(rows)
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// Line plot of `points` grouped by curve. An empty input yields empty axes.
pub fn plot_svg(points: &[CurvePoint], xlabel: &str, ylabel: &str) -> Result<String> {
    let err = |e: &dyn std::fmt::Display| HarnessError::Report(format!("plot: {e}"));
    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.x as f64), b.max(p.x as f64)));
    let (xmin, xmax) = if xmin.is_finite() { (xmin, xmax.max(xmin + 1.0)) } else { (0.0, 1.0) };
    let ymax = points.iter().map(|p| p.mean + p.sd).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (720, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(xmin..xmax, 0.0..ymax)
            .map_err(|e| err(&e))?;
        chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw().map_err(|e| err(&e))?;
        let mut by_curve: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for p in points {
            by_curve.entry(&p.curve).or_default().push((p.x as f64, p.mean));
        }
        for (i, (name, pts)) in by_curve.into_iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(|e| err(&e))?
                .label(name.to_string())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| err(&e))?;
        }
        if !points.is_empty() {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| err(&e))?;
        }
        root.present().map_err(|e| err(&e))?;
    }
    Ok(svg)
}
