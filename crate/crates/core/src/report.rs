//! Run reports, ablation tables, paper-format tables and plots.
//!
//! JSON is written with struct-declared key order and shortest round-trip
//! float formatting, so write→read→write is byte-identical. CSV and the
//! rendered tables use fixed decimals.

use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{savings_fraction, AdaptiveParams, CostUnits};
use crate::audit::{BiasReport, PromptRow, TsneLayout};
use crate::embed::{write_atomic, CONDITION_HEADINGS};
use crate::enhance::BaselineConfig;
use crate::metrics::{dataset_means, MetricSet};
use crate::pipeline::{Decision, ProviderPolicy, RunRecord, ThresholdSpec};
use crate::uncertainty::StochasticConfig;

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "id,decision,clarity,depth_units,savings,psnr,ssim,uiqm,uciqe,fsim,uncertainty,flagged";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records")]
    EmptyRecords,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("stored aggregates disagree with records: {0}")]
    Inconsistent(String),
    #[error("unsupported schema version {0}")]
    UnsupportedSchema(u32),
    #[error("runs cover different manifests: {0}")]
    ManifestMismatch(String),
    #[error("no metrics for dataset {0:?}")]
    MissingMetrics(String),
    #[error("empty layout")]
    EmptyLayout,
    #[error("{0} coordinates but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("malformed report: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub manifest: String,
    pub provider: String,
    pub enhancer: String,
    pub seed: u64,
    pub threshold: ThresholdSpec,
    pub effective_threshold: Option<f64>,
    pub params: AdaptiveParams,
    pub baseline: Option<BaselineConfig>,
    pub uncertainty: Option<StochasticConfig>,
    pub review_threshold: f64,
    pub on_provider_error: ProviderPolicy,
    pub prompt_prefix: String,
    pub metric_definitions: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAggregate {
    pub dataset: String,
    pub n: usize,
    pub skipped: usize,
    pub failed: usize,
    pub skip_fraction: f64,
    pub tile_savings: f64,
    pub metric_count: usize,
    pub metrics: Option<MetricSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub skipped: usize,
    pub enhanced: usize,
    pub failed: usize,
    /// Image-level savings, |S|/n.
    pub skip_fraction: f64,
    pub units: u64,
    pub full_units: u64,
    /// 1 − units/full_units over every processed image.
    pub tile_savings: f64,
    pub metric_count: usize,
    pub metric_means: Option<MetricSet>,
    pub uncertainty_mean: Option<f64>,
    pub flagged: usize,
    pub datasets: Vec<DatasetAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub records: Vec<RunRecord>,
    pub aggregates: Aggregates,
}

fn summarize<'a>(records: impl Iterator<Item = &'a RunRecord> + Clone) -> (usize, usize, usize, f64, CostUnits, usize, Option<MetricSet>) {
    let n = records.clone().count();
    let skipped = records.clone().filter(|r| r.decision == Decision::Skip).count();
    let failed = records.clone().filter(|r| r.decision == Decision::Failed).count();
    let mut cost = CostUnits::default();
    for r in records.clone() {
        cost.units += r.cost.units;
        cost.full_units += r.cost.full_units;
    }
    let metrics: Vec<MetricSet> = records.filter_map(|r| r.metrics).collect();
    let means = dataset_means(&metrics).ok();
    let frac = if n == 0 { 0.0 } else { skipped as f64 / n as f64 };
    (n, skipped, failed, frac, cost, metrics.len(), means)
}

/// Recomputes every aggregate from the records, in record order.
pub fn compute_aggregates(records: &[RunRecord]) -> Aggregates {
    let (n, skipped, failed, skip_fraction, cost, metric_count, metric_means) = summarize(records.iter());
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.dataset.as_str()) {
            labels.push(&r.dataset);
        }
    }
    let datasets = labels
        .iter()
        .map(|l| {
            let (n, skipped, failed, skip_fraction, cost, metric_count, metrics) =
                summarize(records.iter().filter(|r| r.dataset == *l));
            DatasetAggregate {
                dataset: l.to_string(),
                n,
                skipped,
                failed,
                skip_fraction,
                tile_savings: savings_fraction(&cost),
                metric_count,
                metrics,
            }
        })
        .collect();
    let unc: Vec<f64> = records.iter().filter_map(|r| r.uncertainty).collect();
    Aggregates {
        n,
        skipped,
        enhanced: records.iter().filter(|r| r.decision == Decision::Enhance).count(),
        failed,
        skip_fraction,
        units: cost.units,
        full_units: cost.full_units,
        tile_savings: savings_fraction(&cost),
        metric_count,
        metric_means,
        uncertainty_mean: if unc.is_empty() {
            None
        } else {
            Some(unc.iter().sum::<f64>() / unc.len() as f64)
        },
        flagged: records.iter().filter(|r| r.flagged == Some(true)).count(),
        datasets,
    }
}

fn check(name: &str, v: f64) -> Result<(), ReportError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ReportError::NonFinite(name.to_string()))
    }
}

fn check_metrics(ctx: &str, m: &MetricSet) -> Result<(), ReportError> {
    check(&format!("{ctx}.ssim"), m.ssim)?;
    check(&format!("{ctx}.psnr_db"), m.psnr_db)?;
    check(&format!("{ctx}.uiqm"), m.uiqm)?;
    check(&format!("{ctx}.uciqe"), m.uciqe)?;
    check(&format!("{ctx}.fsim"), m.fsim)
}

fn check_records(records: &[RunRecord]) -> Result<(), ReportError> {
    for r in records {
        if let Some(c) = r.clarity {
            check(&format!("{}.clarity", r.id), c)?;
        }
        if let Some(u) = r.uncertainty {
            check(&format!("{}.uncertainty", r.id), u)?;
        }
        if let Some(m) = &r.metrics {
            check_metrics(&r.id, m)?;
        }
    }
    Ok(())
}

impl RunReport {
    pub fn new(config: RunConfig, records: Vec<RunRecord>) -> Result<Self, ReportError> {
        if records.is_empty() {
            return Err(ReportError::EmptyRecords);
        }
        check_records(&records)?;
        if let Some(t) = config.effective_threshold {
            check("effective_threshold", t)?;
        }
        let aggregates = compute_aggregates(&records);
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            config,
            records,
            aggregates,
        })
    }

    pub fn to_json(&self) -> Result<String, ReportError> {
        check_records(&self.records)?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a report and verifies its aggregates against its records.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(ReportError::UnsupportedSchema(r.schema_version));
        }
        if r.records.is_empty() {
            return Err(ReportError::EmptyRecords);
        }
        let fresh = compute_aggregates(&r.records);
        if fresh != r.aggregates {
            return Err(ReportError::Inconsistent(format!(
                "stored skip_fraction {} / recomputed {}",
                r.aggregates.skip_fraction, fresh.skip_fraction
            )));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self, ReportError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn csv(&self) -> String {
        run_csv(&self.records)
    }

    /// `skipped=K/N savings=P% mean_psnr=…`
    pub fn summary_line(&self) -> String {
        let a = &self.aggregates;
        let psnr = a
            .metric_means
            .map(|m| format!("{:.3}", m.psnr_db))
            .unwrap_or_else(|| "n/a".into());
        format!(
            "skipped={}/{} savings={} mean_psnr={} tile_savings={} failed={}",
            a.skipped,
            a.n,
            percent_trimmed(a.skip_fraction),
            psnr,
            crate::adaptive::format_percent(a.tile_savings),
            a.failed
        )
    }
}

// "100%" rather than "100.00%"; other values keep two decimals.
fn percent_trimmed(f: f64) -> String {
    let s = format!("{:.2}", f * 100.0);
    let s = s.strip_suffix(".00").unwrap_or(&s);
    format!("{s}%")
}

fn opt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Per-image CSV with [`CSV_HEADER`].
pub fn run_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let m = r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6},{},{},{},{},{},{},{}",
            r.id,
            r.decision.as_str(),
            opt6(r.clarity),
            r.cost.units,
            savings_fraction(&r.cost),
            opt6(m.map(|m| m.psnr_db)),
            opt6(m.map(|m| m.ssim)),
            opt6(m.map(|m| m.uiqm)),
            opt6(m.map(|m| m.uciqe)),
            opt6(m.map(|m| m.fsim)),
            opt6(r.uncertainty),
            r.flagged.map(|f| f.to_string()).unwrap_or_default(),
        );
    }
    out
}

pub fn write_run_report(report: &RunReport, path: &Path) -> Result<(), ReportError> {
    Ok(write_atomic(path, report.to_json()?.as_bytes())?)
}

pub fn write_csv(report: &RunReport, path: &Path) -> Result<(), ReportError> {
    check_records(&report.records)?;
    Ok(write_atomic(path, report.csv().as_bytes())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationSide {
    pub psnr: f64,
    pub ssim: f64,
    /// Fraction of the dataset's images that were skipped.
    pub savings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub n: usize,
    pub full: AblationSide,
    pub gated: AblationSide,
}

impl AblationRow {
    /// Relative PSNR drop, `(full − gated)/full`.
    pub fn psnr_drop(&self) -> f64 {
        (self.full.psnr - self.gated.psnr) / self.full.psnr
    }
}

fn side(records: &[&RunRecord], label: &str) -> Result<AblationSide, ReportError> {
    let metrics: Vec<MetricSet> = records.iter().filter_map(|r| r.metrics).collect();
    let means = dataset_means(&metrics).map_err(|_| ReportError::MissingMetrics(label.to_string()))?;
    let skipped = records.iter().filter(|r| r.decision == Decision::Skip).count();
    Ok(AblationSide {
        psnr: means.psnr_db,
        ssim: means.ssim,
        savings: skipped as f64 / records.len() as f64,
    })
}

/// One row per dataset label comparing a gated run against an ungated one.
pub fn ablation_table(gated: &RunReport, full: &RunReport) -> Result<Vec<AblationRow>, ReportError> {
    if gated.records.len() != full.records.len() {
        return Err(ReportError::ManifestMismatch(format!(
            "{} vs {} records",
            gated.records.len(),
            full.records.len()
        )));
    }
    for (g, f) in gated.records.iter().zip(&full.records) {
        if g.id != f.id || g.dataset != f.dataset {
            return Err(ReportError::ManifestMismatch(format!("{} vs {}", g.id, f.id)));
        }
    }
    gated
        .aggregates
        .datasets
        .iter()
        .map(|d| {
            fn pick<'a>(r: &'a RunReport, label: &str) -> Vec<&'a RunRecord> {
                r.records.iter().filter(|x| x.dataset == label).collect()
            }
            Ok(AblationRow {
                dataset: d.dataset.clone(),
                n: d.n,
                full: side(&pick(full, &d.dataset), &d.dataset)?,
                gated: side(&pick(gated, &d.dataset), &d.dataset)?,
            })
        })
        .collect()
}

/// Markdown ablation table. `reported_drop`, when given, is printed beside
/// the recomputed drops rather than replacing them.
pub fn render_ablation(rows: &[AblationRow], reported_drop: Option<f64>) -> String {
    let mut s = String::from("| Dataset | Method | PSNR | SSIM | GPU Savings % | PSNR drop % |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | Without gating | {:.2} | {:.3} | {:.2} |  |",
            r.dataset,
            r.full.psnr,
            r.full.ssim,
            r.full.savings * 100.0
        );
        let _ = writeln!(
            s,
            "| {} | With gating | {:.2} | {:.3} | {:.2} | {:.2} |",
            r.dataset,
            r.gated.psnr,
            r.gated.ssim,
            r.gated.savings * 100.0,
            r.psnr_drop() * 100.0
        );
    }
    if let Some(d) = reported_drop {
        let _ = writeln!(s, "\nReported PSNR drop: {d:.2}% (recomputed per dataset in the last column)");
    }
    s
}

/// Table of per-model metric means, rows sorted by model name.
pub fn render_metric_table(rows: &[(String, MetricSet)]) -> String {
    let mut sorted: Vec<&(String, MetricSet)> = rows.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut s = String::from("| Model | SSIM | PSNR | UIQM | UCIQE | FSIM |\n|---|---|---|---|---|---|\n");
    for (name, m) in sorted {
        let _ = writeln!(
            s,
            "| {name} | {:.3} | {:.3} | {:.3} | {:.3} | {:.3} |",
            m.ssim, m.psnr_db, m.uiqm, m.uciqe, m.fsim
        );
    }
    s
}

/// Per-dataset mean prompt similarities, one column per condition.
pub fn render_prompt_table(rows: &[PromptRow]) -> String {
    let mut s = String::from("| Dataset |");
    for h in CONDITION_HEADINGS {
        let _ = write!(s, " {h} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(CONDITION_HEADINGS.len()));
    s.push('\n');
    for r in rows {
        let _ = write!(s, "| {} |", r.dataset);
        for v in r.means {
            let _ = write!(s, " {v:.3} |");
        }
        s.push('\n');
    }
    s
}

pub fn bias_report_json(report: &BiasReport) -> Result<String, ReportError> {
    check("entropy_nats", report.entropy_nats)?;
    check("normalized_entropy", report.normalized_entropy)?;
    for row in &report.prompt_means {
        for v in row.means {
            check(&format!("prompt_means.{}", row.dataset), v)?;
        }
    }
    for (id, w) in &report.weights {
        check(&format!("weights.{id}"), *w)?;
    }
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// `id,x,y,dataset` rows.
pub fn tsne_csv(ids: &[String], layout: &TsneLayout, labels: &[String]) -> Result<String, ReportError> {
    if ids.len() != layout.coords.len() {
        return Err(ReportError::LengthMismatch(layout.coords.len(), ids.len()));
    }
    if labels.len() != layout.coords.len() {
        return Err(ReportError::LengthMismatch(layout.coords.len(), labels.len()));
    }
    let mut s = String::from("id,x,y,dataset\n");
    for ((id, c), l) in ids.iter().zip(&layout.coords).zip(labels) {
        let _ = writeln!(s, "{id},{:.6},{:.6},{l}", c[0], c[1]);
    }
    Ok(s)
}

const PALETTE: [&str; 7] = ["#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

/// Colour for a dataset label; `others` counts earlier labels outside the fixed trio.
pub fn dataset_color(label: &str, others: usize) -> &'static str {
    match label {
        "LSUI400" => "red",
        "UIEB100" => "blue",
        "Ocean_ex" => "green",
        _ => PALETTE[others % PALETTE.len()],
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Scatter plot of a layout with one legend entry per label.
pub fn render_tsne_svg(layout: &TsneLayout, labels: &[String]) -> Result<String, ReportError> {
    if layout.coords.is_empty() {
        return Err(ReportError::EmptyLayout);
    }
    if labels.len() != layout.coords.len() {
        return Err(ReportError::LengthMismatch(layout.coords.len(), labels.len()));
    }
    let mut colors: IndexMap<&str, &str> = IndexMap::new();
    let mut others = 0;
    for l in labels {
        if !colors.contains_key(l.as_str()) {
            let c = dataset_color(l, others);
            if c.starts_with('#') {
                others += 1;
            }
            colors.insert(l, c);
        }
    }
    let (w, h, margin, legend_w) = (640.0, 480.0, 30.0, 150.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for c in &layout.coords {
        x0 = x0.min(c[0]);
        x1 = x1.max(c[0]);
        y0 = y0.min(c[1]);
        y1 = y1.max(c[1]);
    }
    let sx = if x1 > x0 { (w - legend_w - 2.0 * margin) / (x1 - x0) } else { 0.0 };
    let sy = if y1 > y0 { (h - 2.0 * margin) / (y1 - y0) } else { 0.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#);
    for (c, l) in layout.coords.iter().zip(labels) {
        let px = margin + (c[0] - x0) * sx;
        let py = h - margin - (c[1] - y0) * sy;
        let _ = writeln!(
            s,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="{}" fill-opacity="0.8"/>"#,
            colors[l.as_str()]
        );
    }
    for (i, (label, color)) in colors.iter().enumerate() {
        let ly = margin + 20.0 * i as f64;
        let lx = w - legend_w + 10.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12">{}</text>"#,
            lx + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn plot_tsne_svg(layout: &TsneLayout, labels: &[String], path: &Path) -> Result<(), ReportError> {
    Ok(write_atomic(path, render_tsne_svg(layout, labels)?.as_bytes())?)
}
