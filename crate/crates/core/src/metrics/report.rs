//! Per-case metric rows, aggregates and the emitted report files.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::Case;
use crate::error::{Error, Result};
use crate::metrics::{
    apd, dsc, fdr, kappa_with_ci, severity_pairs, svrd, tpr_subtype, ConfusionMatrix, KappaReport,
    BOOTSTRAP_RESAMPLES,
};
use crate::phantom::{CONSOLIDATION, GROUND_GLASS, MIXED};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const KAPPA_FILE: &str = "kappa.csv";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const TABLE_FILE: &str = "table.txt";

pub const METRICS_HEADER: [&str; 10] = [
    "case_id",
    "dsc",
    "apd",
    "svrd",
    "fdr",
    "fdr_empty",
    "tpr_consolidation",
    "tpr_ground_glass",
    "tpr_mixed",
    "acc",
];

/// Subtypes in the column order of the report.
pub const SUBTYPES: [(u8, &str); 3] = [
    (CONSOLIDATION, "consolidation"),
    (GROUND_GLASS, "ground_glass"),
    (MIXED, "mixed"),
];

/// Metrics of one case as fractions (SVRD in mm⁻¹); `None` marks a metric
/// undefined for the case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: f64,
    pub apd: f64,
    pub svrd: Option<f64>,
    pub fdr: f64,
    pub fdr_empty: bool,
    pub tpr: [Option<f64>; 3],
    pub acc: f64,
    /// `(predicted, target)` lobe scores.
    pub severity: Vec<(u8, u8)>,
}

/// Scores a binary lesion prediction against a case's references.
pub fn evaluate_case(case: &Case, pred: &[bool]) -> Result<CaseMetrics> {
    let reference: Vec<bool> = case.lesion_map.data().iter().map(|&v| v > 0).collect();
    let lung: Vec<bool> = case.lobe_map.data().iter().map(|&v| v > 0).collect();
    let dims = case.lobe_map.dims();
    let spacing = case.lobe_map.spacing();
    let has = |m: &[bool]| m.iter().any(|&v| v);
    let svrd = if has(pred) && has(&reference) {
        Some(svrd(pred, &reference, dims, spacing)?)
    } else {
        None
    };
    let f = fdr(pred, &reference)?;
    let mut tpr = [None; 3];
    for (slot, &(s, _)) in tpr.iter_mut().zip(&SUBTYPES) {
        *slot = tpr_subtype(pred, case.lesion_map.data(), s)?;
    }
    let severity = severity_pairs(pred, &case.lobe_map, &case.severity)?;
    let acc = ConfusionMatrix::from_pairs(&severity)
        .accuracy()
        .ok_or_else(|| Error::Domain(format!("case {} has no scored lobes", case.id)))?;
    Ok(CaseMetrics {
        case_id: case.id.clone(),
        dsc: dsc(pred, &reference)?,
        apd: apd(pred, &reference, &lung)?,
        svrd,
        fdr: f.value,
        fdr_empty: f.empty_prediction,
        tpr,
        acc,
        severity,
    })
}

/// Evaluates cases concurrently; `preds[i]` belongs to `cases[i]`.
pub fn evaluate_cases(cases: &[Case], preds: &[Vec<bool>]) -> Result<Vec<CaseMetrics>> {
    if cases.len() != preds.len() {
        return Err(Error::Shape(format!("{} cases but {} predictions", cases.len(), preds.len())));
    }
    cases.par_iter().zip(preds).map(|(c, p)| evaluate_case(c, p)).collect()
}

/// Mean and sample standard deviation of a metric over the cases where it
/// is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn summarize(metric: &str, values: impl Iterator<Item = Option<f64>>) -> SummaryRow {
    let v: Vec<f64> = values.flatten().collect();
    let n = v.len();
    let mean = if n == 0 { f64::NAN } else { v.iter().sum::<f64>() / n as f64 };
    let sd = match n {
        0 => f64::NAN,
        1 => 0.0,
        _ => (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt(),
    };
    SummaryRow {
        metric: metric.into(),
        mean,
        sd,
        n,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    /// Percent-scaled aggregates, one row per metric column.
    pub summary: Vec<SummaryRow>,
    pub confusion: ConfusionMatrix,
    /// Pooled over all lobes.
    pub acc: f64,
    /// `Err` text when kappa is undefined for these lobes.
    pub kappa: std::result::Result<KappaReport, String>,
}

/// Percent-scaled metric columns of a case (SVRD reported ×100 as well).
fn percent_columns(c: &CaseMetrics) -> [Option<f64>; 8] {
    let p = |v: f64| Some(100.0 * v);
    [
        p(c.dsc),
        p(c.apd),
        c.svrd.map(|v| 100.0 * v),
        p(c.fdr),
        c.tpr[0].map(|v| 100.0 * v),
        c.tpr[1].map(|v| 100.0 * v),
        c.tpr[2].map(|v| 100.0 * v),
        p(c.acc),
    ]
}

const SUMMARY_METRICS: [&str; 8] = [
    "dsc",
    "apd",
    "svrd",
    "fdr",
    "tpr_consolidation",
    "tpr_ground_glass",
    "tpr_mixed",
    "acc",
];

impl MetricsReport {
    /// Aggregates case metrics; the kappa interval uses `seed`.
    pub fn new(cases: Vec<CaseMetrics>, seed: u64) -> Self {
        let cols: Vec<[Option<f64>; 8]> = cases.iter().map(percent_columns).collect();
        let summary = SUMMARY_METRICS
            .iter()
            .enumerate()
            .map(|(k, name)| summarize(name, cols.iter().map(|c| c[k])))
            .collect();
        let pairs: Vec<(u8, u8)> = cases.iter().flat_map(|c| c.severity.iter().copied()).collect();
        let confusion = ConfusionMatrix::from_pairs(&pairs);
        let kappa = kappa_with_ci(&pairs, BOOTSTRAP_RESAMPLES, seed).map_err(|e| e.to_string());
        Self {
            acc: confusion.accuracy().unwrap_or(f64::NAN),
            cases,
            summary,
            confusion,
            kappa,
        }
    }

    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.iter().find(|r| r.metric == metric).map(|r| r.mean)
    }

    /// Writes the metric, summary, kappa and confusion files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();

        let mut w = csv_writer(&dir.join(METRICS_FILE))?;
        w.write_record(METRICS_HEADER)?;
        for c in &self.cases {
            let cols = percent_columns(c);
            let mut rec = vec![c.case_id.clone()];
            rec.extend(cols[..4].iter().map(|&v| f(v)));
            rec.push((c.fdr_empty as u8).to_string());
            rec.extend(cols[4..].iter().map(|&v| f(v)));
            w.write_record(&rec)?;
        }
        flush(w, &dir.join(METRICS_FILE))?;

        let mut w = csv_writer(&dir.join(SUMMARY_FILE))?;
        w.write_record(["metric", "mean", "sd", "n"])?;
        for r in &self.summary {
            w.write_record([r.metric.clone(), f(finite(r.mean)), f(finite(r.sd)), r.n.to_string()])?;
        }
        flush(w, &dir.join(SUMMARY_FILE))?;

        let mut w = csv_writer(&dir.join(KAPPA_FILE))?;
        w.write_record(["kappa", "ci_low", "ci_high", "n"])?;
        match &self.kappa {
            Ok(k) => w.write_record([
                format!("{:.6}", k.kappa),
                format!("{:.6}", k.ci_low),
                format!("{:.6}", k.ci_high),
                k.n.to_string(),
            ])?,
            Err(_) => w.write_record(["", "", "", &self.confusion.total().to_string()])?,
        }
        flush(w, &dir.join(KAPPA_FILE))?;

        let mut w = csv_writer(&dir.join(CONFUSION_FILE))?;
        w.write_record(["predicted", "t0", "t1", "t2", "t3", "t4", "t5"])?;
        for (i, row) in self.confusion.counts.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        flush(w, &dir.join(CONFUSION_FILE))
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text comparison table, one row per method: mean ± sd of each
/// percent metric, then pooled severity accuracy and kappa with its interval.
pub fn format_table(rows: &[(&str, &MetricsReport)]) -> String {
    let heads = [
        "Method",
        "DSC",
        "APD",
        "SVRD",
        "FDR",
        "TPR Consolidation",
        "TPR Ground glass",
        "TPR Mixed",
        "ACC",
        "Kappa [95% CI]",
    ];
    let mut cells: Vec<Vec<String>> = vec![heads.iter().map(|s| s.to_string()).collect()];
    for (name, r) in rows {
        let mut line = vec![name.to_string()];
        for m in &SUMMARY_METRICS[..7] {
            let s = r.summary.iter().find(|s| s.metric == *m).expect("summary row");
            line.push(if s.n == 0 {
                "-".into()
            } else {
                format!("{:.2} ± {:.2}", s.mean, s.sd)
            });
        }
        line.push(if r.acc.is_finite() {
            format!("{:.2}", 100.0 * r.acc)
        } else {
            "-".into()
        });
        line.push(match &r.kappa {
            Ok(k) => format!("{:.3} [{:.3}, {:.3}]", k.kappa, k.ci_low, k.ci_high),
            Err(_) => "undefined".into(),
        });
        cells.push(line);
    }
    let widths: Vec<usize> = (0..heads.len())
        .map(|j| cells.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in cells.iter().enumerate() {
        let padded: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "| {} |", padded.join(" | "));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            let _ = writeln!(out, "|-{}-|", rule.join("-|-"));
        }
    }
    out
}
