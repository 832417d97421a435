//! Performance gap recovered, student/supervisor agreement, and grid summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::RunRecord;

/// Gaps smaller than this leave PGR undefined.
pub const PGR_MIN_GAP: f64 = 0.005;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("vectors disagree in length: {0:?}")]
    Misaligned(Vec<usize>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// (w2s − weak) / (ceiling − weak), or `None` when |ceiling − weak| < `PGR_MIN_GAP`.
pub fn compute_pgr(weak_acc: f64, w2s_acc: f64, ceiling_acc: f64) -> Option<f64> {
    let gap = ceiling_acc - weak_acc;
    if gap.abs() < PGR_MIN_GAP {
        None
    } else {
        Some((w2s_acc - weak_acc) / gap)
    }
}

/// Hardening used for all accuracy computations; exactly 0.5 counts as class 0.
pub fn harden(p: f64) -> u8 {
    u8::from(p > 0.5)
}

pub fn harden_all(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| harden(p)).collect()
}

/// Fraction of positions where `a` and `b` agree; `None` for empty input.
pub fn match_rate(a: &[u8], b: &[u8]) -> Option<f64> {
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    Some(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementBreakdown {
    pub overall: Option<f64>,
    pub on_supervisor_correct: Option<f64>,
    pub on_supervisor_wrong: Option<f64>,
    pub n_total: usize,
    pub n_supervisor_correct: usize,
    pub n_supervisor_wrong: usize,
}

/// Student/supervisor agreement overall and split by whether the supervisor was right.
/// Empty strata are reported as `None`.
pub fn agreement(student: &[u8], weak: &[u8], gt: &[u8]) -> Result<AgreementBreakdown, MetricsError> {
    if student.len() != weak.len() || weak.len() != gt.len() {
        return Err(MetricsError::Misaligned(vec![student.len(), weak.len(), gt.len()]));
    }
    let (mut agree_c, mut n_c, mut agree_w, mut n_w) = (0usize, 0usize, 0usize, 0usize);
    for ((s, w), y) in student.iter().zip(weak).zip(gt) {
        if w == y {
            n_c += 1;
            agree_c += usize::from(s == w);
        } else {
            n_w += 1;
            agree_w += usize::from(s == w);
        }
    }
    let frac = |a: usize, n: usize| (n > 0).then(|| a as f64 / n as f64);
    Ok(AgreementBreakdown {
        overall: frac(agree_c + agree_w, n_c + n_w),
        on_supervisor_correct: frac(agree_c, n_c),
        on_supervisor_wrong: frac(agree_w, n_w),
        n_total: n_c + n_w,
        n_supervisor_correct: n_c,
        n_supervisor_wrong: n_w,
    })
}

/// Linear-interpolation quantile of already sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range over the defined values; `excluded` counts the `None`s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub n: usize,
    pub excluded: usize,
}

pub fn summarize(values: impl IntoIterator<Item = Option<f64>>) -> Summary {
    let mut defined = vec![];
    let mut excluded = 0;
    for v in values {
        match v {
            Some(x) => defined.push(x),
            None => excluded += 1,
        }
    }
    defined.sort_by(f64::total_cmp);
    let q = |p| (!defined.is_empty()).then(|| quantile_sorted(&defined, p));
    Summary {
        median: q(0.5),
        q1: q(0.25),
        q3: q(0.75),
        n: defined.len(),
        excluded,
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    summarize(values.iter().map(|&v| Some(v))).median
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub weak: String,
    pub strong: String,
    pub weak_proxy: f64,
    pub strong_proxy: f64,
    pub loss: String,
    pub label_source: String,
    pub runs: usize,
    pub weak_acc: Summary,
    pub ceiling_acc: Summary,
    pub w2s_acc_final: Summary,
    pub w2s_acc_best: Summary,
    pub pgr_final: Summary,
    pub pgr_best: Summary,
    pub pgr_early_stopped: Summary,
    pub agreement_overall: Summary,
    pub agreement_sup_correct: Summary,
    pub agreement_sup_wrong: Summary,
}

/// Groups records by (weak, strong, loss, label source) and summarizes each group over seeds.
pub fn summarize_grid(records: &[RunRecord]) -> Vec<GridSummary> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.weak.clone(), r.strong.clone(), r.loss.clone(), r.label_source.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((weak, strong, loss, label_source), rs)| {
            let s = |f: &dyn Fn(&RunRecord) -> Option<f64>| summarize(rs.iter().map(|r| f(r)));
            GridSummary {
                weak,
                strong,
                weak_proxy: rs[0].weak_proxy,
                strong_proxy: rs[0].strong_proxy,
                loss,
                label_source,
                runs: rs.len(),
                weak_acc: s(&|r| Some(r.weak_acc)),
                ceiling_acc: s(&|r| Some(r.ceiling_acc)),
                w2s_acc_final: s(&|r| Some(r.w2s_acc_final)),
                w2s_acc_best: s(&|r| Some(r.w2s_acc_best)),
                pgr_final: s(&|r| r.pgr_final),
                pgr_best: s(&|r| r.pgr_best),
                pgr_early_stopped: s(&|r| r.pgr_early_stopped),
                agreement_overall: s(&|r| r.agreement.overall),
                agreement_sup_correct: s(&|r| r.agreement.on_supervisor_correct),
                agreement_sup_wrong: s(&|r| r.agreement.on_supervisor_wrong),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn summary_cells(s: &Summary) -> [String; 5] {
    [
        opt(s.median),
        opt(s.q1),
        opt(s.q3),
        s.n.to_string(),
        s.excluded.to_string(),
    ]
}

fn summary_header(name: &str) -> [String; 5] {
    [
        format!("{name}_median"),
        format!("{name}_q1"),
        format!("{name}_q3"),
        format!("{name}_n"),
        format!("{name}_excluded"),
    ]
}

/// Writes one summary table; `metrics` picks the columns. Every row carries the config hash
/// and tool version.
type SummaryField = fn(&GridSummary) -> &Summary;

fn write_table(
    path: &Path,
    summaries: &[GridSummary],
    metrics: &[(&str, SummaryField)],
    config_hash: &str,
    tool_version: &str,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "weak",
        "strong",
        "weak_proxy",
        "strong_proxy",
        "loss",
        "label_source",
        "runs",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for (name, _) in metrics {
        header.extend(summary_header(name));
    }
    header.push("config_hash".into());
    header.push("tool_version".into());
    w.write_record(&header)?;
    for g in summaries {
        let mut row = vec![
            g.weak.clone(),
            g.strong.clone(),
            g.weak_proxy.to_string(),
            g.strong_proxy.to_string(),
            g.loss.clone(),
            g.label_source.clone(),
            g.runs.to_string(),
        ];
        for (_, f) in metrics {
            row.extend(summary_cells(f(g)));
        }
        row.push(config_hash.to_string());
        row.push(tool_version.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes report_pgr.csv, report_agreement.csv and report_best_vs_final.csv into `dir`.
pub fn write_reports(
    dir: &Path,
    summaries: &[GridSummary],
    config_hash: &str,
    tool_version: &str,
) -> Result<(), MetricsError> {
    write_table(
        &dir.join("report_pgr.csv"),
        summaries,
        &[
            ("weak_acc", |g| &g.weak_acc),
            ("ceiling_acc", |g| &g.ceiling_acc),
            ("w2s_acc_final", |g| &g.w2s_acc_final),
            ("pgr_final", |g| &g.pgr_final),
        ],
        config_hash,
        tool_version,
    )?;
    write_table(
        &dir.join("report_agreement.csv"),
        summaries,
        &[
            ("agreement_overall", |g| &g.agreement_overall),
            ("agreement_sup_correct", |g| &g.agreement_sup_correct),
            ("agreement_sup_wrong", |g| &g.agreement_sup_wrong),
        ],
        config_hash,
        tool_version,
    )?;
    write_table(
        &dir.join("report_best_vs_final.csv"),
        summaries,
        &[
            ("w2s_acc_final", |g| &g.w2s_acc_final),
            ("w2s_acc_best", |g| &g.w2s_acc_best),
            ("pgr_final", |g| &g.pgr_final),
            ("pgr_best", |g| &g.pgr_best),
            ("pgr_early_stopped", |g| &g.pgr_early_stopped),
        ],
        config_hash,
        tool_version,
    )
}
