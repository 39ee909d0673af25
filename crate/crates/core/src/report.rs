//! Result tables and the audit summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackOutcome, Condition, SweepRow};
use crate::config::Seeds;
use crate::error::{Error, Result};
use crate::intervention::InterventionReport;
use crate::io::Provenance;
use crate::metrics::{self, DisparityRow};
use crate::model::TrainReport;
use crate::subspace::{Method, SweepCell};

/// Column name of a condition in WER tables.
pub fn column_name(condition: Condition) -> &'static str {
    match condition {
        Condition::Accent => "accent_subspace",
        c => c.as_str(),
    }
}

fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::io("flushing CSV", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

fn pct(v: f64) -> String {
    format!("{:.4}", v * 100.0)
}

/// Per-accent mean WER (%) by condition, then `mean` and `disparity` (pp) rows.
pub fn wer_table_csv(columns: &[(String, DisparityRow)], provenance: Option<&Provenance>) -> Result<String> {
    let first = columns
        .first()
        .ok_or_else(|| Error::Config("WER table needs at least one column".into()))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["accent".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for accent in first.1.per_accent_mean_wer.keys() {
        let mut rec = vec![accent.clone()];
        for (name, row) in columns {
            let v = row
                .per_accent_mean_wer
                .get(accent)
                .ok_or_else(|| Error::Config(format!("column `{name}` lacks accent `{accent}`")))?;
            rec.push(pct(*v));
        }
        w.write_record(&rec)?;
    }
    let mut mean = vec!["mean".to_string()];
    mean.extend(columns.iter().map(|(_, r)| pct(r.mean_wer)));
    w.write_record(&mean)?;
    let mut disp = vec!["disparity".to_string()];
    disp.extend(columns.iter().map(|(_, r)| format!("{:.4}", r.disparity_pp)));
    w.write_record(&disp)?;
    Ok(provenance.map(|p| p.csv_comment()).unwrap_or_default() + &csv_string(w)?)
}

/// Parse a WER table (percent values; `#` comment lines, `mean` and
/// `disparity` rows ignored) and recompute each column's summary.
pub fn read_wer_table(text: &str) -> Result<Vec<(String, DisparityRow)>> {
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "accent" {
        return Err(Error::Config("WER table must start with an `accent` column".into()));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut means: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); names.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let label = rec.get(0).unwrap_or_default().trim();
        if label == "mean" || label == "disparity" {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Manifest {
                line: i as u64 + 2,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (j, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Manifest {
                line: i as u64 + 2,
                message: format!("`{field}` is not a number"),
            })?;
            means[j].insert(label.to_string(), v / 100.0);
        }
    }
    names
        .into_iter()
        .zip(means)
        .map(|(n, m)| Ok((n, DisparityRow::from_means(m)?)))
        .collect()
}

/// Layer × k × method sweep with probe accuracy, split-half angle and
/// WER-projection correlation.
pub fn sweep_csv(cells: &[SweepCell], provenance: Option<&Provenance>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "layer",
        "k",
        "method",
        "ridge_lambda",
        "probe_accuracy",
        "split_half_angle_deg",
        "wer_projection_r",
        "skipped",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for c in cells {
        let cand = c.candidate.as_ref();
        w.write_record([
            c.layer.to_string(),
            c.k.to_string(),
            c.method.to_string(),
            opt(cand.and_then(|x| x.ridge_lambda)),
            opt(cand.map(|x| x.probe_accuracy)),
            opt(cand.map(|x| x.split_half_angle_deg)),
            opt(cand.and_then(|x| x.wer_projection_r)),
            c.skipped.clone().unwrap_or_default(),
        ])?;
    }
    Ok(provenance.map(|p| p.csv_comment()).unwrap_or_default() + &csv_string(w)?)
}

/// Per-utterance coupling against WER change, all attacked conditions.
pub fn coupling_csv(outcomes: &[AttackOutcome], provenance: Option<&Provenance>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "accent", "condition", "coupling", "delta_wer", "snr_db"])?;
    for o in outcomes.iter().filter(|o| o.condition != Condition::Clean) {
        w.write_record([
            o.id.clone(),
            o.accent.clone(),
            o.condition.to_string(),
            format!("{}", o.coupling),
            format!("{}", o.delta_wer),
            o.snr_db.map(|v| format!("{v}")).unwrap_or_else(|| "inf".into()),
        ])?;
    }
    Ok(provenance.map(|p| p.csv_comment()).unwrap_or_default() + &csv_string(w)?)
}

/// ε × condition grid of mean WER (%) and disparity (pp).
pub fn epsilon_sweep_csv(rows: &[SweepRow], provenance: Option<&Provenance>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epsilon", "condition", "mean_wer", "disparity_pp", "mean_coupling"])?;
    for r in rows {
        w.write_record([
            format!("{}", r.epsilon),
            r.condition.to_string(),
            pct(r.mean_wer),
            format!("{:.4}", r.disparity_pp),
            format!("{}", r.mean_coupling),
        ])?;
    }
    Ok(provenance.map(|p| p.csv_comment()).unwrap_or_default() + &csv_string(w)?)
}

/// Mean over accents of `a − b` in percentage points, and how many accents
/// have a positive difference.
pub fn per_accent_gap(a: &DisparityRow, b: &DisparityRow) -> Result<(f64, usize)> {
    let mut diffs = Vec::new();
    for (accent, va) in &a.per_accent_mean_wer {
        let vb = b
            .per_accent_mean_wer
            .get(accent)
            .ok_or_else(|| Error::UnknownAccent(accent.clone()))?;
        diffs.push((va - vb) * 100.0);
    }
    if diffs.is_empty() {
        return Err(Error::Config("no accents to compare".into()));
    }
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    Ok((diffs.iter().sum::<f64>() / diffs.len() as f64, positive))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSummary {
    pub layer: usize,
    pub k: usize,
    pub method: Method,
    pub ridge_lambda: Option<f64>,
    pub within_threshold: bool,
    pub validation_probe_accuracy: f64,
    pub eval_probe_accuracy: f64,
    pub split_half_angle_deg: f64,
    pub wer_projection_r: Option<f64>,
    pub random_eval_probe_accuracy: f64,
    pub permuted_eval_probe_accuracy: f64,
    pub permuted_split_half_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub mean_wer: f64,
    pub disparity_pp: f64,
    pub mean_coupling: f64,
    pub median_snr_db: Option<f64>,
    pub ascent_fraction: f64,
    pub max_delta_l2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSummary {
    pub alpha: f64,
    pub clean_mean_change_pp: f64,
    pub clean_disparity_change_pp: f64,
    pub attacked_mean_change_pp: f64,
    pub attacked_disparity_change_pp: f64,
    pub random_control_clean_disparity_change_pp: f64,
    pub ood_clean_base: f64,
    pub ood_clean_int: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub clean_disparity_pp: f64,
    pub reference_accent_lowest: bool,
    pub disparity_pp: BTreeMap<String, f64>,
    pub mean_wer: BTreeMap<String, f64>,
    pub coupling_ratio: f64,
    /// Mean per-accent WER gap, accent-subspace minus random-subspace.
    pub accent_gap_pp: f64,
    pub accent_gap_positive: usize,
    /// Mean per-accent WER gap, permuted-label minus random-subspace.
    pub permuted_gap_pp: f64,
    pub permuted_gap_positive: usize,
    /// Accent-subspace minus random-subspace disparity at each sweep budget.
    pub sweep_disparity_gap_pp: Vec<(f64, f64)>,
    pub intervention: InterventionSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub provenance: Provenance,
    pub seeds: Seeds,
    pub training: TrainReport,
    pub subspace: SubspaceSummary,
    pub conditions: Vec<ConditionSummary>,
    pub wer_table: BTreeMap<String, DisparityRow>,
    pub epsilon_sweep: Vec<SweepRow>,
    pub intervention: InterventionReport,
    pub random_control_clean: DisparityRow,
    pub headline: Headline,
}

/// Summary of one condition's outcomes.
pub fn condition_summary(condition: Condition, outcomes: &[AttackOutcome], accents: &[String]) -> Result<ConditionSummary> {
    let row = crate::attack::summarize(outcomes, accents)?;
    let snr: Vec<f64> = outcomes.iter().filter_map(|o| o.snr_db).collect();
    Ok(ConditionSummary {
        condition,
        mean_wer: row.mean_wer,
        disparity_pp: row.disparity_pp,
        mean_coupling: crate::attack::mean_coupling(outcomes),
        median_snr_db: metrics::median(&snr),
        ascent_fraction: crate::attack::ascent_fraction(outcomes),
        max_delta_l2: outcomes.iter().map(|o| o.delta_l2).fold(0.0, f64::max),
    })
}

/// Sweep gap (accent − random disparity) per budget.
pub fn sweep_disparity_gap(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let find = |eps: f64, c: Condition| {
        rows.iter()
            .find(|r| r.epsilon.to_bits() == eps.to_bits() && r.condition == c)
            .map(|r| r.disparity_pp)
    };
    let mut eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    eps.dedup_by(|a, b| a.to_bits() == b.to_bits());
    eps.into_iter()
        .filter_map(|e| Some((e, find(e, Condition::Accent)? - find(e, Condition::Random)?)))
        .collect()
}
