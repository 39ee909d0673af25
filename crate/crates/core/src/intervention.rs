//! Partial project-out `h ← h − α U Uᵀ h` applied by a forward hook at the
//! subspace layer, and its effect on clean and attacked WER.
//!
//! Attacks are crafted against the un-hooked model; the hook is only used when
//! transcribing.

use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::metrics::{self, DisparityRow};
use crate::model::{mean_pool, HiddenStates, Model};
use crate::subspace::Subspace;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyTo {
    /// Project every frame.
    #[default]
    PerFrame,
    /// Subtract the projection of the pooled state from every frame.
    PooledEquivalent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub alpha: f64,
    pub apply_to: ApplyTo,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            apply_to: ApplyTo::PerFrame,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("intervention alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Remove `alpha` of the component of each row of `h` that lies in span(`basis`).
///
/// `alpha` is not range-checked here so that the α → 0 limit can be probed.
pub fn project_out(h: &DMatrix<f64>, basis: &DMatrix<f64>, alpha: f64, apply_to: ApplyTo) -> Result<DMatrix<f64>> {
    if h.ncols() != basis.nrows() {
        return Err(Error::Dimension(format!(
            "states have width {} but the basis lives in dimension {}",
            h.ncols(),
            basis.nrows()
        )));
    }
    if basis.ncols() == 0 {
        return Ok(h.clone());
    }
    Ok(match apply_to {
        ApplyTo::PerFrame => h - (h * basis) * basis.transpose() * alpha,
        ApplyTo::PooledEquivalent => {
            let pooled = mean_pool(h);
            let shift: DVector<f64> = basis * (basis.transpose() * pooled) * alpha;
            let mut out = h.clone();
            for mut row in out.row_iter_mut() {
                row -= shift.transpose();
            }
            out
        }
    })
}

/// Forward pass with the project-out hook at the subspace layer. Earlier
/// layers are untouched; later layers and the logits see the modified states.
pub fn forward_with_hook(
    model: &Model,
    wave: &[f64],
    subspace: &Subspace,
    config: &InterventionConfig,
) -> Result<HiddenStates> {
    let n_layers = model.config().n_layers;
    if subspace.layer == 0 || subspace.layer > n_layers {
        return Err(Error::LayerOutOfRange {
            layer: subspace.layer,
            n_layers,
        });
    }
    if subspace.d() != model.config().hidden_dim {
        return Err(Error::Dimension(format!(
            "subspace dimension {} differs from hidden width {}",
            subspace.d(),
            model.config().hidden_dim
        )));
    }
    let hook = |layer: usize, h: &mut DMatrix<f64>| {
        if layer == subspace.layer {
            *h = project_out(h, &subspace.basis, config.alpha, config.apply_to)
                .expect("dimensions checked before the forward pass");
        }
    };
    model.forward_with(wave, Some(&hook))
}

pub fn transcribe_with_hook(
    model: &Model,
    wave: &[f64],
    subspace: &Subspace,
    config: &InterventionConfig,
) -> Result<Vec<u32>> {
    Ok(Model::decode_logits(&forward_with_hook(model, wave, subspace, config)?.logits))
}

/// One accent's row of the intervention table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionRow {
    pub label: String,
    pub clean_base: f64,
    pub clean_int: f64,
    pub att_base: f64,
    pub att_int: f64,
}

/// Distance of activations after the hooked layer from their clean
/// distribution (per-dimension mean and variance of un-hooked clean frames).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodDiagnostic {
    /// Layer whose activations are measured; `n_layers + 1` means the logits.
    pub layer: usize,
    pub clean_base: f64,
    pub clean_int: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub alpha: f64,
    pub layer: usize,
    pub rows: Vec<InterventionRow>,
    pub mean: InterventionRow,
    pub disparity: InterventionRow,
    pub ood: OodDiagnostic,
}

impl InterventionReport {
    pub fn clean_disparity_change_pp(&self) -> f64 {
        self.disparity.clean_int - self.disparity.clean_base
    }

    pub fn attacked_disparity_change_pp(&self) -> f64 {
        self.disparity.att_int - self.disparity.att_base
    }

    /// CSV with WER in percent: one row per accent, then `mean` and `disparity`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["accent", "clean_base", "clean_int", "att_base", "att_int"])?;
        let pct = |r: &InterventionRow, scale: f64| {
            [r.clean_base, r.clean_int, r.att_base, r.att_int].map(|v| format!("{:.4}", v * scale))
        };
        for r in &self.rows {
            let v = pct(r, 100.0);
            w.write_record([r.label.as_str(), &v[0], &v[1], &v[2], &v[3]])?;
        }
        let v = pct(&self.mean, 100.0);
        w.write_record(["mean", &v[0], &v[1], &v[2], &v[3]])?;
        let v = pct(&self.disparity, 1.0);
        w.write_record(["disparity", &v[0], &v[1], &v[2], &v[3]])?;
        let bytes = w.into_inner().map_err(|e| Error::io("flushing CSV", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
    }
}

struct Scored {
    accent: String,
    clean_base: f64,
    clean_int: f64,
    att_base: f64,
    att_int: f64,
    probe_base: DMatrix<f64>,
    probe_int: DMatrix<f64>,
}

fn probe_states(states: &HiddenStates, layer: usize) -> DMatrix<f64> {
    if layer <= states.layers.len() {
        states.layers[layer - 1].clone()
    } else {
        states.logits.clone()
    }
}

fn score_one(
    model: &Model,
    u: &Utterance,
    attacked: &[f32],
    subspace: &Subspace,
    config: &InterventionConfig,
    probe_layer: usize,
) -> Result<Scored> {
    let x = u.samples();
    let adv: Vec<f64> = attacked.iter().map(|&v| v as f64).collect();
    if adv.len() != x.len() {
        return Err(Error::Dimension(format!(
            "attacked audio for {} has {} samples, expected {}",
            u.id,
            adv.len(),
            x.len()
        )));
    }
    let base = model.forward(&x)?;
    let hooked = forward_with_hook(model, &x, subspace, config)?;
    let wer = |logits: &DMatrix<f64>| metrics::wer(&Model::decode_logits(logits), &u.text);
    Ok(Scored {
        accent: u.accent.clone(),
        clean_base: wer(&base.logits)?,
        clean_int: wer(&hooked.logits)?,
        att_base: wer(&model.forward(&adv)?.logits)?,
        att_int: wer(&forward_with_hook(model, &adv, subspace, config)?.logits)?,
        probe_base: probe_states(&base, probe_layer),
        probe_int: probe_states(&hooked, probe_layer),
    })
}

fn mean_mahalanobis(frames: &[&DMatrix<f64>], mean: &DVector<f64>, var: &DVector<f64>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for m in frames {
        for row in m.row_iter() {
            let d2: f64 = row
                .iter()
                .zip(mean.iter().zip(var.iter()))
                .map(|(h, (mu, v))| (h - mu).powi(2) / v)
                .sum();
            total += d2.sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn ood_diagnostic(layer: usize, scored: &[Scored]) -> OodDiagnostic {
    let base: Vec<&DMatrix<f64>> = scored.iter().map(|s| &s.probe_base).collect();
    let hooked: Vec<&DMatrix<f64>> = scored.iter().map(|s| &s.probe_int).collect();
    let width = base.first().map_or(0, |m| m.ncols());
    let n: usize = base.iter().map(|m| m.nrows()).sum();
    let mut mean = DVector::zeros(width);
    for m in &base {
        for row in m.row_iter() {
            mean += row.transpose();
        }
    }
    mean /= n.max(1) as f64;
    let mut var = DVector::zeros(width);
    for m in &base {
        for row in m.row_iter() {
            var += (row.transpose() - &mean).map(|v| v * v);
        }
    }
    var /= n.max(1) as f64;
    var.iter_mut().for_each(|v| *v = v.max(1e-12));
    OodDiagnostic {
        layer,
        clean_base: mean_mahalanobis(&base, &mean, &var),
        clean_int: mean_mahalanobis(&hooked, &mean, &var),
    }
}

/// Transcribe clean and attacked audio with and without the hook.
///
/// `attacked` maps utterance id to the adversarial waveform crafted without
/// the hook; every utterance in `eval` must have an entry.
pub fn evaluate_intervention(
    model: &Model,
    eval: &[&Utterance],
    attacked: &BTreeMap<String, Vec<f32>>,
    subspace: &Subspace,
    config: &InterventionConfig,
    accents: &[String],
) -> Result<InterventionReport> {
    if let Some(u) = eval.iter().find(|u| !attacked.contains_key(&u.id)) {
        return Err(Error::MissingDependency {
            path: PathBuf::from(format!("attacked audio for {}", u.id)),
            command: "attack",
        });
    }
    let probe_layer = subspace.layer + 1;
    let scored: Vec<Scored> = eval
        .par_iter()
        .map(|u| score_one(model, u, &attacked[&u.id], subspace, config, probe_layer))
        .collect::<Result<_>>()?;

    let column = |f: fn(&Scored) -> f64| -> Result<DisparityRow> {
        let means = metrics::per_accent_mean(scored.iter().map(|s| (s.accent.as_str(), f(s))), accents)?;
        DisparityRow::from_means(means)
    };
    let cols = [
        column(|s| s.clean_base)?,
        column(|s| s.clean_int)?,
        column(|s| s.att_base)?,
        column(|s| s.att_int)?,
    ];
    let rows = cols[0]
        .per_accent_mean_wer
        .keys()
        .map(|a| InterventionRow {
            label: a.clone(),
            clean_base: cols[0].per_accent_mean_wer[a],
            clean_int: cols[1].per_accent_mean_wer[a],
            att_base: cols[2].per_accent_mean_wer[a],
            att_int: cols[3].per_accent_mean_wer[a],
        })
        .collect();
    let summary = |label: &str, f: fn(&DisparityRow) -> f64| InterventionRow {
        label: label.to_string(),
        clean_base: f(&cols[0]),
        clean_int: f(&cols[1]),
        att_base: f(&cols[2]),
        att_int: f(&cols[3]),
    };
    let ood = ood_diagnostic(probe_layer, &scored);
    log::info!(
        "hooked layer {} -> mean diagonal Mahalanobis at layer {}: {:.3} clean, {:.3} hooked",
        subspace.layer,
        probe_layer,
        ood.clean_base,
        ood.clean_int
    );
    Ok(InterventionReport {
        alpha: config.alpha,
        layer: subspace.layer,
        rows,
        mean: summary("mean", |r| r.mean_wer),
        disparity: summary("disparity", |r| r.disparity_pp),
        ood,
    })
}

/// Per-accent clean WER under the hook only (used for control subspaces).
pub fn clean_with_hook(
    model: &Model,
    eval: &[&Utterance],
    subspace: &Subspace,
    config: &InterventionConfig,
    accents: &[String],
) -> Result<DisparityRow> {
    let wers: Vec<(String, f64)> = eval
        .par_iter()
        .map(|u| {
            let hyp = transcribe_with_hook(model, &u.samples(), subspace, config)?;
            Ok((u.accent.clone(), metrics::wer(&hyp, &u.text)?))
        })
        .collect::<Result<_>>()?;
    let means = metrics::per_accent_mean(wers.iter().map(|(a, w)| (a.as_str(), *w)), accents)?;
    DisparityRow::from_means(means)
}
