//! Untargeted waveform PGD with an optional subspace-coupling term.
//!
//! The objective is `CTC(x + δ) + β‖UUᵀ(h(x + δ) − h(x))‖²`, where `h` is the
//! mean-pooled hidden state at the subspace layer. Each step moves `δ` along
//! the normalized gradient, projects it onto the L2 ball of radius ε and clamps
//! `x + δ` to `[−1, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::io::{derive_seed, sha256_hex};
use crate::metrics::{self, DisparityRow};
use crate::model::{mean_pool, Model, SubspaceTerm};
use crate::subspace::Subspace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Unconstrained,
    Random,
    Accent,
    Permuted,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Clean,
        Condition::Unconstrained,
        Condition::Random,
        Condition::Accent,
        Condition::Permuted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Unconstrained => "unconstrained",
            Condition::Random => "random",
            Condition::Accent => "accent",
            Condition::Permuted => "permuted",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attack condition `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L2 radius of δ in waveform units.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 · ε / steps`.
    pub step_size: Option<f64>,
    pub beta: f64,
    /// Couple per-frame states instead of the pooled embedding.
    pub per_frame: bool,
    /// Start from a seeded random point in the ball instead of δ = 0.
    pub random_init: bool,
    /// Budgets for the epsilon sweep, ascending.
    pub epsilons: Vec<f64>,
    /// Conditions attacked in the sweep (clean is always included).
    pub sweep_conditions: Vec<Condition>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            steps: 80,
            step_size: None,
            beta: 1000.0,
            per_frame: false,
            random_init: false,
            epsilons: vec![0.005, 0.01, 0.05],
            sweep_conditions: vec![Condition::Random, Condition::Accent],
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.steps == 0 || !(self.beta >= 0.0) {
            return Err(Error::Config("attack needs epsilon >= 0, steps >= 1 and beta >= 0".into()));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::Config(format!("attack step size must be positive, got {s}")));
            }
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::Config("epsilon sweep needs non-negative budgets".into()));
        }
        if self.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("epsilon sweep budgets must be strictly ascending".into()));
        }
        Ok(())
    }

    pub fn step_size_for(&self, epsilon: f64) -> f64 {
        self.step_size.unwrap_or(2.5 * epsilon / self.steps as f64)
    }

    /// Hash of everything that must match across conditions at one budget.
    pub fn budget_fingerprint(&self, epsilon: f64) -> String {
        let text = format!(
            "eps={epsilon:e};steps={};step={:e};beta={:e};per_frame={};random_init={};seed={}",
            self.steps,
            self.step_size_for(epsilon),
            self.beta,
            self.per_frame,
            self.random_init,
            self.seed
        );
        sha256_hex(text.as_bytes())
    }
}

/// Coupling basis and its layer.
#[derive(Clone, Copy, Debug)]
pub struct Coupling<'a> {
    pub layer: usize,
    pub basis: &'a DMatrix<f64>,
}

impl<'a> From<&'a Subspace> for Coupling<'a> {
    fn from(s: &'a Subspace) -> Self {
        Self {
            layer: s.layer,
            basis: &s.basis,
        }
    }
}

fn reference_states(model: &Model, x: &[f64], coupling: &Coupling<'_>, per_frame: bool) -> Result<DMatrix<f64>> {
    let states = model.forward(x)?;
    let h = states.layer(coupling.layer)?;
    Ok(if per_frame {
        h.clone()
    } else {
        let p = mean_pool(h);
        DMatrix::from_row_slice(1, p.len(), p.as_slice())
    })
}

/// Value of the attack objective at `x + δ`.
pub fn attack_objective(
    model: &Model,
    x: &[f64],
    delta: &[f64],
    text: &[u32],
    coupling: Option<&Coupling<'_>>,
    beta: f64,
    per_frame: bool,
) -> Result<f64> {
    if x.len() != delta.len() {
        return Err(Error::Dimension("waveform and perturbation lengths differ".into()));
    }
    let shifted: Vec<f64> = x.iter().zip(delta).map(|(a, b)| a + b).collect();
    match coupling {
        None => model.objective(&shifted, text, None),
        Some(c) => {
            let reference = reference_states(model, x, c, per_frame)?;
            let term = SubspaceTerm {
                layer: c.layer,
                basis: c.basis,
                beta,
                reference: &reference,
                per_frame,
            };
            model.objective(&shifted, text, Some(&term))
        }
    }
}

/// Result of one PGD run.
#[derive(Clone, Debug, PartialEq)]
pub struct PgdResult {
    /// Perturbed waveform, on the f32 grid.
    pub adversarial: Vec<f32>,
    /// Effective perturbation `adversarial − x`.
    pub delta: Vec<f64>,
    /// Objective before each step and after the last one (`steps + 1` values).
    pub objective_trace: Vec<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn project(delta: &mut [f64], x: &[f64], epsilon: f64) {
    let norm = l2(delta);
    if norm > epsilon {
        let s = epsilon / norm;
        delta.iter_mut().for_each(|d| *d *= s);
    }
    for (d, &xi) in delta.iter_mut().zip(x) {
        *d = (xi + *d).clamp(-1.0, 1.0) - xi;
    }
}

/// Round `y` to an f32 no farther from `x` than `y` is, so that quantizing a
/// perturbed sample never enlarges the perturbation or leaves `[−1, 1]`.
fn round_toward(x: f32, y: f64) -> f32 {
    let mut r = y as f32;
    let xd = x as f64;
    while (r as f64 - xd).abs() > (y - xd).abs() {
        r = if r as f64 > y { r.next_down() } else { r.next_up() };
    }
    r
}

/// Run PGD on one waveform. `x` must lie on the f32 grid in `[−1, 1]`.
pub fn pgd_attack(
    model: &Model,
    x: &[f32],
    text: &[u32],
    config: &AttackConfig,
    epsilon: f64,
    coupling: Option<&Coupling<'_>>,
    seed: u64,
) -> Result<PgdResult> {
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if let Some(&bad) = x.iter().find(|v| !(v.abs() <= 1.0)) {
        return Err(Error::Config(format!("waveform sample {bad} outside [-1, 1]")));
    }
    let xs: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let step = config.step_size_for(epsilon);
    let reference = match coupling {
        Some(c) => Some(reference_states(model, &xs, c, config.per_frame)?),
        None => None,
    };
    let term = match (coupling, &reference) {
        (Some(c), Some(r)) => Some(SubspaceTerm {
            layer: c.layer,
            basis: c.basis,
            beta: config.beta,
            reference: r,
            per_frame: config.per_frame,
        }),
        _ => None,
    };

    let mut delta = vec![0.0; xs.len()];
    if config.random_init && epsilon > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        delta.iter_mut().for_each(|d| *d = StandardNormal.sample(&mut rng));
        let n = l2(&delta).max(f64::MIN_POSITIVE);
        let radius = epsilon * rand::Rng::gen::<f64>(&mut rng);
        delta.iter_mut().for_each(|d| *d *= radius / n);
        project(&mut delta, &xs, epsilon);
    }

    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut point: Vec<f64> = xs.iter().zip(&delta).map(|(a, b)| a + b).collect();
    for it in 0..config.steps {
        let (value, grad) = model.objective_and_input_grad(&point, text, term.as_ref())?;
        trace.push(value);
        let norm = l2(&grad);
        if !norm.is_finite() || !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite objective or gradient at PGD step {it} (objective {value}, gradient norm {norm})"
            )));
        }
        if epsilon == 0.0 || norm == 0.0 {
            continue;
        }
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d += step * g / norm;
        }
        project(&mut delta, &xs, epsilon);
        for ((p, &xi), &d) in point.iter_mut().zip(&xs).zip(&delta) {
            *p = xi + d;
        }
    }

    let adversarial: Vec<f32> = x.iter().zip(&point).map(|(&xi, &p)| round_toward(xi, p)).collect();
    let delta: Vec<f64> = adversarial.iter().zip(x).map(|(&a, &b)| a as f64 - b as f64).collect();
    let adv64: Vec<f64> = adversarial.iter().map(|&v| v as f64).collect();
    trace.push(model.objective(&adv64, text, term.as_ref())?);
    Ok(PgdResult {
        adversarial,
        delta,
        objective_trace: trace,
    })
}

/// `‖UUᵀ(h(x + δ) − h(x))‖` with pooled states at the subspace layer.
pub fn coupling(model: &Model, x: &[f64], adversarial: &[f64], subspace: &Coupling<'_>) -> Result<f64> {
    let a = mean_pool(model.forward(x)?.layer(subspace.layer)?);
    let b = mean_pool(model.forward(adversarial)?.layer(subspace.layer)?);
    Ok((subspace.basis.transpose() * (b - a)).norm())
}

/// Per-utterance attack result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub id: String,
    pub accent: String,
    pub condition: Condition,
    pub epsilon: f64,
    pub delta_l2: f64,
    /// `None` when δ = 0 (infinite SNR).
    pub snr_db: Option<f64>,
    /// Shift measured on the accent subspace.
    pub coupling: f64,
    /// Shift measured on the condition's own subspace, when it has one.
    pub coupling_own: Option<f64>,
    /// Unprojected pooled shift `‖h(x + δ) − h(x)‖`.
    pub embedding_shift: f64,
    pub clean_wer: f64,
    pub attacked_wer: f64,
    pub delta_wer: f64,
    pub reference: Vec<u32>,
    pub clean_transcript: Vec<u32>,
    pub attacked_transcript: Vec<u32>,
    pub objective_initial: Option<f64>,
    pub objective_final: Option<f64>,
    pub max_abs_sample: f64,
    #[serde(skip)]
    pub adversarial: Vec<f32>,
}

impl AttackOutcome {
    /// Final objective at least as large as the starting one.
    pub fn ascended(&self) -> bool {
        match (self.objective_initial, self.objective_final) {
            (Some(a), Some(b)) => b >= a,
            _ => true,
        }
    }
}

/// Subspaces used by the coupled conditions. All must share one layer.
#[derive(Clone, Copy, Debug)]
pub struct ConditionSubspaces<'a> {
    pub accent: &'a Subspace,
    pub random: &'a Subspace,
    pub permuted: &'a Subspace,
}

impl<'a> ConditionSubspaces<'a> {
    pub fn validate(&self) -> Result<()> {
        let l = self.accent.layer;
        if self.random.layer != l || self.permuted.layer != l {
            return Err(Error::Config(format!(
                "control subspaces must share the accent layer {l} (random {}, permuted {})",
                self.random.layer, self.permuted.layer
            )));
        }
        Ok(())
    }

    pub fn for_condition(&self, condition: Condition) -> Option<&'a Subspace> {
        match condition {
            Condition::Clean | Condition::Unconstrained => None,
            Condition::Random => Some(self.random),
            Condition::Accent => Some(self.accent),
            Condition::Permuted => Some(self.permuted),
        }
    }
}

/// Outcomes of one condition at one budget, plus per-utterance failures.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionRun {
    pub condition: Condition,
    pub epsilon: f64,
    pub fingerprint: String,
    pub outcomes: Vec<AttackOutcome>,
    pub failures: Vec<(String, String)>,
}

impl ConditionRun {
    /// Fail if any utterance failed.
    pub fn into_complete(self) -> Result<Vec<AttackOutcome>> {
        if let Some((id, msg)) = self.failures.first() {
            return Err(Error::Numerical(format!(
                "{} of {} attacks failed under `{}` (first: {id}: {msg})",
                self.failures.len(),
                self.failures.len() + self.outcomes.len(),
                self.condition
            )));
        }
        Ok(self.outcomes)
    }
}

fn attack_one(
    model: &Model,
    u: &Utterance,
    condition: Condition,
    config: &AttackConfig,
    epsilon: f64,
    subspaces: &ConditionSubspaces<'_>,
) -> Result<AttackOutcome> {
    let x = u.samples();
    let accent_coupling = Coupling::from(subspaces.accent);
    let clean_transcript = model.transcribe(&x)?;
    let clean_wer = metrics::wer(&clean_transcript, &u.text)?;
    let own = subspaces.for_condition(condition);

    let (adversarial, objective_initial, objective_final) = if condition == Condition::Clean {
        (u.waveform.clone(), None, None)
    } else {
        let c = own.map(Coupling::from);
        let seed = derive_seed(config.seed, &format!("pgd/{condition}/{}", u.id));
        let r = pgd_attack(model, &u.waveform, &u.text, config, epsilon, c.as_ref(), seed)?;
        let first = r.objective_trace.first().copied();
        let last = r.objective_trace.last().copied();
        (r.adversarial, first, last)
    };
    let adv: Vec<f64> = adversarial.iter().map(|&v| v as f64).collect();
    let delta: Vec<f64> = adv.iter().zip(&x).map(|(a, b)| a - b).collect();
    let delta_l2 = l2(&delta);
    let snr = metrics::snr_db(&x, &delta);

    let (attacked_transcript, coupling_m, own_m, shift) = if condition == Condition::Clean {
        (clean_transcript.clone(), 0.0, own.map(|_| 0.0), 0.0)
    } else {
        let states_clean = model.forward(&x)?;
        let states_adv = model.forward(&adv)?;
        let layer = accent_coupling.layer;
        let diff = mean_pool(states_adv.layer(layer)?) - mean_pool(states_clean.layer(layer)?);
        let m = (accent_coupling.basis.transpose() * &diff).norm();
        let own_m = own.map(|s| (s.basis.transpose() * &diff).norm());
        (Model::decode_logits(&states_adv.logits), m, own_m, diff.norm())
    };
    let attacked_wer = metrics::wer(&attacked_transcript, &u.text)?;
    Ok(AttackOutcome {
        id: u.id.clone(),
        accent: u.accent.clone(),
        condition,
        epsilon,
        delta_l2,
        snr_db: snr.is_finite().then_some(snr),
        coupling: coupling_m,
        coupling_own: own_m,
        embedding_shift: shift,
        clean_wer,
        attacked_wer,
        delta_wer: attacked_wer - clean_wer,
        reference: u.text.clone(),
        clean_transcript,
        attacked_transcript,
        objective_initial,
        objective_final,
        max_abs_sample: adversarial.iter().fold(0.0f64, |m, v| m.max(v.abs() as f64)),
        adversarial,
    })
}

/// Attack every utterance under one condition. Runs in parallel; the result
/// order follows `utterances`.
pub fn run_condition(
    model: &Model,
    utterances: &[&Utterance],
    condition: Condition,
    config: &AttackConfig,
    epsilon: f64,
    subspaces: &ConditionSubspaces<'_>,
) -> Result<ConditionRun> {
    config.validate()?;
    subspaces.validate()?;
    let results: Vec<Result<AttackOutcome>> = utterances
        .par_iter()
        .map(|u| attack_one(model, u, condition, config, epsilon, subspaces))
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (u, r) in utterances.iter().zip(results) {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("attack on {} under `{condition}` failed: {e}", u.id);
                failures.push((u.id.clone(), e.to_string()));
            }
        }
    }
    Ok(ConditionRun {
        condition,
        epsilon,
        fingerprint: config.budget_fingerprint(epsilon),
        outcomes,
        failures,
    })
}

/// Per-accent WER of attacked transcripts.
pub fn summarize(outcomes: &[AttackOutcome], accents: &[String]) -> Result<DisparityRow> {
    let means = metrics::per_accent_mean(outcomes.iter().map(|o| (o.accent.as_str(), o.attacked_wer)), accents)?;
    DisparityRow::from_means(means)
}

/// Mean coupling over outcomes.
pub fn mean_coupling(outcomes: &[AttackOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().map(|o| o.coupling).sum::<f64>() / outcomes.len() as f64
}

/// Fraction of outcomes whose objective did not decrease.
pub fn ascent_fraction(outcomes: &[AttackOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 1.0;
    }
    outcomes.iter().filter(|o| o.ascended()).count() as f64 / outcomes.len() as f64
}

/// One cell of the epsilon sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub condition: Condition,
    pub mean_wer: f64,
    pub disparity_pp: f64,
    pub per_accent_mean_wer: BTreeMap<String, f64>,
    pub mean_coupling: f64,
}

/// Key for reusing already computed runs in the sweep.
pub fn run_key(epsilon: f64, condition: Condition) -> (u64, Condition) {
    (epsilon.to_bits(), condition)
}

/// Evaluate the (ε × condition) grid. Runs present in `cached` are reused.
pub fn epsilon_sweep(
    model: &Model,
    utterances: &[&Utterance],
    accents: &[String],
    config: &AttackConfig,
    subspaces: &ConditionSubspaces<'_>,
    cached: &BTreeMap<(u64, Condition), Vec<AttackOutcome>>,
) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut conditions = vec![Condition::Clean];
    conditions.extend(config.sweep_conditions.iter().copied().filter(|c| *c != Condition::Clean));
    let mut rows = Vec::new();
    for &epsilon in &config.epsilons {
        for &condition in &conditions {
            let computed;
            let outcomes = match cached.get(&run_key(epsilon, condition)) {
                Some(o) => o,
                None => {
                    computed = run_condition(model, utterances, condition, config, epsilon, subspaces)?.into_complete()?;
                    &computed
                }
            };
            let row = summarize(outcomes, accents)?;
            rows.push(SweepRow {
                epsilon,
                condition,
                mean_wer: row.mean_wer,
                disparity_pp: row.disparity_pp,
                per_accent_mean_wer: row.per_accent_mean_wer,
                mean_coupling: mean_coupling(outcomes),
            });
        }
    }
    Ok(rows)
}
