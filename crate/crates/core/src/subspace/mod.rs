//! Accent-discriminative subspaces of pooled hidden states.
//!
//! A [`Subspace`] is an orthonormal `d × k` basis at one encoder layer,
//! together with the fit-set centring vector and the fit-set class centroids
//! in projected coordinates (used by the nearest-centroid probe).

pub mod fit;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::io::{derive_seed, write_file, Provenance};
use crate::metrics;
use crate::model::{mean_pool, Model};
pub use fit::ProbeSettings;

/// Tolerance for accepting a basis as orthonormal.
const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ridge,
    Lda,
    CentroidDiff,
    LinearProbe,
    Random,
    Permuted,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ridge => "ridge",
            Method::Lda => "lda",
            Method::CentroidDiff => "centroid_diff",
            Method::LinearProbe => "linear_probe",
            Method::Random => "random",
            Method::Permuted => "permuted",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ridge" => Method::Ridge,
            "lda" => Method::Lda,
            "centroid_diff" => Method::CentroidDiff,
            "linear_probe" => Method::LinearProbe,
            "random" => Method::Random,
            "permuted" => Method::Permuted,
            other => return Err(Error::Config(format!("unknown subspace method `{other}`"))),
        })
    }
}

/// Hyperparameters shared by the learned fitting methods.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSpec {
    pub method: Method,
    pub k: usize,
    pub ridge_lambda: f64,
    pub lda_shrinkage: Option<f64>,
    pub probe: ProbeSettings,
}

impl FitSpec {
    pub fn new(method: Method, k: usize) -> Self {
        Self {
            method,
            k,
            ridge_lambda: 1e-2,
            lda_shrinkage: None,
            probe: ProbeSettings::default(),
        }
    }
}

/// Fit a basis with a learned method. `Random` and `Permuted` are not data
/// fits on their own; see [`random_subspace`] and [`permuted_label_subspace`].
pub fn fit_basis(x: &DMatrix<f64>, labels: &[usize], n_classes: usize, spec: &FitSpec) -> Result<DMatrix<f64>> {
    match spec.method {
        Method::Ridge => fit::fit_ridge(x, labels, n_classes, spec.k, spec.ridge_lambda),
        Method::Lda => fit::fit_lda(x, labels, n_classes, spec.k, spec.lda_shrinkage),
        Method::CentroidDiff => fit::fit_centroid_diff(x, labels, n_classes, spec.k),
        Method::LinearProbe => fit::fit_linear_probe(x, labels, n_classes, spec.k, &spec.probe),
        Method::Random | Method::Permuted => Err(Error::Config(format!(
            "`{}` is not a direct fitting method",
            spec.method
        ))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub probe_accuracy: Option<f64>,
    pub split_half_angle_deg: Option<f64>,
    pub wer_projection_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    /// d × k, orthonormal columns.
    pub basis: DMatrix<f64>,
    pub layer: usize,
    pub method: Method,
    pub fit_seed: u64,
    /// Fit-set embedding mean.
    pub center: DVector<f64>,
    /// Fit-set class centroids in projected coordinates (n_classes × k).
    pub centroids: DMatrix<f64>,
    pub diagnostics: Diagnostics,
}

impl Subspace {
    /// Wrap a basis and record the fit-set centre and class centroids.
    pub fn from_fit(
        basis: DMatrix<f64>,
        layer: usize,
        method: Method,
        fit_seed: u64,
        x: &DMatrix<f64>,
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self> {
        fit::check_inputs(x, labels, n_classes)?;
        check_orthonormal(&basis)?;
        if basis.nrows() != x.ncols() {
            return Err(Error::Dimension(format!(
                "basis has {} rows, embeddings have {} columns",
                basis.nrows(),
                x.ncols()
            )));
        }
        let center = fit::column_mean(x);
        let coords = fit::center_rows(x, &center) * &basis;
        let (centroids, _) = fit::class_means(&coords, labels, n_classes);
        Ok(Self {
            basis,
            layer,
            method,
            fit_seed,
            center,
            centroids,
            diagnostics: Diagnostics::default(),
        })
    }

    pub fn d(&self) -> usize {
        self.basis.nrows()
    }

    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn projector(&self) -> Projector {
        Projector::new(&self.basis)
    }

    /// Projected coordinates `Uᵀ(e − c)` for each row.
    pub fn coordinates(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.d() {
            return Err(Error::Dimension(format!(
                "embeddings have {} columns, subspace expects {}",
                x.ncols(),
                self.d()
            )));
        }
        Ok(fit::center_rows(x, &self.center) * &self.basis)
    }

    /// Nearest-centroid accuracy in projected space, with centroids from the
    /// fit set.
    pub fn probe_accuracy(&self, x: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
        if x.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Dimension("probe needs one label per embedding".into()));
        }
        let coords = self.coordinates(x)?;
        let correct = coords
            .row_iter()
            .zip(labels)
            .filter(|(row, &l)| nearest(&self.centroids, &row.transpose()) == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Per-row projection norms `‖Uᵀ(e − c)‖`.
    pub fn projection_norms(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        Ok(self.coordinates(x)?.row_iter().map(|r| r.norm()).collect())
    }
}

fn nearest(centroids: &DMatrix<f64>, v: &DVector<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.row_iter().enumerate() {
        let dist = (row.transpose() - v).norm_squared();
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best.0
}

/// Nearest-centroid accuracy with centroids computed from `(train, train_labels)`.
pub fn nearest_centroid_accuracy(
    train: &DMatrix<f64>,
    train_labels: &[usize],
    test: &DMatrix<f64>,
    test_labels: &[usize],
) -> Result<f64> {
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() || test_labels.is_empty() {
        return Err(Error::Dimension("nearest-centroid probe needs one label per row".into()));
    }
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = train_labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let n = classes.last().map_or(0, |m| m + 1);
    let (means, counts) = fit::class_means(train, train_labels, n);
    let mut correct = 0;
    for (row, &l) in test.row_iter().zip(test_labels) {
        let v = row.transpose();
        let pred = classes
            .iter()
            .copied()
            .filter(|&c| counts[c] > 0)
            .min_by(|&a, &b| {
                (means.row(a).transpose() - &v)
                    .norm_squared()
                    .total_cmp(&(means.row(b).transpose() - &v).norm_squared())
            })
            .expect("at least one training class");
        if pred == l {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub p: DMatrix<f64>,
}

impl Projector {
    pub fn new(basis: &DMatrix<f64>) -> Self {
        Self {
            p: basis * basis.transpose(),
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.p * x
    }

    /// `‖P² − P‖` in the max norm.
    pub fn idempotency_error(&self) -> f64 {
        (&self.p * &self.p - &self.p).amax()
    }
}

/// `‖UᵀU − I‖` in the max norm.
pub fn orthonormality_error(basis: &DMatrix<f64>) -> f64 {
    let k = basis.ncols();
    (basis.transpose() * basis - DMatrix::identity(k, k)).amax()
}

fn check_orthonormal(basis: &DMatrix<f64>) -> Result<()> {
    let err = orthonormality_error(basis);
    if !(err < ORTHONORMAL_TOL) {
        return Err(Error::NotOrthonormal(err));
    }
    Ok(())
}

/// Principal angles in degrees, ascending. Small angles come from the sines
/// (singular values of `U₂ − U₁U₁ᵀU₂`), large ones from the cosines.
pub fn principal_angles(u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> Result<Vec<f64>> {
    if u1.shape() != u2.shape() {
        return Err(Error::Dimension(format!(
            "principal angles need equal shapes, got {:?} and {:?}",
            u1.shape(),
            u2.shape()
        )));
    }
    check_orthonormal(u1)?;
    check_orthonormal(u2)?;
    let m = u1.transpose() * u2;
    let mut cosines: Vec<f64> = m.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    cosines.sort_by(|a, b| b.total_cmp(a));
    let mut sines: Vec<f64> = (u2 - u1 * &m).singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sines.sort_by(f64::total_cmp);
    let mut angles: Vec<f64> = cosines
        .iter()
        .zip(&sines)
        .map(|(&c, &s)| if c * c >= 0.5 { s.asin() } else { c.acos() }.to_degrees())
        .collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Seeded permutation of `0..n`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Labels reassigned along a permutation of the rows: row `i` gets `labels[perm[i]]`.
pub fn permute_labels(labels: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    if perm.len() != labels.len() {
        return Err(Error::Dimension("permutation length differs from label count".into()));
    }
    Ok(perm.iter().map(|&i| labels[i]).collect())
}

/// Orthonormal Gaussian control subspace. Its centroids are computed from
/// `(x, labels)` so that it can be probed like a learned subspace.
pub fn random_subspace(
    layer: usize,
    k: usize,
    seed: u64,
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
) -> Result<Subspace> {
    let basis = fit::random_basis(x.ncols(), k, seed)?;
    Subspace::from_fit(basis, layer, Method::Random, seed, x, labels, n_classes)
}

/// Fit `spec.method` on labels shuffled by a seeded permutation.
pub fn permuted_label_subspace(
    layer: usize,
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    spec: &FitSpec,
    seed: u64,
) -> Result<Subspace> {
    let perm = seeded_permutation(labels.len(), seed);
    permuted_label_subspace_with(layer, x, labels, n_classes, spec, seed, &perm)
}

/// As [`permuted_label_subspace`] with an explicit permutation.
pub fn permuted_label_subspace_with(
    layer: usize,
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    spec: &FitSpec,
    seed: u64,
    perm: &[usize],
) -> Result<Subspace> {
    let shuffled = permute_labels(labels, perm)?;
    let basis = fit_basis(x, &shuffled, n_classes, spec)?;
    Subspace::from_fit(basis, layer, Method::Permuted, seed, x, &shuffled, n_classes)
}

const SPLIT_RETRIES: usize = 10;

/// Largest principal angle between fits on two disjoint random halves.
pub fn split_half_stability(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    spec: &FitSpec,
    seed: u64,
) -> Result<f64> {
    fit::check_inputs(x, labels, n_classes)?;
    let present: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    for attempt in 0..SPLIT_RETRIES {
        let perm = seeded_permutation(labels.len(), derive_seed(seed, &format!("split-half/{attempt}")));
        let half = labels.len() / 2;
        let (a, b) = perm.split_at(half);
        let b = &b[..half];
        let ok = |idx: &[usize]| {
            present
                .iter()
                .all(|&c| idx.iter().filter(|&&i| labels[i] == c).count() >= 2)
        };
        if !ok(a) || !ok(b) {
            continue;
        }
        let take = |idx: &[usize]| {
            let m = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| x[(idx[r], c)]);
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            (m, l)
        };
        let (xa, la) = take(a);
        let (xb, lb) = take(b);
        let ua = fit_basis(&xa, &la, n_classes, spec)?;
        let ub = fit_basis(&xb, &lb, n_classes, spec)?;
        let angles = principal_angles(&ua, &ub)?;
        return Ok(*angles.last().expect("k >= 1"));
    }
    Err(Error::Config(format!(
        "split-half stability: some class has fewer than 2 examples per half after {SPLIT_RETRIES} attempts"
    )))
}

/// Pearson r between `‖Uᵀ(e − c)‖` and per-utterance WER.
pub fn wer_projection_correlation(subspace: &Subspace, x: &DMatrix<f64>, wers: &[f64]) -> Result<f64> {
    let norms = subspace.projection_norms(x)?;
    metrics::pearson_r(&norms, wers)
}

/// Pooled embeddings of every layer in `layers`, one `N × d` matrix per layer.
pub fn pooled_embeddings(
    model: &Model,
    utterances: &[&Utterance],
    layers: &[usize],
) -> Result<BTreeMap<usize, DMatrix<f64>>> {
    let n_layers = model.config().n_layers;
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
        return Err(Error::LayerOutOfRange { layer: bad, n_layers });
    }
    let pooled: Vec<Vec<DVector<f64>>> = utterances
        .par_iter()
        .map(|u| {
            let states = model.forward(&u.samples())?;
            layers
                .iter()
                .map(|&l| Ok(mean_pool(states.layer(l)?)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let d = model.config().hidden_dim;
    Ok(layers
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let m = DMatrix::from_fn(utterances.len(), d, |r, c| pooled[r][j][c]);
            (l, m)
        })
        .collect())
}

/// Accent label indices for utterances, in `accents` order.
pub fn label_indices(utterances: &[&Utterance], accents: &[String]) -> Result<Vec<usize>> {
    utterances
        .iter()
        .map(|u| {
            accents
                .iter()
                .position(|a| a == &u.accent)
                .ok_or_else(|| Error::UnknownAccent(u.accent.clone()))
        })
        .collect()
}

/// One cell of the layer × k × method sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub layer: usize,
    pub k: usize,
    pub method: Method,
    pub ridge_lambda: Option<f64>,
    pub probe_accuracy: f64,
    pub split_half_angle_deg: f64,
    pub wer_projection_r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub layer: usize,
    pub k: usize,
    pub method: Method,
    pub ridge_lambda: Option<f64>,
    /// False when no candidate met the stability threshold.
    pub within_threshold: bool,
}

/// Highest probe accuracy among stable candidates; ties go to smaller k, then
/// smaller layer. Falls back to all candidates with a warning.
pub fn select_layer_k(candidates: &[Candidate], stability_threshold_deg: f64) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Config("subspace sweep produced no candidates".into()));
    }
    let stable: Vec<&Candidate> = candidates
        .iter()
        .filter(|c| c.split_half_angle_deg <= stability_threshold_deg)
        .collect();
    let within_threshold = !stable.is_empty();
    let pool: Vec<&Candidate> = if within_threshold {
        stable
    } else {
        log::warn!("no subspace candidate within {stability_threshold_deg}°; selecting by accuracy alone");
        candidates.iter().collect()
    };
    let best = pool
        .into_iter()
        .min_by(|a, b| {
            b.probe_accuracy
                .total_cmp(&a.probe_accuracy)
                .then(a.k.cmp(&b.k))
                .then(a.layer.cmp(&b.layer))
                .then(a.method.cmp(&b.method))
        })
        .expect("non-empty pool");
    Ok(Selection {
        layer: best.layer,
        k: best.k,
        method: best.method,
        ridge_lambda: best.ridge_lambda,
        within_threshold,
    })
}

/// Sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubspaceConfig {
    pub methods: Vec<Method>,
    pub layers: Vec<usize>,
    pub ks: Vec<usize>,
    pub ridge_lambdas: Vec<f64>,
    pub stability_threshold_deg: f64,
    pub probe_steps: usize,
    pub probe_learning_rate: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Ridge, Method::Lda, Method::CentroidDiff, Method::LinearProbe],
            layers: vec![1, 2, 3, 4],
            ks: vec![4, 8, 16],
            ridge_lambdas: vec![1e-3, 1e-2, 1e-1],
            stability_threshold_deg: 60.0,
            probe_steps: 300,
            probe_learning_rate: 0.5,
            seed: 0,
        }
    }
}

impl SubspaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.layers.is_empty() || self.ks.is_empty() {
            return Err(Error::Config("subspace sweep needs methods, layers and k values".into()));
        }
        if let Some(m) = self
            .methods
            .iter()
            .find(|m| matches!(m, Method::Random | Method::Permuted))
        {
            return Err(Error::Config(format!("`{m}` is a control, not a sweep method")));
        }
        if self.methods.contains(&Method::Ridge) && self.ridge_lambdas.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config("ridge lambdas must be positive".into()));
        }
        Ok(())
    }

    pub fn spec(&self, method: Method, k: usize, ridge_lambda: Option<f64>) -> FitSpec {
        let mut spec = FitSpec::new(method, k);
        if let Some(l) = ridge_lambda {
            spec.ridge_lambda = l;
        }
        spec.probe = ProbeSettings {
            steps: self.probe_steps,
            learning_rate: self.probe_learning_rate,
            seed: derive_seed(self.seed, &format!("probe/{method}/{k}")),
        };
        spec
    }
}

/// Data for one sweep: fit embeddings and held-out embeddings per layer.
pub struct SweepData<'a> {
    pub fit: &'a BTreeMap<usize, DMatrix<f64>>,
    pub fit_labels: &'a [usize],
    pub held_out: &'a BTreeMap<usize, DMatrix<f64>>,
    pub held_out_labels: &'a [usize],
    /// Per-utterance clean WER of the held-out set.
    pub held_out_wers: &'a [f64],
    pub n_classes: usize,
}

/// A fitted candidate, or the reason the cell was skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub k: usize,
    pub method: Method,
    pub candidate: Option<Candidate>,
    pub skipped: Option<String>,
}

fn evaluate_cell(data: &SweepData<'_>, config: &SubspaceConfig, layer: usize, k: usize, method: Method) -> Result<SweepCell> {
    let x = data
        .fit
        .get(&layer)
        .ok_or(Error::LayerOutOfRange { layer, n_layers: 0 })?;
    let held = data
        .held_out
        .get(&layer)
        .ok_or(Error::LayerOutOfRange { layer, n_layers: 0 })?;
    let lambdas: Vec<Option<f64>> = if method == Method::Ridge {
        config.ridge_lambdas.iter().map(|&l| Some(l)).collect()
    } else {
        vec![None]
    };
    let mut best: Option<(f64, Option<f64>, Subspace, FitSpec)> = None;
    for lambda in lambdas {
        let spec = config.spec(method, k, lambda);
        let basis = match fit_basis(x, data.fit_labels, data.n_classes, &spec) {
            Ok(b) => b,
            Err(Error::RankDeficient { k, rank }) => {
                return Ok(SweepCell {
                    layer,
                    k,
                    method,
                    candidate: None,
                    skipped: Some(format!("k={k} exceeds attainable rank {rank}")),
                })
            }
            Err(e) => return Err(e),
        };
        let s = Subspace::from_fit(basis, layer, method, config.seed, x, data.fit_labels, data.n_classes)?;
        let acc = s.probe_accuracy(held, data.held_out_labels)?;
        if best.as_ref().map_or(true, |b| acc > b.0) {
            best = Some((acc, lambda, s, spec));
        }
    }
    let (acc, lambda, s, spec) = best.expect("at least one lambda");
    let angle = split_half_stability(
        x,
        data.fit_labels,
        data.n_classes,
        &spec,
        derive_seed(config.seed, &format!("stability/{layer}/{k}/{method}")),
    )?;
    let r = wer_projection_correlation(&s, held, data.held_out_wers).ok();
    Ok(SweepCell {
        layer,
        k,
        method,
        candidate: Some(Candidate {
            layer,
            k,
            method,
            ridge_lambda: lambda,
            probe_accuracy: acc,
            split_half_angle_deg: angle,
            wer_projection_r: r,
        }),
        skipped: None,
    })
}

/// Evaluate every layer × k × method cell. Cells run in parallel; the output
/// order is fixed.
pub fn sweep(data: &SweepData<'_>, config: &SubspaceConfig) -> Result<Vec<SweepCell>> {
    config.validate()?;
    let mut cells = Vec::new();
    for &layer in &config.layers {
        for &k in &config.ks {
            for &method in &config.methods {
                cells.push((layer, k, method));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(layer, k, method)| evaluate_cell(data, config, layer, k, method))
        .collect()
}

/// Fit the selected subspace on the fit data and attach its diagnostics.
pub fn fit_selected(data: &SweepData<'_>, config: &SubspaceConfig, selection: &Selection) -> Result<(Subspace, FitSpec)> {
    let x = &data.fit[&selection.layer];
    let held = &data.held_out[&selection.layer];
    let spec = config.spec(selection.method, selection.k, selection.ridge_lambda);
    let basis = fit_basis(x, data.fit_labels, data.n_classes, &spec)?;
    let mut s = Subspace::from_fit(
        basis,
        selection.layer,
        selection.method,
        config.seed,
        x,
        data.fit_labels,
        data.n_classes,
    )?;
    s.diagnostics = Diagnostics {
        probe_accuracy: Some(s.probe_accuracy(held, data.held_out_labels)?),
        split_half_angle_deg: Some(split_half_stability(
            x,
            data.fit_labels,
            data.n_classes,
            &spec,
            derive_seed(
                config.seed,
                &format!("stability/{}/{}/{}", selection.layer, selection.k, selection.method),
            ),
        )?),
        wer_projection_r: wer_projection_correlation(&s, held, data.held_out_wers).ok(),
    };
    Ok((s, spec))
}

#[derive(Serialize, Deserialize)]
struct SubspaceFile {
    format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    provenance: Option<Provenance>,
    d: usize,
    k: usize,
    layer: usize,
    method: Method,
    seed: u64,
    basis: Vec<f64>,
    center: Vec<f64>,
    n_classes: usize,
    centroids: Vec<f64>,
    diagnostics: Diagnostics,
}

const SUBSPACE_FORMAT: u32 = 1;

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Subspace {
    pub fn to_json(&self, provenance: Option<&Provenance>) -> Result<String> {
        let file = SubspaceFile {
            format_version: SUBSPACE_FORMAT,
            provenance: provenance.cloned(),
            d: self.d(),
            k: self.k(),
            layer: self.layer,
            method: self.method,
            seed: self.fit_seed,
            basis: row_major(&self.basis),
            center: self.center.as_slice().to_vec(),
            n_classes: self.centroids.nrows(),
            centroids: row_major(&self.centroids),
            diagnostics: self.diagnostics.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: SubspaceFile = serde_json::from_str(text)?;
        if f.format_version != SUBSPACE_FORMAT {
            return Err(Error::Config(format!(
                "unsupported subspace format version {}",
                f.format_version
            )));
        }
        if f.basis.len() != f.d * f.k || f.center.len() != f.d || f.centroids.len() != f.n_classes * f.k {
            return Err(Error::Dimension("subspace file arrays do not match d, k and class count".into()));
        }
        let basis = DMatrix::from_row_slice(f.d, f.k, &f.basis);
        check_orthonormal(&basis)?;
        Ok(Self {
            basis,
            layer: f.layer,
            method: f.method,
            fit_seed: f.seed,
            center: DVector::from_vec(f.center),
            centroids: DMatrix::from_row_slice(f.n_classes, f.k, &f.centroids),
            diagnostics: f.diagnostics,
        })
    }

    pub fn save(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        write_file(path, self.to_json(provenance)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_classes(n_per: usize, n_classes: usize, d: usize, sep: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = DMatrix::from_fn(n_classes, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sep * z
        });
        let n = n_per * n_classes;
        let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
        let x = DMatrix::from_fn(n, d, |r, c| {
            let z: f64 = StandardNormal.sample(&mut rng);
            centres[(labels[r], c)] + z
        });
        (x, labels)
    }

    #[test]
    fn projector_properties() {
        let u = fit::random_basis(12, 4, 1).unwrap();
        let p = Projector::new(&u);
        assert!(p.idempotency_error() < 1e-12);
        assert!((&p.p - p.p.transpose()).amax() < 1e-15);
        assert!((p.p.trace() - 4.0).abs() < 1e-10);
        assert!((&p.p * &u - &u).amax() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = DVector::from_fn(12, |_, _| StandardNormal.sample(&mut rng));
            assert!(p.apply(&x).norm() <= x.norm() + 1e-12);
        }
        let full = DMatrix::<f64>::identity(5, 5);
        assert!((Projector::new(&full).p - DMatrix::identity(5, 5)).amax() < 1e-15);
    }

    #[test]
    fn rotated_basis_gives_the_same_projector() {
        let u = fit::random_basis(10, 3, 3).unwrap();
        let r = fit::random_basis(3, 2, 4).unwrap();
        let r = {
            let mut full = DMatrix::zeros(3, 3);
            full.columns_mut(0, 2).copy_from(&r);
            let c = r.column(0).cross(&r.column(1));
            full.set_column(2, &c);
            full
        };
        let v = &u * r;
        assert!((Projector::new(&u).p - Projector::new(&v).p).amax() < 1e-8);
    }

    #[test]
    fn principal_angle_cases() {
        let u = fit::random_basis(64, 8, 5).unwrap();
        assert!(principal_angles(&u, &u).unwrap().iter().all(|a| a.abs() < 1e-6));
        let e1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let e2 = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!((principal_angles(&e1, &e2).unwrap()[0] - 90.0).abs() < 1e-6);
        let bad = DMatrix::from_column_slice(2, 1, &[2.0, 0.0]);
        assert!(matches!(principal_angles(&bad, &e1), Err(Error::NotOrthonormal(_))));
    }

    #[test]
    fn tiny_angles_keep_relative_precision() {
        let t: f64 = 1e-7;
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[t.cos(), t.sin(), 0.0]);
        let got = principal_angles(&a, &b).unwrap()[0].to_radians();
        assert!((got - t).abs() < 1e-15, "{got}");
        let b = DMatrix::from_column_slice(3, 1, &[1.0f64.cos(), 1.0f64.sin(), 0.0]);
        assert!((principal_angles(&a, &b).unwrap()[0] - 1.0f64.to_degrees()).abs() < 1e-9);
    }

    #[test]
    fn first_principal_angle_matches_search_oracle() {
        let a = fit::random_basis(64, 1, 6).unwrap();
        let b = fit::random_basis(64, 1, 7).unwrap();
        let angle = principal_angles(&a, &b).unwrap()[0];
        let oracle = a.column(0).dot(&b.column(0)).abs().acos().to_degrees();
        assert!((angle - oracle).abs() < 1e-9);

        let u1 = fit::random_basis(6, 2, 8).unwrap();
        let u2 = fit::random_basis(6, 2, 9).unwrap();
        let mut best = 0.0f64;
        let steps = 720;
        for i in 0..steps {
            let t = std::f64::consts::PI * i as f64 / steps as f64;
            let x = &u1 * DVector::from_column_slice(&[t.cos(), t.sin()]);
            let coords = u2.transpose() * &x;
            best = best.max(coords.norm());
        }
        let oracle = best.min(1.0).acos().to_degrees();
        let angle = principal_angles(&u1, &u2).unwrap()[0];
        assert!((angle - oracle).abs() < 0.1, "{angle} vs {oracle}");
    }

    #[test]
    fn probe_accuracy_and_permuted_control() {
        let (x, labels) = gaussian_classes(60, 7, 16, 3.0, 10);
        let (test, test_labels) = gaussian_classes(60, 7, 16, 3.0, 10);
        let spec = FitSpec::new(Method::Ridge, 4);
        let real = Subspace::from_fit(fit_basis(&x, &labels, 7, &spec).unwrap(), 1, Method::Ridge, 0, &x, &labels, 7)
            .unwrap();
        let acc = real.probe_accuracy(&test, &test_labels).unwrap();
        assert!(acc > 0.9, "{acc}");
        let perm = permuted_label_subspace(1, &x, &labels, 7, &spec, 11).unwrap();
        assert_eq!(perm.method, Method::Permuted);
        let chance = perm.probe_accuracy(&test, &test_labels).unwrap();
        assert!((chance - 1.0 / 7.0).abs() < 0.1, "{chance}");
        assert!(acc - chance > 0.3);
    }

    #[test]
    fn identity_permutation_reproduces_the_real_fit() {
        let (x, labels) = gaussian_classes(20, 3, 6, 2.0, 12);
        let spec = FitSpec::new(Method::CentroidDiff, 2);
        let identity: Vec<usize> = (0..labels.len()).collect();
        let p = permuted_label_subspace_with(2, &x, &labels, 3, &spec, 0, &identity).unwrap();
        let real = fit_basis(&x, &labels, 3, &spec).unwrap();
        assert_eq!(p.basis, real);
    }

    #[test]
    fn single_class_nearest_centroid_is_perfect() {
        let x = DMatrix::from_fn(5, 3, |r, c| (r * 3 + c) as f64);
        assert_eq!(nearest_centroid_accuracy(&x, &[0; 5], &x, &[0; 5]).unwrap(), 1.0);
    }

    #[test]
    fn split_half_of_duplicated_data_is_stable_and_real_beats_permuted() {
        let (x, labels) = gaussian_classes(40, 4, 10, 2.5, 13);
        let spec = FitSpec::new(Method::CentroidDiff, 2);
        let mut real_total = 0.0;
        let mut perm_total = 0.0;
        for seed in 0..5 {
            real_total += split_half_stability(&x, &labels, 4, &spec, seed).unwrap();
            let shuffled = permute_labels(&labels, &seeded_permutation(labels.len(), 100 + seed)).unwrap();
            perm_total += split_half_stability(&x, &shuffled, 4, &spec, seed).unwrap();
        }
        assert!(real_total < perm_total);

        let small = DMatrix::from_fn(8, 3, |r, c| ((r % 4) * 3 + c) as f64 + if c == r % 3 { 2.0 } else { 0.0 });
        let lab = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let mut doubled = DMatrix::zeros(16, 3);
        doubled.rows_mut(0, 8).copy_from(&small);
        doubled.rows_mut(8, 8).copy_from(&small);
        let dl: Vec<usize> = lab.iter().chain(&lab).copied().collect();
        let spec1 = FitSpec::new(Method::CentroidDiff, 1);
        let u = fit_basis(&small, &lab, 2, &spec1).unwrap();
        let v = fit_basis(&doubled, &dl, 2, &spec1).unwrap();
        assert!(principal_angles(&u, &v).unwrap()[0] < 1e-6);
    }

    #[test]
    fn wer_projection_correlation_cases() {
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let x = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let mut s = Subspace::from_fit(u, 1, Method::Random, 0, &x, &[0, 0, 1, 1], 2).unwrap();
        s.center = DVector::zeros(2);
        let norms = s.projection_norms(&x).unwrap();
        assert!((wer_projection_correlation(&s, &x, &norms).unwrap() - 1.0).abs() < 1e-12);
        let flat = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0]);
        assert!(wer_projection_correlation(&s, &flat, &[0.1, 0.2, 0.3]).is_err());
    }

    fn candidate(layer: usize, k: usize, acc: f64, angle: f64) -> Candidate {
        Candidate {
            layer,
            k,
            method: Method::Ridge,
            ridge_lambda: Some(1e-2),
            probe_accuracy: acc,
            split_half_angle_deg: angle,
            wer_projection_r: None,
        }
    }

    #[test]
    fn selection_rules() {
        let one = [candidate(3, 8, 0.5, 10.0)];
        let s = select_layer_k(&one, 60.0).unwrap();
        assert_eq!((s.layer, s.k), (3, 8));
        let tie = [candidate(2, 8, 0.9, 10.0), candidate(2, 4, 0.9, 10.0), candidate(1, 4, 0.9, 10.0)];
        let s = select_layer_k(&tie, 60.0).unwrap();
        assert_eq!((s.layer, s.k), (1, 4));
        let unstable = [candidate(1, 4, 0.99, 80.0), candidate(2, 4, 0.8, 30.0)];
        assert_eq!(select_layer_k(&unstable, 60.0).unwrap().layer, 2);
        let none = [candidate(1, 4, 0.99, 80.0), candidate(2, 4, 0.8, 70.0)];
        let s = select_layer_k(&none, 60.0).unwrap();
        assert!(!s.within_threshold);
        assert_eq!(s.layer, 1);
        assert!(select_layer_k(&[], 60.0).is_err());
    }

    #[test]
    fn subspace_json_round_trip() {
        let (x, labels) = gaussian_classes(10, 3, 6, 2.0, 14);
        let mut s = Subspace::from_fit(
            fit_basis(&x, &labels, 3, &FitSpec::new(Method::Lda, 2)).unwrap(),
            2,
            Method::Lda,
            9,
            &x,
            &labels,
            3,
        )
        .unwrap();
        s.diagnostics.probe_accuracy = Some(0.75);
        let back = Subspace::from_json(&s.to_json(None).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn method_names_round_trip() {
        for m in [
            Method::Ridge,
            Method::Lda,
            Method::CentroidDiff,
            Method::LinearProbe,
            Method::Random,
            Method::Permuted,
        ] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
    }
}
