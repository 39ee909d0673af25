//! Subspace fitting methods on pooled embeddings.
//!
//! Inputs are `N × d` embedding matrices (one row per utterance) and class
//! indices in `0..n_classes`. Every method centres the embeddings with the
//! fit-set mean and returns an orthonormal `d × k` basis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Relative singular-value cutoff for numerical rank.
const RANK_TOL: f64 = 1e-9;

pub(crate) fn check_inputs(x: &DMatrix<f64>, labels: &[usize], n_classes: usize) -> Result<()> {
    if x.nrows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings but {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::Config("subspace fitting needs at least two classes".into()));
    }
    if x.nrows() < n_classes {
        return Err(Error::Config(format!(
            "{} embeddings for {n_classes} classes",
            x.nrows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Config(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(())
}

fn check_k(k: usize, d: usize) -> Result<()> {
    if k == 0 || k >= d {
        return Err(Error::Config(format!("need 1 <= k < d, got k={k}, d={d}")));
    }
    Ok(())
}

pub fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    x.row_mean().transpose()
}

pub fn center_rows(x: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        row -= center.transpose();
    }
    out
}

/// Class means (`A × d`) and counts. Absent classes get a zero row.
pub fn class_means(x: &DMatrix<f64>, labels: &[usize], n_classes: usize) -> (DMatrix<f64>, Vec<usize>) {
    let d = x.ncols();
    let mut sums = DMatrix::zeros(n_classes, d);
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in x.row_iter().zip(labels) {
        let mut target = sums.row_mut(l);
        target += row;
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            let mut r = sums.row_mut(c);
            r /= n as f64;
        }
    }
    (sums, counts)
}

/// Left singular vectors sorted by descending singular value, with the sign of
/// each vector fixed so its largest-magnitude entry is positive.
pub fn left_singular(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(m.nrows(), order.len());
    let mut values = Vec::with_capacity(order.len());
    for (j, &i) in order.iter().enumerate() {
        let mut col = u.column(i).into_owned();
        fix_sign(&mut col);
        out.set_column(j, &col);
        values.push(svd.singular_values[i]);
    }
    (out, values)
}

fn fix_sign(col: &mut DVector<f64>) {
    let pivot = col
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
        .map(|(_, v)| v)
        .unwrap_or(0.0);
    if pivot < 0.0 {
        col.neg_mut();
    }
}

/// Orthonormal basis for the column span of `m` (`d × k`, full column rank).
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = m.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax().max(f64::MIN_POSITIVE);
    if r.diagonal().iter().any(|v| v.abs() <= RANK_TOL * scale) {
        return Err(Error::RankDeficient {
            k: m.ncols(),
            rank: r.diagonal().iter().filter(|v| v.abs() > RANK_TOL * scale).count(),
        });
    }
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            let mut c = q.column_mut(j);
            c.neg_mut();
        }
    }
    Ok(q)
}

fn numerical_rank(values: &[f64]) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    values.iter().filter(|&&v| v > RANK_TOL * top.max(f64::MIN_POSITIVE) && v > 0.0).count()
}

/// Top-`k` directions of `w`; if `w` has rank `r < k`, the remaining `k − r`
/// columns are the leading principal directions of the centred data with the
/// first `r` directions projected out.
fn top_k_with_completion(w: &DMatrix<f64>, xc: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
    let (u, values) = left_singular(w);
    let rank = numerical_rank(&values).min(k);
    if rank == 0 {
        return Err(Error::RankDeficient { k, rank: 0 });
    }
    let head = u.columns(0, rank).into_owned();
    if rank == k {
        return Ok(head);
    }
    let residual = xc - (xc * &head) * head.transpose();
    let (pcs, pc_values) = left_singular(&residual.transpose());
    let extra = k - rank;
    if numerical_rank(&pc_values) < extra {
        return Err(Error::RankDeficient {
            k,
            rank: rank + numerical_rank(&pc_values),
        });
    }
    let mut out = DMatrix::zeros(w.nrows(), k);
    out.columns_mut(0, rank).copy_from(&head);
    out.columns_mut(rank, extra).copy_from(&pcs.columns(0, extra));
    orthonormalize(&out)
}

/// Span of class-centroid deviations from the global centroid.
pub fn fit_centroid_diff(x: &DMatrix<f64>, labels: &[usize], n_classes: usize, k: usize) -> Result<DMatrix<f64>> {
    check_inputs(x, labels, n_classes)?;
    check_k(k, x.ncols())?;
    let max_rank = (n_classes - 1).min(x.ncols());
    if k > max_rank {
        return Err(Error::RankDeficient { k, rank: max_rank });
    }
    let center = column_mean(x);
    let (means, counts) = class_means(x, labels, n_classes);
    let present: Vec<usize> = (0..n_classes).filter(|&c| counts[c] > 0).collect();
    let mut dev = DMatrix::zeros(x.ncols(), present.len());
    for (j, &c) in present.iter().enumerate() {
        dev.set_column(j, &(means.row(c).transpose() - &center));
    }
    let (u, values) = left_singular(&dev);
    let rank = numerical_rank(&values);
    if rank < k {
        return Err(Error::RankDeficient { k, rank });
    }
    Ok(u.columns(0, k).into_owned())
}

/// Ridge weights `W = (XᵀX + λI)⁻¹ XᵀY` on centred `X` and centred one-hot `Y`.
pub fn ridge_weights(xc: &DMatrix<f64>, labels: &[usize], n_classes: usize, lambda: f64) -> Result<DMatrix<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("ridge lambda must be positive, got {lambda}")));
    }
    let n = xc.nrows();
    let mut y = DMatrix::zeros(n, n_classes);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    let y_mean = y.row_mean();
    for mut row in y.row_iter_mut() {
        row -= &y_mean;
    }
    let d = xc.ncols();
    let gram = xc.transpose() * xc + DMatrix::identity(d, d) * lambda;
    let rhs = xc.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numerical("ridge normal equations are not positive definite".into()))?;
    Ok(chol.solve(&rhs))
}

pub fn fit_ridge(x: &DMatrix<f64>, labels: &[usize], n_classes: usize, k: usize, lambda: f64) -> Result<DMatrix<f64>> {
    check_inputs(x, labels, n_classes)?;
    check_k(k, x.ncols())?;
    let xc = center_rows(x, &column_mean(x));
    let w = ridge_weights(&xc, labels, n_classes, lambda)?;
    top_k_with_completion(&w, &xc, k)
}

/// Within- and between-class scatter of centred data.
pub fn scatter_matrices(x: &DMatrix<f64>, labels: &[usize], n_classes: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = x.ncols();
    let center = column_mean(x);
    let (means, counts) = class_means(x, labels, n_classes);
    let mut sw = DMatrix::zeros(d, d);
    for (row, &l) in x.row_iter().zip(labels) {
        let diff = row.transpose() - means.row(l).transpose();
        sw += &diff * diff.transpose();
    }
    let mut sb = DMatrix::zeros(d, d);
    for c in 0..n_classes {
        if counts[c] == 0 {
            continue;
        }
        let diff = means.row(c).transpose() - &center;
        sb += (&diff * diff.transpose()) * counts[c] as f64;
    }
    (sw, sb)
}

/// Default LDA shrinkage: `1e-3 · trace(S_w) / d`.
pub fn default_shrinkage(sw: &DMatrix<f64>) -> f64 {
    1e-3 * sw.trace() / sw.nrows() as f64
}

/// Leading eigenvectors of `(S_w + γI)⁻¹ S_b`, orthonormalized.
pub fn fit_lda(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    k: usize,
    shrinkage: Option<f64>,
) -> Result<DMatrix<f64>> {
    check_inputs(x, labels, n_classes)?;
    check_k(k, x.ncols())?;
    if k > n_classes - 1 {
        return Err(Error::RankDeficient { k, rank: n_classes - 1 });
    }
    let d = x.ncols();
    let (sw, sb) = scatter_matrices(x, labels, n_classes);
    let gamma = shrinkage.unwrap_or_else(|| default_shrinkage(&sw));
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("LDA shrinkage must be non-negative, got {gamma}")));
    }
    let reg = sw + DMatrix::identity(d, d) * gamma;
    let chol = reg
        .cholesky()
        .ok_or_else(|| Error::Numerical("shrunk within-class scatter is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let m = &l_inv * sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(f64::MIN_POSITIVE);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > RANK_TOL * top).count();
    if rank < k {
        return Err(Error::RankDeficient { k, rank });
    }
    let mut dirs = DMatrix::zeros(d, k);
    for (j, &i) in order.iter().take(k).enumerate() {
        let w = l_inv.transpose() * eig.eigenvectors.column(i);
        dirs.set_column(j, &w);
    }
    let q = orthonormalize(&dirs)?;
    Ok(canonical_signs(q))
}

fn canonical_signs(mut q: DMatrix<f64>) -> DMatrix<f64> {
    for j in 0..q.ncols() {
        let mut col = q.column(j).into_owned();
        fix_sign(&mut col);
        q.set_column(j, &col);
    }
    q
}

/// Settings for the multinomial logistic-regression probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

const PROBE_EVAL_EVERY: usize = 10;
const PROBE_PATIENCE: usize = 10;

fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = logits.nrows();
    let mut grad = DMatrix::zeros(n, logits.ncols());
    let mut loss = 0.0;
    for (i, row) in logits.row_iter().enumerate() {
        let max = row.max();
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for c in 0..row.len() {
            grad[(i, c)] = (row[c] - max).exp() / z;
        }
        loss -= row[labels[i]] - max - z.ln();
        grad[(i, labels[i])] -= 1.0;
    }
    (loss / n as f64, grad / n as f64)
}

/// Weights (`d × A`) and bias of a multinomial logistic regression fitted by
/// full-batch gradient descent on centred data.
pub fn probe_weights(
    xc: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    settings: &ProbeSettings,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let d = xc.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let init_scale = 0.01;
    let mut w = DMatrix::from_fn(d, n_classes, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        init_scale * z
    });
    let mut b = DVector::zeros(n_classes);
    let mut best = f64::INFINITY;
    let mut worse = 0usize;
    for step in 0..settings.steps {
        let mut logits = xc * &w;
        for mut row in logits.row_iter_mut() {
            row += b.transpose();
        }
        let (loss, g) = softmax_cross_entropy(&logits, labels);
        if !loss.is_finite() {
            return Err(Error::NonConvergence(format!("linear probe loss became {loss} at step {step}")));
        }
        if step % PROBE_EVAL_EVERY == 0 {
            if loss > best * (1.0 + 1e-9) {
                worse += 1;
                if worse >= PROBE_PATIENCE {
                    return Err(Error::NonConvergence(format!(
                        "linear probe loss stayed above its best ({best:.4}) for {PROBE_PATIENCE} checks, now {loss:.4}"
                    )));
                }
            } else {
                worse = 0;
                best = loss;
            }
        }
        w -= (xc.transpose() * &g) * settings.learning_rate;
        b -= g.row_sum().transpose() * settings.learning_rate;
    }
    Ok((w, b))
}

pub fn fit_linear_probe(
    x: &DMatrix<f64>,
    labels: &[usize],
    n_classes: usize,
    k: usize,
    settings: &ProbeSettings,
) -> Result<DMatrix<f64>> {
    check_inputs(x, labels, n_classes)?;
    check_k(k, x.ncols())?;
    let xc = center_rows(x, &column_mean(x));
    let (mut w, _) = probe_weights(&xc, labels, n_classes, settings)?;
    let w_mean = w.column_mean();
    for mut col in w.column_iter_mut() {
        col -= &w_mean;
    }
    top_k_with_completion(&w, &xc, k)
}

/// Orthonormalized Gaussian `d × k` matrix.
pub fn random_basis(d: usize, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_k(k, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    orthonormalize(&g)
}
