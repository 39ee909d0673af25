//! Connectionist temporal classification in log space.
//!
//! Class 0 is the blank. Targets are class indices in `1..V`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const BLANK: usize = 0;

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Fewest frames that can emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

struct Lattice {
    log_probs: DMatrix<f64>,
    ext: Vec<usize>,
    alpha: DMatrix<f64>,
    log_likelihood: f64,
}

fn forward_lattice(logits: &DMatrix<f64>, target: &[usize]) -> Result<Lattice> {
    let (t_len, v) = logits.shape();
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= v) {
        return Err(Error::Config(format!(
            "CTC target class {bad} is blank or outside 1..{v}"
        )));
    }
    let required = min_frames(target);
    if t_len == 0 || required > t_len {
        return Err(Error::InfeasibleTarget {
            required,
            frames: t_len,
        });
    }
    let log_probs = log_softmax_rows(logits);
    let ext = extended(target);
    let s_len = ext.len();
    let mut alpha = DMatrix::from_element(t_len, s_len, f64::NEG_INFINITY);
    alpha[(0, 0)] = log_probs[(0, ext[0])];
    if s_len > 1 {
        alpha[(0, 1)] = log_probs[(0, ext[1])];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = [f64::NEG_INFINITY; 3];
            terms[0] = alpha[(t - 1, s)];
            if s >= 1 {
                terms[1] = alpha[(t - 1, s - 1)];
            }
            if can_skip(&ext, s) {
                terms[2] = alpha[(t - 1, s - 2)];
            }
            alpha[(t, s)] = log_probs[(t, ext[s])] + log_sum_exp(&terms);
        }
    }
    let last = t_len - 1;
    let log_likelihood = if s_len > 1 {
        log_sum_exp(&[alpha[(last, s_len - 1)], alpha[(last, s_len - 2)]])
    } else {
        alpha[(last, 0)]
    };
    if !log_likelihood.is_finite() {
        return Err(Error::Numerical("CTC likelihood is not finite".into()));
    }
    Ok(Lattice {
        log_probs,
        ext,
        alpha,
        log_likelihood,
    })
}

/// Negative log-likelihood of `target` under the frame posteriors `softmax(logits)`.
pub fn ctc_loss(logits: &DMatrix<f64>, target: &[usize]) -> Result<f64> {
    Ok(-forward_lattice(logits, target)?.log_likelihood)
}

/// Loss together with its gradient with respect to the logits.
pub fn ctc_loss_and_grad(logits: &DMatrix<f64>, target: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let Lattice {
        log_probs,
        ext,
        alpha,
        log_likelihood,
    } = forward_lattice(logits, target)?;
    let (t_len, v) = logits.shape();
    let s_len = ext.len();

    // beta(t, s): log-probability of emitting the rest after frame t, given state s at t.
    let mut beta = DMatrix::from_element(t_len, s_len, f64::NEG_INFINITY);
    beta[(t_len - 1, s_len - 1)] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1, s_len - 2)] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut terms = [f64::NEG_INFINITY; 3];
            terms[0] = log_probs[(t + 1, ext[s])] + beta[(t + 1, s)];
            if s + 1 < s_len {
                terms[1] = log_probs[(t + 1, ext[s + 1])] + beta[(t + 1, s + 1)];
            }
            if s + 2 < s_len && can_skip(&ext, s + 2) {
                terms[2] = log_probs[(t + 1, ext[s + 2])] + beta[(t + 1, s + 2)];
            }
            beta[(t, s)] = log_sum_exp(&terms);
        }
    }

    let mut grad = log_probs.map(f64::exp);
    for t in 0..t_len {
        let mut occupancy = vec![f64::NEG_INFINITY; v];
        for s in 0..s_len {
            let g = alpha[(t, s)] + beta[(t, s)] - log_likelihood;
            let slot = &mut occupancy[ext[s]];
            *slot = log_sum_exp(&[*slot, g]);
        }
        for (k, occ) in occupancy.into_iter().enumerate() {
            if occ > f64::NEG_INFINITY {
                grad[(t, k)] -= occ.exp();
            }
        }
    }
    Ok((-log_likelihood, grad))
}

/// Per-frame argmax, merge repeats, drop blanks.
pub fn greedy_decode(logits: &DMatrix<f64>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.row_iter() {
        let mut best = 0;
        for k in 1..row.len() {
            if row[k] > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}
