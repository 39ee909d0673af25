//! Scalar vocabulary of the audit: token error rate, per-accent aggregation,
//! max-min disparity, Pearson correlation and SNR.
//!
//! The corpus is built from word tokens, so "WER" here is a token error rate.
//! Per-accent means are always macro averages and WER is never clipped at 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance between two token sequences with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word (token) error rate of `hypothesis` against `reference`.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Config("WER reference is empty".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// Arithmetic mean WER per accent.
///
/// Accents listed in `accents` that have no scored item are dropped with a
/// warning; items whose accent is not listed are an error.
pub fn per_accent_mean<'a, I>(items: I, accents: &[String]) -> Result<BTreeMap<String, f64>>
where
    I: IntoIterator<Item = (&'a str, f64)>,
{
    let mut sums: BTreeMap<&str, (f64, usize)> =
        accents.iter().map(|a| (a.as_str(), (0.0, 0))).collect();
    for (accent, value) in items {
        let slot = sums
            .get_mut(accent)
            .ok_or_else(|| Error::UnknownAccent(accent.to_string()))?;
        slot.0 += value;
        slot.1 += 1;
    }
    let mut out = BTreeMap::new();
    for (accent, (sum, n)) in sums {
        if n == 0 {
            log::warn!("accent `{accent}` has no utterances; excluded from aggregation");
            continue;
        }
        out.insert(accent.to_string(), sum / n as f64);
    }
    Ok(out)
}

/// Macro average over accents.
pub fn macro_mean(per_accent: &BTreeMap<String, f64>) -> f64 {
    if per_accent.is_empty() {
        return 0.0;
    }
    per_accent.values().sum::<f64>() / per_accent.len() as f64
}

/// Max minus min of per-accent means, in percentage points (inputs are fractions).
pub fn disparity(per_accent: &BTreeMap<String, f64>) -> Result<f64> {
    if per_accent.len() < 2 {
        return Err(Error::Config(format!(
            "disparity needs at least 2 accents, got {}",
            per_accent.len()
        )));
    }
    let max = per_accent.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = per_accent.values().cloned().fold(f64::INFINITY, f64::min);
    Ok((max - min) * 100.0)
}

/// One row of a disparity table: per-accent means, their macro mean and the range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityRow {
    pub per_accent_mean_wer: BTreeMap<String, f64>,
    pub mean_wer: f64,
    pub disparity_pp: f64,
}

impl DisparityRow {
    pub fn from_means(per_accent_mean_wer: BTreeMap<String, f64>) -> Result<Self> {
        let disparity_pp = disparity(&per_accent_mean_wer)?;
        let mean_wer = macro_mean(&per_accent_mean_wer);
        Ok(Self {
            per_accent_mean_wer,
            mean_wer,
            disparity_pp,
        })
    }

    /// Accent with the strictly lowest mean WER, if there is a unique one.
    pub fn strict_minimum(&self) -> Option<&str> {
        let mut iter = self.per_accent_mean_wer.iter();
        let (mut best, mut best_v) = iter.next()?;
        let mut tied = false;
        for (a, v) in iter {
            if v < best_v {
                best = a;
                best_v = v;
                tied = false;
            } else if v == best_v {
                tied = true;
            }
        }
        (!tied).then_some(best.as_str())
    }
}

/// Pearson correlation coefficient.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "pearson_r inputs have lengths {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::Config("pearson_r needs at least 3 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::ZeroVariance("first pearson_r input"));
    }
    if syy <= 0.0 {
        return Err(Error::ZeroVariance("second pearson_r input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Signal-to-perturbation ratio in dB; `+inf` when the perturbation is zero.
pub fn snr_db(signal: &[f64], perturbation: &[f64]) -> f64 {
    let ps: f64 = signal.iter().map(|v| v * v).sum();
    let pd: f64 = perturbation.iter().map(|v| v * v).sum();
    if pd == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (ps / pd).log10()
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum edit-script cost by exhaustive search over scripts: every step
    /// either matches/substitutes, deletes, or inserts, tried in every order.
    fn brute_force_edits(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_force_edits(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_force_edits(&a[1..], b) + 1;
        let ins = brute_force_edits(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identical_sequences_have_zero_wer() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        assert_eq!(wer::<u32>(&[], &[4, 5, 6, 7]).unwrap(), 1.0);
    }

    #[test]
    fn empty_reference_is_rejected() {
        assert!(wer::<u32>(&[1], &[]).is_err());
    }

    #[test]
    fn wer_can_exceed_one() {
        assert_eq!(wer(&[1, 2, 3, 4], &[9]).unwrap(), 4.0);
    }

    #[test]
    fn wer_matches_exhaustive_edit_scripts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let la = rng.gen_range(0..=6);
            let lb = rng.gen_range(1..=6);
            let a: Vec<u8> = (0..la).map(|_| rng.gen_range(0..4)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.gen_range(0..4)).collect();
            let expected = brute_force_edits(&a, &b) as f64 / b.len() as f64;
            assert_eq!(wer(&a, &b).unwrap(), expected, "{a:?} vs {b:?}");
        }
    }

    fn published_clean_column() -> BTreeMap<String, f64> {
        [
            ("African", 27.1),
            ("Bermuda", 30.9),
            ("Indian", 40.7),
            ("Malaysia", 39.8),
            ("Singapore", 31.9),
            ("US", 19.4),
            ("Wales", 39.4),
        ]
        .into_iter()
        .map(|(a, v)| (a.to_string(), v / 100.0))
        .collect()
    }

    #[test]
    fn fixture_clean_column_mean_and_disparity() {
        let row = DisparityRow::from_means(published_clean_column()).unwrap();
        assert!((row.mean_wer * 100.0 - 32.7).abs() < 0.05);
        assert!((row.disparity_pp - 21.3).abs() < 0.05);
        assert_eq!(row.strict_minimum(), Some("US"));
    }

    #[test]
    fn per_accent_mean_echoes_single_items() {
        let col = published_clean_column();
        let accents: Vec<String> = col.keys().cloned().collect();
        let means = per_accent_mean(col.iter().map(|(a, v)| (a.as_str(), *v)), &accents).unwrap();
        assert_eq!(means, col);
    }

    #[test]
    fn per_accent_mean_drops_empty_accents() {
        let accents = vec!["a".to_string(), "b".to_string()];
        let means = per_accent_mean([("a", 0.5), ("a", 0.25)], &accents).unwrap();
        assert_eq!(means.len(), 1);
        assert_eq!(means["a"], 0.375);
    }

    #[test]
    fn disparity_needs_two_accents() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), 0.3);
        assert!(disparity(&m).is_err());
        m.insert("y".to_string(), 0.3);
        assert_eq!(disparity(&m).unwrap(), 0.0);
    }

    #[test]
    fn pearson_extremes() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((pearson_r(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson_r(&xs, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson_r(&xs, &[1.0; 10]).is_err());
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x + rng.gen::<f64>()).collect();
        // Raw-moment form: (nΣxy − ΣxΣy) / sqrt((nΣx² − (Σx)²)(nΣy² − (Σy)²)).
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let syy: f64 = ys.iter().map(|y| y * y).sum();
        let expected = (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt();
        assert!((pearson_r(&xs, &ys).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn snr_reference_points() {
        let x = vec![0.5, -0.25, 0.1];
        assert!(snr_db(&x, &x).abs() < 1e-12);
        let scaled: Vec<f64> = x.iter().map(|v| v * 1e-3).collect();
        assert!((snr_db(&x, &scaled) - 60.0).abs() < 1e-9);
        assert_eq!(snr_db(&x, &[0.0; 3]), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn wer_triangle_bound(
            a in proptest::collection::vec(0u8..4, 0..6),
            b in proptest::collection::vec(0u8..4, 0..6),
            c in proptest::collection::vec(0u8..4, 1..6),
        ) {
            let lhs = wer(&a, &c).unwrap();
            let rhs = (edit_distance(&a, &b) + edit_distance(&b, &c)) as f64 / c.len() as f64;
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn disparity_scales_and_ignores_order(
            vals in proptest::collection::vec(0.0f64..2.0, 2..9),
            s in 0.01f64..10.0,
        ) {
            let named: BTreeMap<String, f64> =
                vals.iter().enumerate().map(|(i, v)| (format!("a{i}"), *v)).collect();
            let scaled: BTreeMap<String, f64> =
                named.iter().map(|(k, v)| (k.clone(), v * s)).collect();
            let reversed: BTreeMap<String, f64> = vals
                .iter()
                .rev()
                .enumerate()
                .map(|(i, v)| (format!("a{i}"), *v))
                .collect();
            let d = disparity(&named).unwrap();
            prop_assert!((disparity(&scaled).unwrap() - s * d).abs() < 1e-9 * (1.0 + s * d));
            prop_assert!((disparity(&reversed).unwrap() - d).abs() < 1e-12);
            prop_assert!(d >= 0.0);
        }
    }
}
