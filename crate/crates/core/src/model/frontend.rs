//! Framed power filterbank with smooth log compression.
//!
//! Each frame is Hann-windowed, projected onto a real DFT basis, squared into
//! a power spectrum, pooled by triangular mel filters and compressed with
//! `ln(p + eps)`. Every step is differentiable, so the frontend has an exact
//! vector-Jacobian product back to the waveform.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Frontend {
    frame_size: usize,
    hop: usize,
    eps_log: f64,
    window: Vec<f64>,
    /// frame_size × bins
    cos: DMatrix<f64>,
    /// frame_size × bins
    sin: DMatrix<f64>,
    /// bins × filters (transposed filterbank)
    mel_t: DMatrix<f64>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FrontendCache {
    len: usize,
    re: DMatrix<f64>,
    im: DMatrix<f64>,
    filtered: DMatrix<f64>,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl Frontend {
    pub fn new(
        sample_rate: u32,
        frame_size: usize,
        hop: usize,
        n_filters: usize,
        eps_log: f64,
    ) -> Result<Self> {
        if hop == 0 || frame_size < hop {
            return Err(Error::Config(format!(
                "need frame_size >= hop > 0, got {frame_size} and {hop}"
            )));
        }
        if n_filters == 0 || !(eps_log > 0.0) {
            return Err(Error::Config("need n_filters > 0 and eps_log > 0".into()));
        }
        let n = frame_size;
        let bins = n / 2 + 1;
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect();
        let cos = DMatrix::from_fn(n, bins, |i, b| (2.0 * PI * ((i * b) % n) as f64 / n as f64).cos());
        let sin = DMatrix::from_fn(n, bins, |i, b| -(2.0 * PI * ((i * b) % n) as f64 / n as f64).sin());

        let sr = sample_rate as f64;
        let (lo, hi) = (hz_to_mel(100.0), hz_to_mel(0.475 * sr));
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_filters + 1) as f64))
            .collect();
        let bin_hz = |b: usize| b as f64 * sr / n as f64;
        let mut mel_t = DMatrix::zeros(bins, n_filters);
        for j in 0..n_filters {
            let (l, c, r) = (edges[j], edges[j + 1], edges[j + 2]);
            for b in 0..bins {
                let f = bin_hz(b);
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                mel_t[(b, j)] = w;
            }
            if mel_t.column(j).iter().all(|&w| w == 0.0) {
                // Narrow low-frequency filter between two bins: use the nearest bin.
                let nearest = ((c * n as f64 / sr).round() as usize).min(bins - 1);
                mel_t[(nearest, j)] = 1.0;
            }
        }
        Ok(Self {
            frame_size,
            hop,
            eps_log,
            window,
            cos,
            sin,
            mel_t,
        })
    }

    pub fn n_filters(&self) -> usize {
        self.mel_t.ncols()
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    /// Number of frames for a waveform of `len` samples.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame_size {
            return Err(Error::WaveformTooShort {
                len,
                frame_size: self.frame_size,
            });
        }
        Ok(1 + (len - self.frame_size) / self.hop)
    }

    /// Log filterbank energies, frames × filters.
    pub fn forward(&self, wave: &[f64]) -> Result<(DMatrix<f64>, FrontendCache)> {
        let t = self.n_frames(wave.len())?;
        let n = self.frame_size;
        let frames = DMatrix::from_fn(t, n, |r, i| wave[r * self.hop + i] * self.window[i]);
        let re = &frames * &self.cos;
        let im = &frames * &self.sin;
        let power = re.component_mul(&re) + im.component_mul(&im);
        let filtered = power * &self.mel_t;
        let features = filtered.map(|p| (p + self.eps_log).ln());
        Ok((
            features,
            FrontendCache {
                len: wave.len(),
                re,
                im,
                filtered,
            },
        ))
    }

    /// Pull a gradient on the log energies back to the waveform.
    pub fn backward(&self, cache: &FrontendCache, d_features: &DMatrix<f64>) -> Vec<f64> {
        let eps = self.eps_log;
        let d_filtered = d_features.zip_map(&cache.filtered, |g, p| g / (p + eps));
        let d_power = d_filtered * self.mel_t.transpose();
        let d_re = d_power.zip_map(&cache.re, |g, r| 2.0 * g * r);
        let d_im = d_power.zip_map(&cache.im, |g, i| 2.0 * g * i);
        let d_frames = d_re * self.cos.transpose() + d_im * self.sin.transpose();
        let mut grad = vec![0.0; cache.len];
        for r in 0..d_frames.nrows() {
            let start = r * self.hop;
            for i in 0..self.frame_size {
                grad[start + i] += d_frames[(r, i)] * self.window[i];
            }
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frontend() -> Frontend {
        Frontend::new(8000, 160, 80, 20, 1e-5).unwrap()
    }

    #[test]
    fn every_filter_sees_some_bin() {
        let f = frontend();
        for j in 0..f.n_filters() {
            assert!(f.mel_t.column(j).iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn frame_count_arithmetic() {
        let f = frontend();
        assert_eq!(f.n_frames(160).unwrap(), 1);
        assert_eq!(f.n_frames(239).unwrap(), 1);
        assert_eq!(f.n_frames(240).unwrap(), 2);
        assert!(f.n_frames(159).is_err());
    }

    #[test]
    fn silence_is_finite() {
        let (feat, _) = frontend().forward(&[0.0; 800]).unwrap();
        assert!(feat.iter().all(|v| v.is_finite()));
        assert!((feat[(0, 0)] - 1e-5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pure_tone_peaks_in_matching_filter() {
        let f = frontend();
        let wave: Vec<f64> = (0..800)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 8000.0).sin() * 0.5)
            .collect();
        let (feat, _) = f.forward(&wave).unwrap();
        let row = feat.row(2);
        let (best, _) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let centre = |j: usize| {
            let col = f.mel_t.column(j);
            let total: f64 = col.iter().sum();
            col.iter().enumerate().map(|(b, w)| b as f64 * 50.0 * w).sum::<f64>() / total
        };
        assert!((centre(best) - 1000.0).abs() < 150.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let f = frontend();
        let wave: Vec<f64> = (0..400)
            .map(|i| 0.3 * (i as f64 * 0.37).sin() + 0.1 * (i as f64 * 1.3).cos())
            .collect();
        let weights = DMatrix::from_fn(4, 20, |r, c| ((r * 20 + c) as f64 * 0.61).sin());
        let loss = |w: &[f64]| f.forward(w).unwrap().0.component_mul(&weights).sum();
        let (_, cache) = f.forward(&wave).unwrap();
        let grad = f.backward(&cache, &weights);
        for &i in &[0usize, 17, 80, 161, 250, 399] {
            let h = 1e-7;
            let mut p = wave.clone();
            p[i] += h;
            let mut m = wave.clone();
            m[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", grad[i]);
        }
    }
}
