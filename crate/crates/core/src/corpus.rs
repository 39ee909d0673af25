//! Deterministic multi-accent corpus of speech-like token sequences.
//!
//! Every word token is a short stack of three sinusoidal formants under a
//! raised-cosine envelope. An accent is a fixed signal transform (formant
//! scaling, spectral tilt, tempo and noise floor) and each speaker adds a
//! small seeded jitter on top of it. Training data is skewed towards the
//! reference accent (index 0) so that a model trained on it shows a baseline
//! WER gap across accents.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, read_f32le, write_f32le, write_file, Provenance};

/// Peak amplitude every synthesized waveform is normalized to.
pub const PEAK: f32 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "eval" => Ok(Split::Eval),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// Signal-level definition of one accent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentTransform {
    pub label: String,
    /// Multiplies every formant frequency.
    pub pitch_scale: f64,
    /// Formant gain slope in dB per octave around 1 kHz.
    pub spectral_tilt: f64,
    /// Multiplies token, gap and edge durations.
    pub duration_scale: f64,
    /// Standard deviation of additive Gaussian noise before normalization.
    pub noise_floor: f64,
}

impl AccentTransform {
    fn validate(&self) -> Result<()> {
        if !(self.pitch_scale > 0.0 && self.duration_scale > 0.0) {
            return Err(Error::Config(format!(
                "accent `{}` needs positive pitch and duration scales",
                self.label
            )));
        }
        if !(self.noise_floor >= 0.0) || !self.spectral_tilt.is_finite() {
            return Err(Error::Config(format!(
                "accent `{}` has an invalid tilt or noise floor",
                self.label
            )));
        }
        Ok(())
    }
}

/// Default transform table; the first entry is the reference accent.
pub fn default_accents(n: usize) -> Vec<AccentTransform> {
    const TABLE: [(f64, f64, f64, f64); 7] = [
        (1.00, 0.0, 1.00, 0.004),
        (1.07, -3.0, 1.10, 0.006),
        (0.93, 3.0, 0.90, 0.006),
        (1.12, 2.0, 1.18, 0.008),
        (0.89, -2.0, 0.86, 0.008),
        (1.04, 4.0, 0.95, 0.010),
        (0.96, -4.0, 1.12, 0.010),
    ];
    (0..n)
        .map(|i| {
            let (pitch, tilt, dur, noise) = if i < TABLE.len() {
                TABLE[i]
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &format!("accent{i}")));
                (
                    rng.gen_range(0.88..1.14),
                    rng.gen_range(-4.0..4.0),
                    rng.gen_range(0.85..1.2),
                    rng.gen_range(0.004..0.01),
                )
            };
            AccentTransform {
                label: format!("acc{i}"),
                pitch_scale: pitch,
                spectral_tilt: tilt,
                duration_scale: dur,
                noise_floor: noise,
            }
        })
        .collect()
}

/// Speakers per accent in each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerCounts {
    pub train: usize,
    pub validation: usize,
    pub eval: usize,
}

impl Default for SpeakerCounts {
    fn default() -> Self {
        Self {
            train: 12,
            validation: 4,
            eval: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_accents: usize,
    pub utterances_per_accent_eval: usize,
    pub utterances_per_accent_validation: usize,
    pub train_size: usize,
    /// Probability mass of the reference accent in the training split.
    pub train_skew: f64,
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub sample_rate: u32,
    pub token_ms: f64,
    pub gap_ms: f64,
    pub edge_ms: f64,
    pub speakers: SpeakerCounts,
    /// Overrides the default transform table when present.
    pub accents: Option<Vec<AccentTransform>>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_accents: 7,
            utterances_per_accent_eval: 100,
            utterances_per_accent_validation: 20,
            train_size: 1200,
            train_skew: 0.7,
            vocab_size: 8,
            min_tokens: 2,
            max_tokens: 3,
            sample_rate: 8000,
            token_ms: 100.0,
            gap_ms: 40.0,
            edge_ms: 40.0,
            speakers: SpeakerCounts::default(),
            accents: None,
            seed: 0,
        }
    }
}

// Relative speaker jitter bounds.
const SPEAKER_PITCH_JITTER: f64 = 0.02;
const SPEAKER_TILT_JITTER: f64 = 1.0;
const SPEAKER_DURATION_JITTER: f64 = 0.05;

impl CorpusConfig {
    pub fn accent_table(&self) -> Vec<AccentTransform> {
        self.accents
            .clone()
            .unwrap_or_else(|| default_accents(self.n_accents))
    }

    pub fn accent_labels(&self) -> Vec<String> {
        self.accent_table().into_iter().map(|a| a.label).collect()
    }

    pub fn reference_accent(&self) -> String {
        self.accent_table()
            .into_iter()
            .next()
            .map(|a| a.label)
            .unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let table = self.accent_table();
        if table.len() < 2 {
            return Err(Error::Config("at least two accents are required".into()));
        }
        if table.len() != self.n_accents {
            return Err(Error::Config(format!(
                "n_accents is {} but {} accent transforms are defined",
                self.n_accents,
                table.len()
            )));
        }
        let labels: BTreeSet<&str> = table.iter().map(|a| a.label.as_str()).collect();
        if labels.len() != table.len() {
            return Err(Error::Config("accent labels must be unique".into()));
        }
        for a in &table {
            a.validate()?;
        }
        let a = table.len() as f64;
        if !(self.train_skew >= 1.0 / a - 1e-12 && self.train_skew <= 1.0) {
            return Err(Error::Config(format!(
                "train_skew {} outside [1/{}, 1]",
                self.train_skew, table.len()
            )));
        }
        if self.vocab_size == 0 || self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("invalid vocabulary or token-count bounds".into()));
        }
        if self.sample_rate == 0 || !(self.token_ms > 0.0) || self.gap_ms < 0.0 || self.edge_ms < 0.0 {
            return Err(Error::Config("invalid sample rate or durations".into()));
        }
        let s = &self.speakers;
        if s.train == 0 || s.validation == 0 || s.eval == 0 {
            return Err(Error::Config("every split needs at least one speaker per accent".into()));
        }
        Ok(())
    }

    fn ms_to_samples(&self, ms: f64, scale: f64) -> usize {
        (ms * scale * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Inclusive bounds on waveform length for a text of `n_tokens` tokens.
    pub fn length_bounds(&self, n_tokens: usize) -> (usize, usize) {
        let table = self.accent_table();
        let dmin = table.iter().map(|a| a.duration_scale).fold(f64::INFINITY, f64::min)
            * (1.0 - SPEAKER_DURATION_JITTER);
        let dmax = table.iter().map(|a| a.duration_scale).fold(0.0, f64::max)
            * (1.0 + SPEAKER_DURATION_JITTER);
        let len = |scale: f64| {
            n_tokens as f64 * self.token_ms * scale * self.sample_rate as f64 / 1000.0
                + (n_tokens.saturating_sub(1) as f64 * self.gap_ms + 2.0 * self.edge_ms)
                    * scale
                    * self.sample_rate as f64
                    / 1000.0
        };
        let slack = 2 * n_tokens + 4;
        ((len(dmin) as usize).saturating_sub(slack), len(dmax) as usize + slack)
    }
}

/// One synthetic recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub accent: String,
    pub speaker_id: String,
    pub text: Vec<u32>,
    pub waveform: Vec<f32>,
    pub sample_rate: u32,
    pub split: Split,
}

impl Utterance {
    pub fn samples(&self) -> Vec<f64> {
        self.waveform.iter().map(|&s| s as f64).collect()
    }
}

/// Ratio between the formants of consecutive tokens.
///
/// Accent pitch scales of similar size move a token onto its neighbour's
/// formants, so recognizing non-reference accents requires the other cues.
pub const TOKEN_FORMANT_RATIO: f64 = 1.10;

const BASE_FORMANTS: [f64; 3] = [280.0, 840.0, 2240.0];

/// Formant frequencies (Hz) of a token before any accent transform.
pub fn token_formants(token: u32) -> [f64; 3] {
    let s = TOKEN_FORMANT_RATIO.powi(token as i32);
    BASE_FORMANTS.map(|f| f * s)
}

const FORMANT_GAINS: [f64; 3] = [1.0, 0.7, 0.5];
const RAMP_MS: f64 = 15.0;

struct SpeakerTraits {
    pitch: f64,
    tilt: f64,
    duration: f64,
}

fn speaker_traits(accent: &AccentTransform, corpus_seed: u64, speaker_id: &str) -> SpeakerTraits {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(corpus_seed, &format!("speaker/{speaker_id}")));
    let mut u = || rng.gen_range(-1.0..=1.0);
    SpeakerTraits {
        pitch: accent.pitch_scale * (1.0 + SPEAKER_PITCH_JITTER * u()),
        tilt: accent.spectral_tilt + SPEAKER_TILT_JITTER * u(),
        duration: accent.duration_scale * (1.0 + SPEAKER_DURATION_JITTER * u()),
    }
}

/// Synthesize one utterance.
///
/// The waveform is a pure function of `(id, text, accent, speaker_id, config)`.
pub fn synthesize_utterance(
    id: &str,
    text: &[u32],
    accent: &str,
    speaker_id: &str,
    split: Split,
    config: &CorpusConfig,
) -> Result<Utterance> {
    if text.is_empty() {
        return Err(Error::EmptyText);
    }
    if let Some(&bad) = text.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token: bad,
            vocab_size: config.vocab_size,
        });
    }
    let table = config.accent_table();
    let transform = table
        .iter()
        .find(|a| a.label == accent)
        .ok_or_else(|| Error::UnknownAccent(accent.to_string()))?;
    transform.validate()?;

    let traits = speaker_traits(transform, config.seed, speaker_id);
    let sr = config.sample_rate as f64;
    let token_len = config.ms_to_samples(config.token_ms, traits.duration).max(1);
    let gap_len = config.ms_to_samples(config.gap_ms, traits.duration);
    let edge_len = config.ms_to_samples(config.edge_ms, traits.duration);
    let ramp = config
        .ms_to_samples(RAMP_MS, traits.duration)
        .clamp(1, token_len / 2 + 1);
    let total = 2 * edge_len + text.len() * token_len + (text.len() - 1) * gap_len;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("utterance/{id}")));
    let mut wave = vec![0.0f64; total];
    let mut start = edge_len;
    for &token in text {
        let formants = token_formants(token);
        for (f, base_gain) in formants.iter().zip(FORMANT_GAINS) {
            let freq = (f * traits.pitch).min(0.45 * sr);
            let gain = base_gain * 10f64.powf(traits.tilt * (freq / 1000.0).log2() / 20.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            for n in 0..token_len {
                let env = envelope(n, token_len, ramp);
                let t = n as f64 / sr;
                wave[start + n] += gain * env * (2.0 * PI * freq * t + phase).sin();
            }
        }
        start += token_len + gap_len;
    }
    for s in wave.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *s += transform.noise_floor * z;
    }
    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { PEAK as f64 / peak } else { 0.0 };
    let waveform = wave
        .iter()
        .map(|v| ((v * scale) as f32).clamp(-PEAK, PEAK))
        .collect();

    Ok(Utterance {
        id: id.to_string(),
        accent: accent.to_string(),
        speaker_id: speaker_id.to_string(),
        text: text.to_vec(),
        waveform,
        sample_rate: config.sample_rate,
        split,
    })
}

fn envelope(n: usize, len: usize, ramp: usize) -> f64 {
    let rise = |k: usize| 0.5 * (1.0 - (PI * k as f64 / ramp as f64).cos());
    if n < ramp {
        rise(n)
    } else if len - n <= ramp {
        rise(len - n)
    } else {
        1.0
    }
}

struct Plan {
    id: String,
    accent: String,
    speaker_id: String,
    text: Vec<u32>,
    split: Split,
}

/// Generate the whole corpus. Output is independent of thread scheduling.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<Utterance>> {
    config.validate()?;
    let labels = config.accent_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "corpus-plan"));
    let mut plans = Vec::new();

    let speaker = |split: Split, accent: &str, n: usize| format!("{split}-{accent}-spk{n:02}");
    let draw_text = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let len = rng.gen_range(config.min_tokens..=config.max_tokens);
        (0..len).map(|_| rng.gen_range(0..config.vocab_size as u32)).collect()
    };

    for i in 0..config.train_size {
        let accent = if rng.gen::<f64>() < config.train_skew {
            &labels[0]
        } else {
            labels[1..].choose(&mut rng).expect("at least two accents")
        };
        let spk = rng.gen_range(0..config.speakers.train);
        plans.push(Plan {
            id: format!("train-{i:05}"),
            accent: accent.clone(),
            speaker_id: speaker(Split::Train, accent, spk),
            text: draw_text(&mut rng),
            split: Split::Train,
        });
    }
    for (split, per_accent, n_speakers) in [
        (
            Split::Validation,
            config.utterances_per_accent_validation,
            config.speakers.validation,
        ),
        (Split::Eval, config.utterances_per_accent_eval, config.speakers.eval),
    ] {
        for accent in &labels {
            for j in 0..per_accent {
                plans.push(Plan {
                    id: format!("{split}-{accent}-{j:04}"),
                    accent: accent.clone(),
                    speaker_id: speaker(split, accent, j % n_speakers),
                    text: draw_text(&mut rng),
                    split,
                });
            }
        }
    }

    let utterances = plans
        .par_iter()
        .map(|p| synthesize_utterance(&p.id, &p.text, &p.accent, &p.speaker_id, p.split, config))
        .collect::<Result<Vec<_>>>()?;
    check_split_hygiene(&utterances)?;
    Ok(utterances)
}

/// Speakers must not cross splits and the eval split must be accent-balanced.
pub fn check_split_hygiene(utterances: &[Utterance]) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for u in utterances {
        if let Some(&prev) = seen.get(u.speaker_id.as_str()) {
            if prev != u.split {
                return Err(Error::SpeakerOverlap {
                    speaker: u.speaker_id.clone(),
                    first: prev.to_string(),
                    second: u.split.to_string(),
                });
            }
        } else {
            seen.insert(&u.speaker_id, u.split);
        }
    }
    let mut eval_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for u in utterances.iter().filter(|u| u.split == Split::Eval) {
        *eval_counts.entry(&u.accent).or_default() += 1;
    }
    let distinct: BTreeSet<usize> = eval_counts.values().copied().collect();
    if distinct.len() > 1 {
        return Err(Error::Config(format!(
            "eval split is not accent-balanced: {eval_counts:?}"
        )));
    }
    Ok(())
}

/// Utterances of one split, in corpus order.
pub fn split_of(utterances: &[Utterance], split: Split) -> Vec<&Utterance> {
    utterances.iter().filter(|u| u.split == split).collect()
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub audio_path: PathBuf,
    pub accent: String,
    pub text: Vec<u32>,
    pub speaker_id: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        self.audio_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub const MANIFEST_HEADER: [&str; 5] = ["audio_path", "accent", "text", "speaker_id", "split"];

fn entry_for(u: &Utterance) -> ManifestEntry {
    ManifestEntry {
        audio_path: PathBuf::from("audio").join(format!("{}.f32", u.id)),
        accent: u.accent.clone(),
        text: u.text.clone(),
        speaker_id: u.speaker_id.clone(),
        split: u.split,
    }
}

/// Write `manifest.csv` and one raw f32le file per utterance under `dir`.
pub fn save_manifest(
    utterances: &[Utterance],
    dir: &Path,
    provenance: Option<&Provenance>,
) -> Result<PathBuf> {
    let entries: Vec<ManifestEntry> = utterances.iter().map(entry_for).collect();
    for (u, e) in utterances.iter().zip(&entries) {
        write_f32le(&dir.join(&e.audio_path), &u.waveform)?;
    }
    let path = dir.join("manifest.csv");
    write_manifest(&path, &entries, provenance)?;
    Ok(path)
}

/// Write manifest rows only.
pub fn write_manifest(
    path: &Path,
    entries: &[ManifestEntry],
    provenance: Option<&Provenance>,
) -> Result<()> {
    let mut out = provenance.map(|p| p.csv_comment()).unwrap_or_default().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(MANIFEST_HEADER)?;
        for e in entries {
            let text = e.text.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
            w.write_record([
                e.audio_path.to_string_lossy().as_ref(),
                &e.accent,
                &text,
                &e.speaker_id,
                e.split.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("flushing manifest", e))?;
    }
    write_file(path, out)
}

/// Parse a manifest; every malformed row is reported with its line number.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(format!("opening {}", path.display()), io),
            other => Error::Manifest {
                line: 1,
                message: format!("{other:?}"),
            },
        })?;
    let header_line = reader.position().line();
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Manifest {
            line: header_line.max(1),
            message: format!(
                "header must be `{}`, found `{}`",
                MANIFEST_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |message: String| Error::Manifest { line, message };
        if record.len() != MANIFEST_HEADER.len() {
            return Err(bad(format!(
                "expected {} fields, found {}",
                MANIFEST_HEADER.len(),
                record.len()
            )));
        }
        for (i, name) in MANIFEST_HEADER.iter().enumerate() {
            if record[i].trim().is_empty() {
                return Err(bad(format!("missing {name}")));
            }
        }
        let text = record[2]
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| bad(format!("bad token `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        let split = record[4].parse::<Split>().map_err(bad)?;
        entries.push(ManifestEntry {
            audio_path: PathBuf::from(&record[0]),
            accent: record[1].to_string(),
            text,
            speaker_id: record[3].to_string(),
            split,
        });
    }
    Ok(entries)
}

/// Load the manifest and every referenced audio file.
pub fn load_corpus(manifest: &Path, sample_rate: u32) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let utterances = load_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                id: e.id(),
                waveform: read_f32le(&base.join(&e.audio_path))?,
                accent: e.accent,
                speaker_id: e.speaker_id,
                text: e.text,
                sample_rate,
                split: e.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    check_split_hygiene(&utterances)?;
    Ok(utterances)
}

/// Magnitude-weighted mean frequency (Hz) of a waveform's DFT.
pub fn spectral_centroid(samples: &[f32], sample_rate: u32) -> f64 {
    let n = samples.len();
    let (mut num, mut den) = (0.0, 0.0);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &s) in samples.iter().enumerate() {
            let arg = -2.0 * PI * (k * i % n) as f64 / n as f64;
            re += s as f64 * arg.cos();
            im += s as f64 * arg.sin();
        }
        let mag = (re * re + im * im).sqrt();
        num += mag * k as f64 * sample_rate as f64 / n as f64;
        den += mag;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}
