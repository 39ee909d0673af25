//! Small differentiable CTC recognizer.
//!
//! waveform → log filterbank → standardization → `n_layers` encoder layers
//! (affine, depthwise temporal convolution, tanh) → affine head → CTC.
//!
//! The architecture is static, so the backward pass is written out by hand
//! instead of recording a tape. It yields exact gradients with respect to the
//! parameters (training) and to the raw waveform (attacks).

pub mod ctc;
pub mod frontend;
pub mod train;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_file, Provenance};
use frontend::{Frontend, FrontendCache};

pub use train::{train, TrainOptions, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub frame_size: usize,
    pub hop: usize,
    pub n_filters: usize,
    /// Taps of the depthwise temporal convolution (odd).
    pub kernel_width: usize,
    /// Word tokens; the output layer has one extra blank class.
    pub vocab_size: usize,
    pub sample_rate: u32,
    pub eps_log: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 64,
            frame_size: 160,
            hop: 80,
            n_filters: 20,
            kernel_width: 5,
            vocab_size: 8,
            sample_rate: 8000,
            eps_log: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn n_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.hidden_dim < 2 || self.vocab_size == 0 {
            return Err(Error::Config("model needs layers, hidden_dim >= 2 and a vocabulary".into()));
        }
        if self.kernel_width == 0 || self.kernel_width % 2 == 0 {
            return Err(Error::Config("kernel_width must be odd".into()));
        }
        if self.hop == 0 || self.frame_size < self.hop {
            return Err(Error::Config("need frame_size >= hop > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// in × d
    pub weight: DMatrix<f64>,
    /// 1 × d
    pub bias: DMatrix<f64>,
    /// kernel_width × d
    pub kernel: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub feature_mean: DVector<f64>,
    pub feature_std: DVector<f64>,
    pub layers: Vec<LayerParams>,
    /// d × classes
    pub head_weight: DMatrix<f64>,
    /// 1 × classes
    pub head_bias: DMatrix<f64>,
}

impl Params {
    fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut xavier = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
        };
        let d = config.hidden_dim;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let input = if i == 0 { config.n_filters } else { d };
            layers.push(LayerParams {
                weight: xavier(input, d),
                bias: DMatrix::zeros(1, d),
                kernel: DMatrix::zeros(config.kernel_width, d),
            });
        }
        let head_weight = xavier(d, config.n_classes());
        let centre = config.kernel_width / 2;
        for (i, layer) in layers.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0x9e37 + i as u64));
            for (r, mut row) in layer.kernel.row_iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v = if r == centre { 1.0 } else { rng.gen_range(-0.1..0.1) };
                }
            }
        }
        Self {
            feature_mean: DVector::zeros(config.n_filters),
            feature_std: DVector::from_element(config.n_filters, 1.0),
            layers,
            head_weight,
            head_bias: DMatrix::zeros(1, config.n_classes()),
        }
    }

    pub fn trainable(&self) -> Vec<&DMatrix<f64>> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([&l.weight, &l.bias, &l.kernel]);
        }
        out.extend([&self.head_weight, &self.head_bias]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.push(&mut l.kernel);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 1..=self.layers.len() {
            for t in ["weight", "bias", "kernel"] {
                out.push(format!("layer{i}.{t}"));
            }
        }
        out.extend(["head.weight".to_string(), "head.bias".to_string()]);
        out
    }

    /// Same shapes, all trainable tensors zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.trainable_mut() {
            t.fill(0.0);
        }
        z
    }
}

/// Frame-level activations of every encoder layer plus the output logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// `layers[l - 1]` is the T × d output of layer `l`.
    pub layers: Vec<DMatrix<f64>>,
    /// T × classes
    pub logits: DMatrix<f64>,
}

impl HiddenStates {
    pub fn layer(&self, layer: usize) -> Result<&DMatrix<f64>> {
        check_layer(layer, self.layers.len())?;
        Ok(&self.layers[layer - 1])
    }

    pub fn n_frames(&self) -> usize {
        self.logits.nrows()
    }
}

/// Time-averaged hidden state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    pub layer: usize,
    pub values: DVector<f64>,
}

/// Column means of a T × d matrix.
pub fn mean_pool(states: &DMatrix<f64>) -> DVector<f64> {
    let t = states.nrows().max(1) as f64;
    states.row_sum().transpose() / t
}

fn check_layer(layer: usize, n_layers: usize) -> Result<()> {
    if layer == 0 || layer > n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers });
    }
    Ok(())
}

/// `tanh` through a single `exp`.
fn tanh(x: f64) -> f64 {
    let e = (2.0 * x.clamp(-20.0, 20.0)).exp();
    (e - 1.0) / (e + 1.0)
}

/// Output rows `r` for which `r + shift` is a valid input row.
fn tap_range(shift: isize, t: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(hi), hi)
}

/// Token ids to CTC classes (0 is blank).
pub fn token_classes(text: &[u32]) -> Vec<usize> {
    text.iter().map(|&t| t as usize + 1).collect()
}

fn class_tokens(classes: &[usize]) -> Vec<u32> {
    classes.iter().map(|&c| (c - 1) as u32).collect()
}

/// Callback that may rewrite the output of a layer during the forward pass.
pub type LayerHook<'a> = dyn Fn(usize, &mut DMatrix<f64>) + 'a;

/// Additional objective term on one hidden layer:
/// `beta · ‖U Uᵀ (h(x+δ) − h(x))‖²`, pooled over time or averaged over frames.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceTerm<'a> {
    pub layer: usize,
    /// d × k with orthonormal columns.
    pub basis: &'a DMatrix<f64>,
    pub beta: f64,
    /// Pooled reference (1 × d) or per-frame reference (T × d).
    pub reference: &'a DMatrix<f64>,
    pub per_frame: bool,
}

struct Trace {
    frontend: Option<FrontendCache>,
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    hidden: Vec<DMatrix<f64>>,
    logits: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    frontend: Frontend,
}

impl Model {
    /// Freshly initialized model, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let frontend = Frontend::new(
            config.sample_rate,
            config.frame_size,
            config.hop,
            config.n_filters,
            config.eps_log,
        )?;
        let model = Self {
            config,
            params,
            frontend,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let p = &self.params;
        let d = c.hidden_dim;
        let mut expected = Vec::new();
        for i in 0..c.n_layers {
            let input = if i == 0 { c.n_filters } else { d };
            expected.extend([(input, d), (1, d), (c.kernel_width, d)]);
        }
        expected.extend([(d, c.n_classes()), (1, c.n_classes())]);
        let actual: Vec<(usize, usize)> = p.trainable().iter().map(|t| t.shape()).collect();
        if p.layers.len() != c.n_layers || actual != expected {
            return Err(Error::Dimension(format!(
                "parameter shapes {actual:?} do not match config {expected:?}"
            )));
        }
        if p.feature_mean.len() != c.n_filters || p.feature_std.len() != c.n_filters {
            return Err(Error::Dimension("feature normalization length mismatch".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn frontend(&self) -> &Frontend {
        &self.frontend
    }

    /// Number of frames produced for `len` samples.
    pub fn n_frames(&self, len: usize) -> Result<usize> {
        self.frontend.n_frames(len)
    }

    /// Raw log filterbank energies (before standardization).
    pub fn log_filterbank(&self, wave: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.frontend.forward(wave)?.0)
    }

    fn standardize(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let p = &self.params;
        DMatrix::from_fn(raw.nrows(), raw.ncols(), |t, j| {
            (raw[(t, j)] - p.feature_mean[j]) / p.feature_std[j]
        })
    }

    /// Standardized input features, T × n_filters.
    pub fn features(&self, wave: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.standardize(&self.log_filterbank(wave)?))
    }

    fn run_encoder(
        &self,
        input: DMatrix<f64>,
        frontend: Option<FrontendCache>,
        hook: Option<&LayerHook<'_>>,
    ) -> Trace {
        let t = input.nrows();
        let centre = (self.config.kernel_width / 2) as isize;
        let mut pre = Vec::with_capacity(self.config.n_layers);
        let mut hidden: Vec<DMatrix<f64>> = Vec::with_capacity(self.config.n_layers);
        for (i, layer) in self.params.layers.iter().enumerate() {
            let x = if i == 0 { &input } else { &hidden[i - 1] };
            let mut a = x * &layer.weight;
            for mut row in a.row_iter_mut() {
                row += &layer.bias;
            }
            let d = a.ncols();
            let mut h = DMatrix::zeros(t, d);
            for c in 0..d {
                let src = a.column(c);
                let mut dst = h.column_mut(c);
                for (j, &w) in layer.kernel.column(c).iter().enumerate() {
                    let (lo, hi) = tap_range(j as isize - centre, t);
                    let shift = j as isize - centre;
                    for r in lo..hi {
                        dst[r] += w * src[(r as isize + shift) as usize];
                    }
                }
            }
            h.apply(|v: &mut f64| *v = tanh(*v));
            if let Some(hook) = hook {
                hook(i + 1, &mut h);
            }
            pre.push(a);
            hidden.push(h);
        }
        let last = hidden.last().expect("at least one layer");
        let mut logits = last * &self.params.head_weight;
        for mut row in logits.row_iter_mut() {
            row += &self.params.head_bias;
        }
        Trace {
            frontend,
            input,
            pre,
            hidden,
            logits,
        }
    }

    fn trace_wave(&self, wave: &[f64], hook: Option<&LayerHook<'_>>) -> Result<Trace> {
        let (raw, cache) = self.frontend.forward(wave)?;
        Ok(self.run_encoder(self.standardize(&raw), Some(cache), hook))
    }

    /// Encoder pass on precomputed standardized features.
    pub fn forward_features(&self, features: &DMatrix<f64>, hook: Option<&LayerHook<'_>>) -> HiddenStates {
        let trace = self.run_encoder(features.clone(), None, hook);
        HiddenStates {
            layers: trace.hidden,
            logits: trace.logits,
        }
    }

    pub fn forward(&self, wave: &[f64]) -> Result<HiddenStates> {
        self.forward_with(wave, None)
    }

    /// Forward pass with an optional hook applied to each layer's output.
    pub fn forward_with(&self, wave: &[f64], hook: Option<&LayerHook<'_>>) -> Result<HiddenStates> {
        let trace = self.trace_wave(wave, hook)?;
        Ok(HiddenStates {
            layers: trace.hidden,
            logits: trace.logits,
        })
    }

    pub fn pooled_embedding(&self, wave: &[f64], layer: usize) -> Result<PooledEmbedding> {
        check_layer(layer, self.config.n_layers)?;
        let states = self.forward(wave)?;
        Ok(PooledEmbedding {
            layer,
            values: mean_pool(&states.layers[layer - 1]),
        })
    }

    pub fn decode_logits(logits: &DMatrix<f64>) -> Vec<u32> {
        class_tokens(&ctc::greedy_decode(logits))
    }

    pub fn transcribe(&self, wave: &[f64]) -> Result<Vec<u32>> {
        Ok(Self::decode_logits(&self.forward(wave)?.logits))
    }

    pub fn ctc_loss(&self, wave: &[f64], text: &[u32]) -> Result<f64> {
        ctc::ctc_loss(&self.forward(wave)?.logits, &token_classes(text))
    }

    fn subspace_value(term: &SubspaceTerm<'_>, states: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let (t, d) = states.shape();
        let u = term.basis;
        if u.nrows() != d {
            return Err(Error::Dimension(format!(
                "subspace basis has {} rows but layer {} has width {d}",
                u.nrows(),
                term.layer
            )));
        }
        if term.per_frame {
            if term.reference.shape() != (t, d) {
                return Err(Error::Dimension("per-frame reference shape mismatch".into()));
            }
            let diff = states - term.reference;
            let projected = (&diff * u) * u.transpose();
            let value = term.beta * projected.norm_squared() / t as f64;
            Ok((value, projected * (2.0 * term.beta / t as f64)))
        } else {
            if term.reference.shape() != (1, d) {
                return Err(Error::Dimension("pooled reference must be 1 × d".into()));
            }
            let diff = mean_pool(states).transpose() - term.reference;
            let projected = (&diff * u) * u.transpose();
            let value = term.beta * projected.norm_squared();
            let row = projected * (2.0 * term.beta / t as f64);
            let grad = DMatrix::from_fn(t, d, |_, c| row[(0, c)]);
            Ok((value, grad))
        }
    }

    /// Value and waveform gradient of `CTC(x) + [subspace term]`.
    pub fn objective_and_input_grad(
        &self,
        wave: &[f64],
        text: &[u32],
        term: Option<&SubspaceTerm<'_>>,
    ) -> Result<(f64, Vec<f64>)> {
        let trace = self.trace_wave(wave, None)?;
        let (mut value, d_logits) = ctc::ctc_loss_and_grad(&trace.logits, &token_classes(text))?;
        let mut extra = Vec::new();
        if let Some(term) = term {
            check_layer(term.layer, self.config.n_layers)?;
            let (v, g) = Self::subspace_value(term, &trace.hidden[term.layer - 1])?;
            value += v;
            extra.push((term.layer, g));
        }
        let (_, d_input) = self.backward(&trace, &d_logits, &extra, false);
        let grad = self.input_to_wave_grad(&trace, &d_input);
        Ok((value, grad))
    }

    /// Value of `CTC(x) + [subspace term]` without gradients.
    pub fn objective(&self, wave: &[f64], text: &[u32], term: Option<&SubspaceTerm<'_>>) -> Result<f64> {
        let trace = self.trace_wave(wave, None)?;
        let mut value = ctc::ctc_loss(&trace.logits, &token_classes(text))?;
        if let Some(term) = term {
            check_layer(term.layer, self.config.n_layers)?;
            value += Self::subspace_value(term, &trace.hidden[term.layer - 1])?.0;
        }
        Ok(value)
    }

    /// Waveform gradient for an arbitrary upstream gradient on the logits.
    pub fn logits_vjp(&self, wave: &[f64], d_logits: &DMatrix<f64>) -> Result<Vec<f64>> {
        let trace = self.trace_wave(wave, None)?;
        if d_logits.shape() != trace.logits.shape() {
            return Err(Error::Dimension("upstream gradient shape mismatch".into()));
        }
        let (_, d_input) = self.backward(&trace, d_logits, &[], false);
        Ok(self.input_to_wave_grad(&trace, &d_input))
    }

    fn input_to_wave_grad(&self, trace: &Trace, d_input: &DMatrix<f64>) -> Vec<f64> {
        let std = &self.params.feature_std;
        let d_raw = DMatrix::from_fn(d_input.nrows(), d_input.ncols(), |t, j| d_input[(t, j)] / std[j]);
        let cache = trace.frontend.as_ref().expect("trace built from a waveform");
        self.frontend.backward(cache, &d_raw)
    }

    /// CTC loss and parameter gradient for one standardized feature matrix.
    pub fn loss_and_param_grad(&self, features: &DMatrix<f64>, text: &[u32]) -> Result<(f64, Params)> {
        let trace = self.run_encoder(features.clone(), None, None);
        let (loss, d_logits) = ctc::ctc_loss_and_grad(&trace.logits, &token_classes(text))?;
        let (grads, _) = self.backward(&trace, &d_logits, &[], true);
        Ok((loss, grads.expect("requested parameter gradients")))
    }

    /// Reverse pass. `extra` adds gradients on layer outputs (1-indexed layers).
    fn backward(
        &self,
        trace: &Trace,
        d_logits: &DMatrix<f64>,
        extra: &[(usize, DMatrix<f64>)],
        want_params: bool,
    ) -> (Option<Params>, DMatrix<f64>) {
        let p = &self.params;
        let mut grads = want_params.then(|| p.zeros_like());
        let last = trace.hidden.last().expect("at least one layer");
        if let Some(g) = grads.as_mut() {
            g.head_weight = last.transpose() * d_logits;
            g.head_bias = DMatrix::from_row_slice(1, d_logits.ncols(), d_logits.row_sum().as_slice());
        }
        let mut d_h = d_logits * p.head_weight.transpose();
        let t = d_h.nrows();
        let centre = (self.config.kernel_width / 2) as isize;
        for i in (0..p.layers.len()).rev() {
            for (layer, g) in extra {
                if *layer == i + 1 {
                    d_h += g;
                }
            }
            let layer = &p.layers[i];
            let h = &trace.hidden[i];
            let a = &trace.pre[i];
            let d = h.ncols();
            let d_m = d_h.zip_map(h, |g, v| g * (1.0 - v * v));
            let mut d_a = DMatrix::zeros(t, d);
            let mut d_kernel = DMatrix::zeros(layer.kernel.nrows(), d);
            for c in 0..d {
                let g = d_m.column(c);
                let src = a.column(c);
                let mut dst = d_a.column_mut(c);
                for (j, &w) in layer.kernel.column(c).iter().enumerate() {
                    let (lo, hi) = tap_range(j as isize - centre, t);
                    let shift = j as isize - centre;
                    let mut acc = 0.0;
                    for r in lo..hi {
                        let s = (r as isize + shift) as usize;
                        acc += g[r] * src[s];
                        dst[s] += w * g[r];
                    }
                    d_kernel[(j, c)] = acc;
                }
            }
            let x = if i == 0 { &trace.input } else { &trace.hidden[i - 1] };
            if let Some(g) = grads.as_mut() {
                g.layers[i].weight = x.transpose() * &d_a;
                g.layers[i].bias = DMatrix::from_row_slice(1, d, d_a.row_sum().as_slice());
                g.layers[i].kernel = d_kernel;
            }
            d_h = d_a * layer.weight.transpose();
        }
        (grads, d_h)
    }

    /// Serialize config and parameters to JSON.
    pub fn save(&self, path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let tensors = self
            .params
            .tensor_names()
            .into_iter()
            .zip(self.params.trainable())
            .map(|(name, t)| TensorRecord {
                name,
                rows: t.nrows(),
                cols: t.ncols(),
                data: t.transpose().iter().copied().collect(),
            })
            .collect();
        let record = CheckpointRecord {
            format_version: CHECKPOINT_VERSION,
            provenance: provenance.cloned(),
            seed: self.config.seed,
            config: self.config.clone(),
            feature_mean: self.params.feature_mean.iter().copied().collect(),
            feature_std: self.params.feature_std.iter().copied().collect(),
            tensors,
        };
        write_file(path, serde_json::to_vec_pretty(&record)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let record: CheckpointRecord = serde_json::from_slice(&bytes)?;
        if record.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                record.format_version
            )));
        }
        let mut config = record.config;
        config.seed = record.seed;
        config.validate()?;
        let mut params = Params::init(&config);
        let names = params.tensor_names();
        if record.tensors.len() != names.len() {
            return Err(Error::Dimension(format!(
                "checkpoint has {} tensors, config expects {}",
                record.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), rec) in params.trainable_mut().into_iter().zip(&names).zip(&record.tensors) {
            if &rec.name != name || (rec.rows, rec.cols) != slot.shape() || rec.data.len() != rec.rows * rec.cols {
                return Err(Error::Dimension(format!(
                    "tensor `{}` ({}×{}) does not match expected `{name}` {:?}",
                    rec.name,
                    rec.rows,
                    rec.cols,
                    slot.shape()
                )));
            }
            *slot = DMatrix::from_row_slice(rec.rows, rec.cols, &rec.data);
        }
        params.feature_mean = DVector::from_vec(record.feature_mean);
        params.feature_std = DVector::from_vec(record.feature_std);
        Self::from_parts(config, params)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointRecord {
    format_version: u32,
    provenance: Option<Provenance>,
    seed: u64,
    config: ModelConfig,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    tensors: Vec<TensorRecord>,
}
