//! Conditional diffusion over blendshape-weight windows.
//!
//! A linear-beta DDPM schedule drives forward noising of weight windows
//! `x0` (T x m). The denoiser is a pre-norm transformer over the T frame
//! tokens, conditioned on the per-frame sensor matrix C (acceleration and
//! orientation of every non-auxiliary sensor) and a noise-step embedding.
//! The network predicts x0 directly and is trained with mean L1 loss
//! against the clean window; reverse steps combine that prediction with
//! the standard DDPM posterior. Long sequences are handled by sampling
//! overlapping windows and crossfading them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use thiserror::Error;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::autodiff::checkpoint::{self, Entry};
use crate::autodiff::{AdamConfig, AdamState, AutodiffError, Gradients, Tape, Tensor, Value};
use crate::calib::CalibratedSequence;
use crate::rng::SeededRng;

pub const DEFAULT_T_NOISE: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Step count for desk-scale runs.
pub const TOY_T_NOISE: usize = 50;
/// Columns per sensor in a condition matrix: acceleration xyz then
/// quaternion wxyz.
pub const CONDITION_BLOCK: usize = 7;
/// Unit tolerance for quaternion sub-blocks of a condition window.
pub const CONDITION_UNIT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("beta range ({start}, {end}) must satisfy 0 < start <= end < 1")]
    InvalidBetaRange { start: f64, end: f64 },
    #[error("schedule needs at least one step")]
    ZeroSteps,
    #[error("step {t} outside 1..={t_noise}")]
    StepOutOfRange { t: usize, t_noise: usize },
    #[error("d_model {d_model} not divisible by {heads} heads")]
    HeadsMismatch { d_model: usize, heads: usize },
    #[error("d_model {d_model} must be even for the sinusoidal features")]
    OddModel { d_model: usize },
    #[error("config field {field} must be nonzero")]
    ZeroField { field: &'static str },
    #[error("condition width {width} is not a multiple of {CONDITION_BLOCK}")]
    BadConditionWidth { width: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("condition entry at frame {frame}, column {col} is not finite")]
    NonFiniteCondition { frame: usize, col: usize },
    #[error("condition quaternion norm {norm} at frame {frame}, sensor block {block} departs from unit beyond {CONDITION_UNIT_TOL}")]
    NonUnitCondition { frame: usize, block: usize, norm: f64 },
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("auxiliary index {aux} outside 0..{sensors}")]
    BadAuxIndex { aux: usize, sensors: usize },
    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("checkpoint carries unexpected tensor {name}")]
    UnexpectedTensor { name: String },
    #[error(transparent)]
    Engine(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
}

/// Linear-beta DDPM schedule. Steps are 1-based; `alpha_bar(0)` is
/// defined as 1 so the final posterior collapses onto the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(
    t_noise: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule, DiffusionError> {
    if t_noise == 0 {
        return Err(DiffusionError::ZeroSteps);
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::InvalidBetaRange { start: beta_start, end: beta_end });
    }
    let mut betas = Vec::with_capacity(t_noise);
    let mut alpha_bars = Vec::with_capacity(t_noise);
    let mut prod = 1.0;
    for i in 0..t_noise {
        let frac = if t_noise == 1 { 0.0 } else { i as f64 / (t_noise - 1) as f64 };
        let beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        betas.push(beta);
        alpha_bars.push(prod);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn with_defaults() -> Self {
        build_schedule(DEFAULT_T_NOISE, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule parameters are valid")
    }

    pub fn toy() -> Self {
        build_schedule(TOY_T_NOISE, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("toy schedule parameters are valid")
    }

    pub fn t_noise(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_noise() {
            return Err(DiffusionError::StepOutOfRange { t, t_noise: self.t_noise() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64, DiffusionError> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64, DiffusionError> {
        Ok(1.0 - self.beta(t)?)
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }
}

/// x^t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
pub fn forward_diffuse(
    schedule: &DiffusionSchedule,
    x0: &Tensor<f64>,
    t: usize,
    noise: &Tensor<f64>,
) -> Result<Tensor<f64>, DiffusionError> {
    schedule.check(t)?;
    if x0.shape() != noise.shape() {
        return Err(DiffusionError::ShapeMismatch {
            what: "forward_diffuse noise",
            expected: x0.shape(),
            got: noise.shape(),
        });
    }
    let ab = schedule.alpha_bar(t)?;
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&x, &n)| s0 * x + s1 * n)
        .collect();
    Ok(Tensor::new(x0.rows(), x0.cols(), data)?)
}

/// Coefficients of the DDPM posterior q(x^{t-1} | x^t, x0):
/// mean = c0 * x0_hat + c1 * x^t, variance = var. At t=1 this is
/// (1, 0, 0): the step returns the prediction exactly.
pub fn posterior_coefficients(
    schedule: &DiffusionSchedule,
    t: usize,
) -> Result<(f64, f64, f64), DiffusionError> {
    schedule.check(t)?;
    let beta = schedule.beta(t)?;
    let alpha = 1.0 - beta;
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t - 1)?;
    let denom = 1.0 - ab_t;
    let c0 = ab_prev.sqrt() * beta / denom;
    let c1 = alpha.sqrt() * (1.0 - ab_prev) / denom;
    let var = beta * (1.0 - ab_prev) / denom;
    Ok((c0, c1, var))
}

/// Transformer dimensions. `condition_width` is 7 per conditioning
/// sensor (acceleration 3 + quaternion 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Frames per window (T).
    pub window: usize,
    /// Output channels per frame (m).
    pub blendshapes: usize,
    pub condition_width: usize,
}

impl DenoiserConfig {
    /// Desk-scale configuration used by the smoke tests.
    pub fn toy() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            heads: 4,
            ff_width: 128,
            window: 24,
            blendshapes: 8,
            condition_width: 77,
        }
    }

    /// Full-scale configuration; constructible but far beyond desk-scale
    /// training budgets.
    pub fn full_scale() -> Self {
        Self {
            layers: 4,
            d_model: 512,
            heads: 8,
            ff_width: 2048,
            window: 120,
            blendshapes: 53,
            condition_width: 77,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        for (field, v) in [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("window", self.window),
            ("blendshapes", self.blendshapes),
            ("condition_width", self.condition_width),
        ] {
            if v == 0 {
                return Err(DiffusionError::ZeroField { field });
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(DiffusionError::HeadsMismatch { d_model: self.d_model, heads: self.heads });
        }
        if self.d_model % 2 != 0 {
            return Err(DiffusionError::OddModel { d_model: self.d_model });
        }
        if self.condition_width % CONDITION_BLOCK != 0 {
            return Err(DiffusionError::BadConditionWidth { width: self.condition_width });
        }
        Ok(())
    }
}

/// A T x condition_width matrix of per-frame sensor readings, validated
/// for finiteness and unit quaternion sub-blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionWindow {
    data: Tensor<f64>,
}

impl ConditionWindow {
    pub fn new(data: Tensor<f64>) -> Result<Self, DiffusionError> {
        validate_condition(&data)?;
        Ok(Self { data })
    }

    pub fn data(&self) -> &Tensor<f64> {
        &self.data
    }

    pub fn window_len(&self) -> usize {
        self.data.rows()
    }

    pub fn width(&self) -> usize {
        self.data.cols()
    }

    /// Rows `start..start + len` of a calibrated sequence, as condition
    /// data (every sensor except the auxiliary, ascending id order).
    pub fn from_calibrated(
        seq: &CalibratedSequence,
        aux_index: usize,
        start: usize,
        len: usize,
    ) -> Result<Self, DiffusionError> {
        let full = condition_matrix(seq, aux_index)?;
        if len == 0 || start + len > full.rows() {
            return Err(DiffusionError::ShapeMismatch {
                what: "condition window range",
                expected: (full.rows(), full.cols()),
                got: (start + len, full.cols()),
            });
        }
        let mut data = Tensor::zeros(len, full.cols());
        for r in 0..len {
            for c in 0..full.cols() {
                data.set(r, c, full.get(start + r, c));
            }
        }
        Self::new(data)
    }
}

fn validate_condition(data: &Tensor<f64>) -> Result<(), DiffusionError> {
    if data.cols() % CONDITION_BLOCK != 0 {
        return Err(DiffusionError::BadConditionWidth { width: data.cols() });
    }
    for r in 0..data.rows() {
        for c in 0..data.cols() {
            if !data.get(r, c).is_finite() {
                return Err(DiffusionError::NonFiniteCondition { frame: r, col: c });
            }
        }
        for block in 0..data.cols() / CONDITION_BLOCK {
            let base = block * CONDITION_BLOCK + 3;
            let norm = (0..4)
                .map(|k| data.get(r, base + k).powi(2))
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > CONDITION_UNIT_TOL {
                return Err(DiffusionError::NonUnitCondition { frame: r, block, norm });
            }
        }
    }
    Ok(())
}

/// Full N x 7(S-1) condition matrix of a calibrated sequence: for each
/// frame, `[a.x a.y a.z q.w q.x q.y q.z]` per sensor, auxiliary excluded,
/// ascending sensor index.
pub fn condition_matrix(
    seq: &CalibratedSequence,
    aux_index: usize,
) -> Result<Tensor<f64>, DiffusionError> {
    let sensors = seq.num_sensors();
    if aux_index >= sensors {
        return Err(DiffusionError::BadAuxIndex { aux: aux_index, sensors });
    }
    let frames = seq.num_frames();
    if frames == 0 || sensors < 2 {
        return Err(DiffusionError::EmptySequence);
    }
    let width = (sensors - 1) * CONDITION_BLOCK;
    let mut out = Tensor::zeros(frames, width);
    for f in 0..frames {
        let mut col = 0;
        for s in 0..sensors {
            if s == aux_index {
                continue;
            }
            let sample = &seq.samples[s][f];
            for (k, v) in [
                sample.a.x,
                sample.a.y,
                sample.a.z,
                sample.q.w,
                sample.q.x,
                sample.q.y,
                sample.q.z,
            ]
            .into_iter()
            .enumerate()
            {
                out.set(f, col + k, v);
            }
            col += CONDITION_BLOCK;
        }
    }
    Ok(out)
}

/// Parameter tensor layout: a fixed flat order so the optimizer, the
/// tape leaves, and the checkpoint names all agree.
#[derive(Debug, Clone, Copy)]
struct Layout {
    layers: usize,
}

impl Layout {
    const INPUT_W: usize = 0;
    const INPUT_B: usize = 1;
    const POS: usize = 2;
    const EM_W1: usize = 3;
    const EM_B1: usize = 4;
    const EM_W2: usize = 5;
    const EM_B2: usize = 6;
    const PER_LAYER: usize = 12;
    const LAYER_BASE: usize = 7;

    fn layer(self, i: usize) -> usize {
        Self::LAYER_BASE + Self::PER_LAYER * i
    }

    fn out_w(self) -> usize {
        Self::LAYER_BASE + Self::PER_LAYER * self.layers
    }

    fn out_b(self) -> usize {
        self.out_w() + 1
    }

    fn total(self) -> usize {
        self.out_b() + 1
    }

    fn names(self) -> Vec<String> {
        use alloc::format;
        let mut names = vec![
            String::from("input_fc.w"),
            String::from("input_fc.b"),
            String::from("pos_embed"),
            String::from("em.fc1.w"),
            String::from("em.fc1.b"),
            String::from("em.fc2.w"),
            String::from("em.fc2.b"),
        ];
        for i in 0..self.layers {
            for part in [
                "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo",
                "attn.bo", "ff.w1", "ff.b1", "ff.w2", "ff.b2",
            ] {
                names.push(format!("layers.{i}.{part}"));
            }
        }
        names.push(String::from("out_fc.w"));
        names.push(String::from("out_fc.b"));
        names
    }
}

/// Denoiser weights in the fixed [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    /// Learned per-frame positional embeddings are added after the input
    /// FC; disable to make the trunk permutation-equivariant.
    pub use_positional: bool,
    tensors: Vec<Tensor<f64>>,
}

impl DenoiserParams {
    /// Seeded initialization: 1/sqrt(fan_in) weights, zero biases, small
    /// positional table, and a damped output head so early predictions
    /// start near zero without a dead gradient.
    pub fn init(config: DenoiserConfig, use_positional: bool, seed: u64) -> Result<Self, DiffusionError> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let d = config.d_model;
        let input_dim = config.blendshapes + config.condition_width;
        let layout = Layout { layers: config.layers };
        let mut tensors = Vec::with_capacity(layout.total());
        let w = |rows: usize, cols: usize, rng: &mut SeededRng| {
            Tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        };
        tensors.push(w(input_dim, d, &mut rng));
        tensors.push(Tensor::zeros(1, d));
        tensors.push(Tensor::randn(config.window, d, 0.02, &mut rng));
        tensors.push(w(d, d, &mut rng));
        tensors.push(Tensor::zeros(1, d));
        tensors.push(w(d, d, &mut rng));
        tensors.push(Tensor::zeros(1, d));
        for _ in 0..config.layers {
            for _ in 0..4 {
                tensors.push(w(d, d, &mut rng));
                tensors.push(Tensor::zeros(1, d));
            }
            tensors.push(w(d, config.ff_width, &mut rng));
            tensors.push(Tensor::zeros(1, config.ff_width));
            tensors.push(w(config.ff_width, d, &mut rng));
            tensors.push(Tensor::zeros(1, d));
        }
        tensors.push(Tensor::randn(d, config.blendshapes, 0.1 / (d as f64).sqrt(), &mut rng));
        tensors.push(Tensor::zeros(1, config.blendshapes));
        Ok(Self { config, use_positional, tensors })
    }

    fn layout(&self) -> Layout {
        Layout { layers: self.config.layers }
    }

    pub fn tensors(&self) -> &[Tensor<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.tensors
    }

    /// Zero the output head; the forward pass then returns zero for any
    /// input, which is useful as a known-answer probe.
    pub fn zero_output_head(&mut self) {
        let layout = self.layout();
        for idx in [layout.out_w(), layout.out_b()] {
            let t = &mut self.tensors[idx];
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }

    /// Named checkpoint entries, plus a "meta" tensor carrying the
    /// config so a checkpoint is self-describing.
    pub fn to_entries(&self) -> Vec<Entry> {
        let meta = Tensor::new(
            1,
            8,
            vec![
                self.config.layers as f64,
                self.config.d_model as f64,
                self.config.heads as f64,
                self.config.ff_width as f64,
                self.config.window as f64,
                self.config.blendshapes as f64,
                self.config.condition_width as f64,
                if self.use_positional { 1.0 } else { 0.0 },
            ],
        )
        .expect("meta shape is fixed");
        let mut entries = vec![Entry::from_tensor_f64("meta", &meta)];
        for (name, tensor) in self.layout().names().into_iter().zip(&self.tensors) {
            entries.push(Entry::from_tensor_f64(name, tensor));
        }
        entries
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self, DiffusionError> {
        let meta = entries
            .iter()
            .find(|e| e.name == "meta")
            .ok_or(DiffusionError::MissingTensor { name: String::from("meta") })?
            .to_tensor::<f64>()?;
        if meta.shape() != (1, 8) {
            return Err(DiffusionError::ShapeMismatch {
                what: "meta",
                expected: (1, 8),
                got: meta.shape(),
            });
        }
        let config = DenoiserConfig {
            layers: meta.get(0, 0) as usize,
            d_model: meta.get(0, 1) as usize,
            heads: meta.get(0, 2) as usize,
            ff_width: meta.get(0, 3) as usize,
            window: meta.get(0, 4) as usize,
            blendshapes: meta.get(0, 5) as usize,
            condition_width: meta.get(0, 6) as usize,
        };
        config.validate()?;
        let use_positional = meta.get(0, 7) != 0.0;
        let reference = Self::init(config, use_positional, 0)?;
        let names = reference.layout().names();
        let mut tensors = Vec::with_capacity(names.len());
        for (name, proto) in names.iter().zip(&reference.tensors) {
            let entry = entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| DiffusionError::MissingTensor { name: name.clone() })?;
            let t = entry.to_tensor::<f64>()?;
            if t.shape() != proto.shape() {
                return Err(DiffusionError::ShapeMismatch {
                    what: "checkpoint tensor",
                    expected: proto.shape(),
                    got: t.shape(),
                });
            }
            tensors.push(t);
        }
        for e in entries {
            if e.name != "meta" && !names.iter().any(|n| n == &e.name) {
                return Err(DiffusionError::UnexpectedTensor { name: e.name.clone() });
            }
        }
        Ok(Self { config, use_positional, tensors })
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_entries()).expect("in-range shapes and names")
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, DiffusionError> {
        Self::from_entries(&checkpoint::decode(bytes)?)
    }
}

/// Sinusoidal features of the (1-based) noise step, width `dim` (even):
/// interleaved sin/cos at geometrically spaced frequencies.
pub fn sinusoidal_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * (10_000f64).ln()).exp();
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

/// On-tape parameter handles in layout order.
struct Leaves {
    vals: Vec<Value>,
}

fn build_leaves(tape: &Tape<f64>, params: &DenoiserParams) -> Leaves {
    Leaves { vals: params.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
}

fn em_on_tape(
    tape: &Tape<f64>,
    leaves: &Leaves,
    params: &DenoiserParams,
    t: usize,
) -> Result<Value, AutodiffError> {
    let feats = sinusoidal_features(t, params.config.d_model);
    let feat = tape.leaf(
        Tensor::new(1, params.config.d_model, feats).expect("feature width matches d_model"),
    );
    let h = tape.linear(feat, leaves.vals[Layout::EM_W1], leaves.vals[Layout::EM_B1])?;
    let h = tape.gelu(h);
    tape.linear(h, leaves.vals[Layout::EM_W2], leaves.vals[Layout::EM_B2])
}

fn trunk(
    tape: &Tape<f64>,
    leaves: &Leaves,
    params: &DenoiserParams,
    xt: Value,
    cond: Value,
    em: Value,
) -> Result<Value, AutodiffError> {
    let cfg = &params.config;
    let layout = params.layout();
    let tokens = tape.concat(&[xt, cond], 1)?;
    let mut h = tape.linear(tokens, leaves.vals[Layout::INPUT_W], leaves.vals[Layout::INPUT_B])?;
    if params.use_positional {
        h = tape.add(h, leaves.vals[Layout::POS])?;
    }
    h = tape.add(h, em)?;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    for l in 0..cfg.layers {
        let base = layout.layer(l);
        let a = tape.layer_norm(h);
        let q = tape.linear(a, leaves.vals[base], leaves.vals[base + 1])?;
        let k = tape.linear(a, leaves.vals[base + 2], leaves.vals[base + 3])?;
        let v = tape.linear(a, leaves.vals[base + 4], leaves.vals[base + 5])?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.slice(q, 1, head * hd, hd)?;
            let kh = tape.slice(k, 1, head * hd, hd)?;
            let vh = tape.slice(v, 1, head * hd, hd)?;
            let scores = tape.scale(tape.matmul(qh, tape.transpose(kh))?, scale);
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let ctx = tape.concat(&heads, 1)?;
        let proj = tape.linear(ctx, leaves.vals[base + 6], leaves.vals[base + 7])?;
        h = tape.add(h, proj)?;
        let f = tape.layer_norm(h);
        let f = tape.linear(f, leaves.vals[base + 8], leaves.vals[base + 9])?;
        let f = tape.gelu(f);
        let f = tape.linear(f, leaves.vals[base + 10], leaves.vals[base + 11])?;
        h = tape.add(h, f)?;
    }
    let y = tape.layer_norm(h);
    tape.linear(y, leaves.vals[layout.out_w()], leaves.vals[layout.out_b()])
}

fn check_window_shapes(
    params: &DenoiserParams,
    xt: &Tensor<f64>,
    c: &ConditionWindow,
) -> Result<(), DiffusionError> {
    let cfg = &params.config;
    if xt.shape() != (cfg.window, cfg.blendshapes) {
        return Err(DiffusionError::ShapeMismatch {
            what: "noised window",
            expected: (cfg.window, cfg.blendshapes),
            got: xt.shape(),
        });
    }
    if c.data.shape() != (cfg.window, cfg.condition_width) {
        return Err(DiffusionError::ShapeMismatch {
            what: "condition window",
            expected: (cfg.window, cfg.condition_width),
            got: c.data.shape(),
        });
    }
    Ok(())
}

/// The noise-step embedding vector (1 x d_model), deterministic given
/// the parameters.
pub fn noise_embedding(params: &DenoiserParams, t: usize) -> Tensor<f64> {
    let tape = Tape::new();
    let leaves = build_leaves(&tape, params);
    let em = em_on_tape(&tape, &leaves, params, t).expect("embedding shapes are fixed by init");
    tape.value(em)
}

/// One forward pass: predicts the clean window x0_hat from the noised
/// window, the condition, and a precomputed embedding row.
pub fn denoiser_forward(
    params: &DenoiserParams,
    xt: &Tensor<f64>,
    c: &ConditionWindow,
    em: &Tensor<f64>,
) -> Result<Tensor<f64>, DiffusionError> {
    check_window_shapes(params, xt, c)?;
    if em.shape() != (1, params.config.d_model) {
        return Err(DiffusionError::ShapeMismatch {
            what: "noise embedding",
            expected: (1, params.config.d_model),
            got: em.shape(),
        });
    }
    let tape = Tape::new();
    let leaves = build_leaves(&tape, params);
    let xt_v = tape.leaf(xt.clone());
    let c_v = tape.leaf(c.data.clone());
    let em_v = tape.leaf(em.clone());
    let out = trunk(&tape, &leaves, params, xt_v, c_v, em_v)?;
    Ok(tape.value(out))
}

/// One reverse step: predict x0_hat, then draw from the DDPM posterior.
/// At t=1 the posterior variance is zero and the mean is returned.
pub fn denoise_step(
    schedule: &DiffusionSchedule,
    params: &DenoiserParams,
    xt: &Tensor<f64>,
    c: &ConditionWindow,
    t: usize,
    rng: &mut SeededRng,
) -> Result<Tensor<f64>, DiffusionError> {
    check_window_shapes(params, xt, c)?;
    let em = noise_embedding(params, t);
    let x0_hat = denoiser_forward(params, xt, c, &em)?;
    let (c0, c1, var) = posterior_coefficients(schedule, t)?;
    let sigma = var.sqrt();
    let mut out = Tensor::zeros(xt.rows(), xt.cols());
    for i in 0..out.len() {
        let mean = c0 * x0_hat.data()[i] + c1 * xt.data()[i];
        let jitter = if t > 1 { sigma * rng.normal() } else { 0.0 };
        out.data_mut()[i] = mean + jitter;
    }
    Ok(out)
}

/// Full reverse chain from Gaussian noise; deterministic per seed.
pub fn sample(
    schedule: &DiffusionSchedule,
    params: &DenoiserParams,
    c: &ConditionWindow,
    seed: u64,
) -> Result<Tensor<f64>, DiffusionError> {
    let cfg = &params.config;
    let mut rng = SeededRng::new(seed);
    let mut x = Tensor::randn(cfg.window, cfg.blendshapes, 1.0, &mut rng);
    for t in (1..=schedule.t_noise()).rev() {
        x = denoise_step(schedule, params, &x, c, t, &mut rng)?;
    }
    Ok(x)
}

/// A (condition, clean-weights) training pair with shapes pinned to a
/// config at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingWindow {
    pub cond: ConditionWindow,
    pub target: Tensor<f64>,
}

impl TrainingWindow {
    pub fn new(
        cond: ConditionWindow,
        target: Tensor<f64>,
        config: &DenoiserConfig,
    ) -> Result<Self, DiffusionError> {
        if target.shape() != (config.window, config.blendshapes) {
            return Err(DiffusionError::ShapeMismatch {
                what: "training target",
                expected: (config.window, config.blendshapes),
                got: target.shape(),
            });
        }
        if cond.data.shape() != (config.window, config.condition_width) {
            return Err(DiffusionError::ShapeMismatch {
                what: "training condition",
                expected: (config.window, config.condition_width),
                got: cond.data.shape(),
            });
        }
        Ok(Self { cond, target })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 2e-4, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEntry {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

/// Mean L1 between the x0 prediction for (t, noise) and the clean
/// target. The training step minimizes exactly this quantity.
pub fn diffusion_loss(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    window: &TrainingWindow,
    t: usize,
    noise: &Tensor<f64>,
) -> Result<f64, DiffusionError> {
    let xt = forward_diffuse(schedule, &window.target, t, noise)?;
    let em = noise_embedding(params, t);
    let pred = denoiser_forward(params, &xt, &window.cond, &em)?;
    let n = pred.len() as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(window.target.data())
        .map(|(&p, &w)| (p - w).abs())
        .sum();
    Ok(total / n)
}

/// [`diffusion_loss`] and its gradient with respect to every parameter
/// tensor, in [`DenoiserParams::tensors`] order. One tape evaluation,
/// usable for gradient checks or custom optimizers.
pub fn loss_gradients(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    window: &TrainingWindow,
    t: usize,
    noise: &Tensor<f64>,
) -> Result<(f64, Vec<Tensor<f64>>), DiffusionError> {
    TrainingWindow::new(window.cond.clone(), window.target.clone(), &params.config)?;
    let xt = forward_diffuse(schedule, &window.target, t, noise)?;
    let tape = Tape::new();
    let leaves = build_leaves(&tape, params);
    let em = em_on_tape(&tape, &leaves, params, t)?;
    let pred = trunk(&tape, &leaves, params, tape.leaf(xt), tape.leaf(window.cond.data.clone()), em)?;
    let loss = tape.l1_loss(pred, tape.leaf(window.target.clone()))?;
    let grads = tape.backward(loss)?;
    let grad_tensors = collect_gradients(grads, &leaves);
    Ok((tape.value(loss).item(), grad_tensors))
}

/// Minibatch Adam training of the x0-prediction objective. Records the
/// mean step loss per epoch and, when an eval set is given, a held-out
/// diffusion loss computed with an identically re-seeded noise draw each
/// epoch so the trace is comparable across epochs.
pub fn train(
    params: &mut DenoiserParams,
    schedule: &DiffusionSchedule,
    train_set: &[TrainingWindow],
    eval_set: &[TrainingWindow],
    opts: &TrainOptions,
) -> Result<Vec<LossEntry>, DiffusionError> {
    if train_set.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let cfg = params.config;
    for w in train_set.iter().chain(eval_set) {
        TrainingWindow::new(w.cond.clone(), w.target.clone(), &cfg)?;
    }
    let mut rng = SeededRng::new(opts.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(opts.lr));
    let mut trace = Vec::with_capacity(opts.epochs);
    let t_noise = schedule.t_noise();
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let tape = Tape::new();
            let leaves = build_leaves(&tape, params);
            let mut batch_loss: Option<Value> = None;
            for &idx in batch {
                let w = &train_set[idx];
                let t = 1 + rng.below(t_noise);
                let noise = Tensor::randn(cfg.window, cfg.blendshapes, 1.0, &mut rng);
                let xt = forward_diffuse(schedule, &w.target, t, &noise)?;
                let em = em_on_tape(&tape, &leaves, params, t)?;
                let pred = trunk(&tape, &leaves, params, tape.leaf(xt), tape.leaf(w.cond.data.clone()), em)?;
                let loss = tape.l1_loss(pred, tape.leaf(w.target.clone()))?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("batches are non-empty");
            let loss = tape.scale(total, 1.0 / batch.len() as f64);
            let grads = tape.backward(loss)?;
            let grad_tensors = collect_gradients(grads, &leaves);
            adam.adam_step(&mut params.tensors, &grad_tensors)?;
            epoch_loss += tape.value(loss).item();
            steps += 1;
        }
        let train_loss = epoch_loss / steps as f64;
        let eval_loss = if eval_set.is_empty() {
            None
        } else {
            // Same seed every epoch: the eval noise is a fixed probe.
            let mut eval_rng = SeededRng::new(opts.seed ^ 0x9E37_79B9_7F4A_7C15);
            let mut total = 0.0;
            for w in eval_set {
                let t = 1 + eval_rng.below(t_noise);
                let noise = Tensor::randn(cfg.window, cfg.blendshapes, 1.0, &mut eval_rng);
                total += diffusion_loss(params, schedule, w, t, &noise)?;
            }
            Some(total / eval_set.len() as f64)
        };
        trace.push(LossEntry { epoch, train_loss, eval_loss });
    }
    Ok(trace)
}

fn collect_gradients(mut grads: Gradients<f64>, leaves: &Leaves) -> Vec<Tensor<f64>> {
    leaves
        .vals
        .iter()
        .map(|&v| grads.take(v).expect("leaves always carry gradients"))
        .collect()
}

/// Start offsets for sliding windows of length `window` with the given
/// overlap: every `window - overlap` frames, plus a right-aligned tail
/// window when the stride pattern stops short of the end.
pub fn window_starts(n: usize, window: usize, overlap: usize) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let stride = window.saturating_sub(overlap).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + window <= n {
        starts.push(s);
        s += stride;
    }
    let last = *starts.last().expect("loop pushes at least start 0");
    if last + window < n {
        starts.push(n - window);
    }
    starts
}

/// Sample every window of a long condition matrix and crossfade the
/// overlaps: within each overlap of length L, the incoming window's
/// weight ramps linearly as (j+1)/(L+1). Sequences shorter than one
/// window are padded by repeating the final frame and cropped after
/// sampling. The per-window sampling seed is `seed + window index`.
pub fn windowed_inference(
    params: &DenoiserParams,
    schedule: &DiffusionSchedule,
    c_full: &Tensor<f64>,
    overlap: usize,
    seed: u64,
) -> Result<Tensor<f64>, DiffusionError> {
    let cfg = &params.config;
    let n = c_full.rows();
    if c_full.cols() != cfg.condition_width {
        return Err(DiffusionError::ShapeMismatch {
            what: "condition matrix",
            expected: (n, cfg.condition_width),
            got: c_full.shape(),
        });
    }
    let t_len = cfg.window;
    if n < t_len {
        let mut padded = Tensor::zeros(t_len, cfg.condition_width);
        for r in 0..t_len {
            let src = r.min(n - 1);
            for c in 0..cfg.condition_width {
                padded.set(r, c, c_full.get(src, c));
            }
        }
        let out = sample(schedule, params, &ConditionWindow::new(padded)?, seed)?;
        let mut cropped = Tensor::zeros(n, cfg.blendshapes);
        for r in 0..n {
            for c in 0..cfg.blendshapes {
                cropped.set(r, c, out.get(r, c));
            }
        }
        return Ok(cropped);
    }

    let starts = window_starts(n, t_len, overlap);
    let mut out = Tensor::zeros(n, cfg.blendshapes);
    let mut covered = 0usize;
    for (k, &s) in starts.iter().enumerate() {
        let cw = ConditionWindow::from_rows(c_full, s, t_len)?;
        let vals = sample(schedule, params, &cw, seed.wrapping_add(k as u64))?;
        let blend_len = covered.saturating_sub(s);
        for j in 0..t_len {
            let g = s + j;
            if j < blend_len {
                let f = (j + 1) as f64 / (blend_len + 1) as f64;
                for c in 0..cfg.blendshapes {
                    out.set(g, c, (1.0 - f) * out.get(g, c) + f * vals.get(j, c));
                }
            } else {
                for c in 0..cfg.blendshapes {
                    out.set(g, c, vals.get(j, c));
                }
            }
        }
        covered = s + t_len;
    }
    Ok(out)
}

impl ConditionWindow {
    fn from_rows(full: &Tensor<f64>, start: usize, len: usize) -> Result<Self, DiffusionError> {
        let mut data = Tensor::zeros(len, full.cols());
        for r in 0..len {
            for c in 0..full.cols() {
                data.set(r, c, full.get(start + r, c));
            }
        }
        Self::new(data)
    }
}
