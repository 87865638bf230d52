//! The seven window regressors and the per-frame encoder.
//!
//! Every model maps a batch of windows to `B × 6` unconstrained scores.
//! Inputs are batch-major: row `b·ω + t` is step `t` of window `b`.

use osats_autodiff::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{VisionSeries, WindowSample};
use crate::ingest::OSATS_DIMS;
use crate::matrix::Matrix;

const LN_EPS: f64 = 1e-5;
const HEAD_BIAS: f64 = 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("{variant} needs {modality} input")]
    ModalityMissing {
        variant: Variant,
        modality: &'static str,
    },
    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Variant {
    #[default]
    #[serde(rename = "LSTM-K")]
    LstmK,
    #[serde(rename = "CNN-LSTM-V")]
    CnnLstmV,
    #[serde(rename = "CNN-V")]
    CnnV,
    #[serde(rename = "DualLSTM-F")]
    DualLstmF,
    #[serde(rename = "Transformer-V")]
    TransformerV,
    #[serde(rename = "Transformer-K")]
    TransformerK,
    #[serde(rename = "DualTransformer-F")]
    DualTransformerF,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Self::LstmK,
        Self::CnnLstmV,
        Self::CnnV,
        Self::DualLstmF,
        Self::TransformerV,
        Self::TransformerK,
        Self::DualTransformerF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::LstmK => "LSTM-K",
            Self::CnnLstmV => "CNN-LSTM-V",
            Self::CnnV => "CNN-V",
            Self::DualLstmF => "DualLSTM-F",
            Self::TransformerV => "Transformer-V",
            Self::TransformerK => "Transformer-K",
            Self::DualTransformerF => "DualTransformer-F",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_kinematics(self) -> bool {
        matches!(
            self,
            Self::LstmK | Self::DualLstmF | Self::TransformerK | Self::DualTransformerF
        )
    }

    pub fn uses_vision(self) -> bool {
        !matches!(self, Self::LstmK | Self::TransformerK)
    }

    /// Carries the pooled embedding of the previous window within a trial.
    pub fn has_memory(self) -> bool {
        matches!(self, Self::TransformerK | Self::TransformerV)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Two strided 3×3 convolutions, global mean pool, affine projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub conv1: usize,
    pub conv2: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            conv1: 8,
            conv2: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Frame embedding width `D`.
    pub embed_dim: usize,
    pub omega: usize,
    pub channels: usize,
    pub encoder: EncoderConfig,
    /// A frozen encoder lets frame embeddings be computed once per trial.
    pub freeze_encoder: bool,
    pub use_kinematics: bool,
    pub use_vision: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LstmK,
            hidden: 64,
            layers: 2,
            heads: 4,
            embed_dim: 32,
            omega: crate::features::DEFAULT_WINDOW,
            channels: crate::features::DEFAULT_CHANNELS,
            encoder: EncoderConfig::default(),
            freeze_encoder: true,
            use_kinematics: true,
            use_vision: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        let v = self.variant;
        if v.uses_kinematics() && !self.use_kinematics {
            return bad(&format!("{v} requires kinematics"));
        }
        if v.uses_vision() && !self.use_vision {
            return bad(&format!("{v} requires vision"));
        }
        if self.hidden == 0 || self.layers == 0 || self.omega == 0 || self.embed_dim == 0 {
            return bad("sizes must be positive");
        }
        if v.uses_kinematics() && self.channels == 0 {
            return bad("channels must be positive");
        }
        if matches!(
            v,
            Variant::TransformerK | Variant::TransformerV | Variant::DualTransformerF
        ) && (self.heads == 0 || !self.hidden.is_multiple_of(self.heads))
        {
            return bad("hidden must be divisible by heads");
        }
        let e = self.encoder;
        if v.uses_vision() && (e.in_channels == 0 || e.conv1 == 0 || e.conv2 == 0) {
            return bad("encoder sizes must be positive");
        }
        Ok(())
    }
}

/// Frames or precomputed embeddings for one window, row-major.
#[derive(Clone, Copy, Debug)]
pub enum VisionView<'a> {
    Embeddings(&'a [f64]),
    /// Normalized `C × H × W` frames.
    Frames {
        data: &'a [f64],
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WindowView<'a> {
    /// `ω × C` normalized channels.
    pub kin: Option<&'a [f64]>,
    pub vis: Option<VisionView<'a>>,
}

impl<'a> WindowView<'a> {
    pub fn from_sample(w: &'a WindowSample) -> Self {
        let vis = w.vision().map(|series| {
            let data = w.x_vis().expect("vision slice");
            match series {
                VisionSeries::Embeddings(_) => VisionView::Embeddings(data),
                VisionSeries::Frames {
                    channels,
                    height,
                    width,
                    ..
                } => VisionView::Frames {
                    data,
                    channels: *channels,
                    height: *height,
                    width: *width,
                },
            }
        });
        Self {
            kin: Some(w.x_kin()),
            vis,
        }
    }
}

/// Output of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `B × 6` scores.
    pub pred: Var,
    /// `B × hidden` pooled tokens; the next window's memory.
    pub pooled: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub scores: [f64; OSATS_DIMS],
    pub memory: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn glorot(&mut self, name: String, shape: &[usize], fan_in: usize, fan_out: usize) {
        self.store
            .insert_glorot(name, shape, fan_in, fan_out, &mut self.rng);
    }

    fn linear(&mut self, prefix: &str, input: usize, output: usize, bias: bool) {
        self.glorot(format!("{prefix}.w"), &[input, output], input, output);
        if bias {
            self.store
                .insert_filled(format!("{prefix}.b"), &[output], 0.0);
        }
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize, layers: usize) {
        for l in 0..layers {
            let inp = if l == 0 { input } else { hidden };
            self.glorot(
                format!("{prefix}.l{l}.w_ih"),
                &[inp, 4 * hidden],
                inp,
                hidden,
            );
            self.glorot(
                format!("{prefix}.l{l}.w_hh"),
                &[hidden, 4 * hidden],
                hidden,
                hidden,
            );
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].fill(1.0);
            self.store.insert(
                format!("{prefix}.l{l}.b"),
                Tensor::new(vec![4 * hidden], b).unwrap(),
            );
        }
    }

    fn attention(&mut self, prefix: &str, d: usize, value_bias: bool) {
        self.linear(&format!("{prefix}.q"), d, d, true);
        self.linear(&format!("{prefix}.k"), d, d, true);
        self.linear(&format!("{prefix}.v"), d, d, value_bias);
        self.linear(&format!("{prefix}.o"), d, d, value_bias);
    }

    fn encoder_block(&mut self, prefix: &str, d: usize) {
        self.attention(&format!("{prefix}.attn"), d, true);
        self.linear(&format!("{prefix}.ff1"), d, 2 * d, true);
        self.linear(&format!("{prefix}.ff2"), 2 * d, d, true);
    }

    fn head(&mut self, prefix: &str, input: usize) {
        self.linear(prefix, input, OSATS_DIMS, false);
        self.store
            .insert_filled(format!("{prefix}.b"), &[OSATS_DIMS], HEAD_BIAS);
    }

    fn frame_encoder(&mut self, cfg: &ModelConfig) {
        let e = cfg.encoder;
        let c = e.in_channels;
        self.glorot(
            "encoder.conv1.w".into(),
            &[e.conv1, c, 3, 3],
            9 * c,
            9 * e.conv1,
        );
        self.store.insert_filled("encoder.conv1.b", &[e.conv1], 0.0);
        self.glorot(
            "encoder.conv2.w".into(),
            &[e.conv2, e.conv1, 3, 3],
            9 * e.conv1,
            9 * e.conv2,
        );
        self.store.insert_filled("encoder.conv2.b", &[e.conv2], 0.0);
        self.linear("encoder.proj", e.conv2, cfg.embed_dim, true);
    }

    fn transformer(&mut self, prefix: &str, input: usize, cfg: &ModelConfig) {
        self.linear(&format!("{prefix}.in"), input, cfg.hidden, true);
        for l in 0..cfg.layers {
            self.encoder_block(&format!("{prefix}.block{l}"), cfg.hidden);
        }
    }
}

/// Sinusoidal position code, `ω × d`.
pub fn position_encoding(omega: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; omega * d];
    for t in 0..omega {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * freq;
            pe[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let (h, d, c) = (config.hidden, config.embed_dim, config.channels);
        let v = config.variant;
        if v.uses_vision() {
            b.frame_encoder(&config);
        }
        match v {
            Variant::LstmK => {
                b.lstm("kin", c, h, config.layers);
                b.head("head", h);
            }
            Variant::CnnLstmV => {
                b.lstm("vis", d, h, config.layers);
                b.head("head", h);
            }
            Variant::CnnV => {
                b.linear("head.hidden", d, h, true);
                b.head("head", h);
            }
            Variant::DualLstmF => {
                b.lstm("kin", c, h, config.layers);
                b.lstm("vis", d, h, config.layers);
                b.head("head", 2 * h);
            }
            Variant::TransformerK | Variant::TransformerV => {
                let input = if v == Variant::TransformerK { c } else { d };
                b.transformer("tf", input, &config);
                b.attention("tf.cross", h, false);
                b.head("head", h);
            }
            Variant::DualTransformerF => {
                b.transformer("kin", c, &config);
                b.transformer("vis", d, &config);
                b.attention("cross_kv", h, true);
                b.attention("cross_vk", h, true);
                b.head("head", 2 * h);
            }
        }
        if v.uses_vision() && config.freeze_encoder {
            params.set_trainable("encoder.", false);
        }
        Ok(Self { config, params })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        let id: ParamId = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        tape.param(&self.params, id)
    }

    fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Var {
        let w = self.p(tape, &format!("{prefix}.w"));
        match self.params.id(&format!("{prefix}.b")) {
            Some(id) => {
                let b = tape.param(&self.params, id);
                tape.affine(x, w, b)
            }
            None => tape.matmul(x, w),
        }
    }

    /// One frame `C × H × W` to a `1 × D` embedding.
    fn encode_frame(&self, tape: &mut Tape, frame: Var) -> Var {
        let w1 = self.p(tape, "encoder.conv1.w");
        let b1 = self.p(tape, "encoder.conv1.b");
        let w2 = self.p(tape, "encoder.conv2.w");
        let b2 = self.p(tape, "encoder.conv2.b");
        let x = tape.conv2d(frame, w1, b1, 2, 1);
        let x = tape.relu(x);
        let x = tape.conv2d(x, w2, b2, 2, 1);
        let x = tape.relu(x);
        let s = tape.shape(x).to_vec();
        let x = tape.reshape(x, &[s[0], s[1] * s[2]]);
        let x = tape.mean_axis(x, 1);
        let x = tape.reshape(x, &[1, s[0]]);
        self.linear(tape, "encoder.proj", x)
    }

    /// Embeds every frame of a series; used to precompute inputs when the
    /// encoder is frozen.
    pub fn embed_series(&self, series: &VisionSeries) -> Result<VisionSeries, ModelError> {
        match series {
            VisionSeries::Embeddings(_) => Ok(series.clone()),
            VisionSeries::Frames {
                channels,
                height,
                width,
                ..
            } => {
                let d = self.config.embed_dim;
                let mut out = Matrix::zeros(series.rows(), d);
                for r in 0..series.rows() {
                    let e =
                        self.embed_frame(series.rows_slice(r, 1), *channels, *height, *width)?;
                    out.row_mut(r).copy_from_slice(&e);
                }
                Ok(VisionSeries::Embeddings(out))
            }
        }
    }

    pub fn embed_frame(
        &self,
        frame: &[f64],
        channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Vec<f64>, ModelError> {
        self.check_frame(channels, frame.len(), height * width * channels)?;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![channels, height, width], frame.to_vec())?);
        let e = self.encode_frame(&mut tape, x);
        if let Some(op) = tape.poisoned() {
            return Err(AutodiffError::NaNDetected(op).into());
        }
        Ok(tape.value(e).to_vec())
    }

    fn check_frame(
        &self,
        channels: usize,
        found: usize,
        expected: usize,
    ) -> Result<(), ModelError> {
        if channels != self.config.encoder.in_channels {
            return Err(ModelError::ShapeMismatch {
                what: "frame channels",
                expected: self.config.encoder.in_channels,
                found: channels,
            });
        }
        if found != expected || expected == 0 {
            return Err(ModelError::ShapeMismatch {
                what: "frame size",
                expected,
                found,
            });
        }
        Ok(())
    }

    /// Stacks windows into tape inputs and runs the network.
    pub fn forward(
        &self,
        tape: &mut Tape,
        windows: &[WindowView],
        memory: Option<&[f64]>,
    ) -> Result<Forward, ModelError> {
        let cfg = &self.config;
        let (b, omega) = (windows.len(), cfg.omega);
        if b == 0 {
            return Err(ModelError::BadConfig("empty batch".into()));
        }
        let v = cfg.variant;
        let kin = if v.uses_kinematics() {
            let mut data = Vec::with_capacity(b * omega * cfg.channels);
            for w in windows {
                let x = w.kin.ok_or(ModelError::ModalityMissing {
                    variant: v,
                    modality: "kinematic",
                })?;
                if x.len() != omega * cfg.channels {
                    return Err(ModelError::ShapeMismatch {
                        what: "kinematic window",
                        expected: omega * cfg.channels,
                        found: x.len(),
                    });
                }
                data.extend_from_slice(x);
            }
            Some(tape.constant(Tensor::new(vec![b * omega, cfg.channels], data)?))
        } else {
            None
        };
        let vis = if v.uses_vision() {
            Some(self.vision_input(tape, windows)?)
        } else {
            None
        };
        let memory = match (v.has_memory(), memory) {
            (true, Some(m)) => {
                if m.len() != b * cfg.hidden {
                    return Err(ModelError::ShapeMismatch {
                        what: "memory",
                        expected: b * cfg.hidden,
                        found: m.len(),
                    });
                }
                Some(tape.constant(Tensor::new(vec![b, cfg.hidden], m.to_vec())?))
            }
            _ => None,
        };
        Ok(self.forward_vars(tape, b, kin, vis, memory))
    }

    fn vision_input(&self, tape: &mut Tape, windows: &[WindowView]) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let (omega, d) = (cfg.omega, cfg.embed_dim);
        let missing = ModelError::ModalityMissing {
            variant: cfg.variant,
            modality: "vision",
        };
        let mut embedded: Vec<f64> = Vec::new();
        let mut frames: Vec<Var> = Vec::new();
        for w in windows {
            match w.vis.ok_or(missing.clone())? {
                VisionView::Embeddings(e) => {
                    if e.len() != omega * d {
                        return Err(ModelError::ShapeMismatch {
                            what: "embedding window",
                            expected: omega * d,
                            found: e.len(),
                        });
                    }
                    embedded.extend_from_slice(e);
                }
                VisionView::Frames {
                    data,
                    channels,
                    height,
                    width,
                } => {
                    let n = channels * height * width;
                    self.check_frame(channels, data.len(), omega * n)?;
                    for f in data.chunks(n) {
                        let x =
                            tape.constant(Tensor::new(vec![channels, height, width], f.to_vec())?);
                        frames.push(self.encode_frame(tape, x));
                    }
                }
            }
        }
        match (embedded.is_empty(), frames.is_empty()) {
            (false, true) => {
                Ok(tape.constant(Tensor::new(vec![windows.len() * omega, d], embedded)?))
            }
            (true, false) => Ok(tape.concat(&frames, 0)),
            _ => Err(ModelError::BadConfig(
                "batch mixes frames and embeddings".into(),
            )),
        }
    }

    /// Network body over prepared inputs: `kin[B·ω × C]`, `vis[B·ω × D]`,
    /// `memory[B × hidden]`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape,
        batch: usize,
        kin: Option<Var>,
        vis: Option<Var>,
        memory: Option<Var>,
    ) -> Forward {
        let cfg = &self.config;
        let omega = cfg.omega;
        let need = |x: Option<Var>| x.expect("modality checked by caller");
        match cfg.variant {
            Variant::LstmK => {
                let h = self.lstm(tape, "kin", need(kin), batch);
                Forward {
                    pred: self.linear(tape, "head", h),
                    pooled: None,
                }
            }
            Variant::CnnLstmV => {
                let h = self.lstm(tape, "vis", need(vis), batch);
                Forward {
                    pred: self.linear(tape, "head", h),
                    pooled: None,
                }
            }
            Variant::CnnV => {
                let x = tape.reshape(need(vis), &[batch, omega, cfg.embed_dim]);
                let x = tape.mean_axis(x, 1);
                let x = self.linear(tape, "head.hidden", x);
                let x = tape.relu(x);
                Forward {
                    pred: self.linear(tape, "head", x),
                    pooled: None,
                }
            }
            Variant::DualLstmF => {
                let hk = self.lstm(tape, "kin", need(kin), batch);
                let hv = self.lstm(tape, "vis", need(vis), batch);
                let h = tape.concat(&[hk, hv], 1);
                Forward {
                    pred: self.linear(tape, "head", h),
                    pooled: None,
                }
            }
            Variant::TransformerK | Variant::TransformerV => {
                let input = if cfg.variant == Variant::TransformerK {
                    kin
                } else {
                    vis
                };
                let mut x = self.transformer(tape, "tf", need(input), batch);
                if let Some(mem) = memory {
                    let q = tape.layer_norm(x, LN_EPS);
                    let a = self.mha(tape, "tf.cross", q, mem, batch, omega, 1);
                    x = tape.add(x, a);
                }
                let pooled = self.pool(tape, x, batch);
                Forward {
                    pred: self.linear(tape, "head", pooled),
                    pooled: Some(pooled),
                }
            }
            Variant::DualTransformerF => {
                let k = self.transformer(tape, "kin", need(kin), batch);
                let v = self.transformer(tape, "vis", need(vis), batch);
                let kn = tape.layer_norm(k, LN_EPS);
                let vn = tape.layer_norm(v, LN_EPS);
                let kv = self.mha(tape, "cross_kv", kn, vn, batch, omega, omega);
                let vk = self.mha(tape, "cross_vk", vn, kn, batch, omega, omega);
                let k = tape.add(k, kv);
                let v = tape.add(v, vk);
                let pk = self.pool(tape, k, batch);
                let pv = self.pool(tape, v, batch);
                let h = tape.concat(&[pk, pv], 1);
                Forward {
                    pred: self.linear(tape, "head", h),
                    pooled: None,
                }
            }
        }
    }

    /// Final hidden state of a stacked LSTM over batch-major input.
    fn lstm(&self, tape: &mut Tape, prefix: &str, x: Var, batch: usize) -> Var {
        let (omega, hidden) = (self.config.omega, self.config.hidden);
        let x = if batch > 1 {
            let order: Vec<usize> = (0..omega)
                .flat_map(|t| (0..batch).map(move |b| b * omega + t))
                .collect();
            tape.gather_rows(x, &order)
        } else {
            x
        };
        let mut steps: Vec<Var> = (0..omega)
            .map(|t| tape.narrow(x, 0, t * batch, batch))
            .collect();
        for l in 0..self.config.layers {
            let w_ih = self.p(tape, &format!("{prefix}.l{l}.w_ih"));
            let w_hh = self.p(tape, &format!("{prefix}.l{l}.w_hh"));
            let b = self.p(tape, &format!("{prefix}.l{l}.b"));
            let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
            let mut c = tape.constant(Tensor::zeros(&[batch, hidden]));
            for step in steps.iter_mut() {
                let hc = tape.lstm_cell(*step, h, c, w_ih, w_hh, b);
                (h, c) = tape.lstm_split(hc);
                *step = h;
            }
        }
        *steps.last().expect("omega > 0")
    }

    fn transformer(&self, tape: &mut Tape, prefix: &str, x: Var, batch: usize) -> Var {
        let (omega, d) = (self.config.omega, self.config.hidden);
        let mut x = self.linear(tape, &format!("{prefix}.in"), x);
        let pe = position_encoding(omega, d);
        let tiled: Vec<f64> = (0..batch).flat_map(|_| pe.iter().copied()).collect();
        let pe = tape.constant(Tensor::new(vec![batch * omega, d], tiled).unwrap());
        x = tape.add(x, pe);
        for l in 0..self.config.layers {
            let p = format!("{prefix}.block{l}");
            let a = tape.layer_norm(x, LN_EPS);
            let a = self.mha(tape, &format!("{p}.attn"), a, a, batch, omega, omega);
            x = tape.add(x, a);
            let f = tape.layer_norm(x, LN_EPS);
            let f = self.linear(tape, &format!("{p}.ff1"), f);
            let f = tape.relu(f);
            let f = self.linear(tape, &format!("{p}.ff2"), f);
            x = tape.add(x, f);
        }
        x
    }

    /// Multi-head attention per window: queries `[B·n × d]`, keys and values
    /// from `kv[B·m × d]`.
    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        tape: &mut Tape,
        prefix: &str,
        q_in: Var,
        kv: Var,
        batch: usize,
        n: usize,
        m: usize,
    ) -> Var {
        let q = self.linear(tape, &format!("{prefix}.q"), q_in);
        let k = self.linear(tape, &format!("{prefix}.k"), kv);
        let v = self.linear(tape, &format!("{prefix}.v"), kv);
        let heads = self.config.heads;
        let att = if batch == 1 {
            tape.attention(q, k, v, heads)
        } else {
            let parts: Vec<Var> = (0..batch)
                .map(|b| {
                    let qb = tape.narrow(q, 0, b * n, n);
                    let kb = tape.narrow(k, 0, b * m, m);
                    let vb = tape.narrow(v, 0, b * m, m);
                    tape.attention(qb, kb, vb, heads)
                })
                .collect();
            tape.concat(&parts, 0)
        };
        self.linear(tape, &format!("{prefix}.o"), att)
    }

    fn pool(&self, tape: &mut Tape, x: Var, batch: usize) -> Var {
        let d = tape.shape(x)[1];
        let x = tape.reshape(x, &[batch, self.config.omega, d]);
        tape.mean_axis(x, 1)
    }

    /// Single-window inference. `memory` is the previous window's pooled
    /// embedding, or `None` at the start of a trial.
    pub fn predict(
        &self,
        window: &WindowView,
        memory: Option<&[f64]>,
    ) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new();
        let zeros;
        let memory = match (self.variant().has_memory(), memory) {
            (true, None) => {
                zeros = vec![0.0; self.config.hidden];
                Some(zeros.as_slice())
            }
            (_, m) => m,
        };
        let out = self.forward(&mut tape, std::slice::from_ref(window), memory)?;
        if let Some(op) = tape.poisoned() {
            return Err(AutodiffError::NaNDetected(op).into());
        }
        let mut scores = [0.0; OSATS_DIMS];
        scores.copy_from_slice(tape.value(out.pred));
        Ok(Prediction {
            scores,
            memory: out.pooled.map(|p| tape.value(p).to_vec()),
        })
    }
}
