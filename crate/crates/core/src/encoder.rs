//! Shared layered speech encoder and per-task layer fusion (weighted sum and
//! residual weighted-sum encoding).

use serde::{Deserialize, Serialize};
use ume_tensor::{Init, ParamId, Tensor, Var};

use crate::error::{invalid, Result, UmeError};
use crate::nn::{
    conv_attrs, conv_out_len, positional_encoding, Builder, Conv1d, Ctx, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};

/// Shortest waveform the frontend accepts.
pub const MIN_INPUT_SAMPLES: usize = 8;
const FRONT1_KERNEL: usize = 16;
const FRONT2_KERNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ff_dim: usize,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 32,
            heads: 2,
            conv_kernel: 3,
            ff_dim: 64,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.layers == 0 {
            return Err(UmeError::config(p("layers"), "must be at least 1"));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(UmeError::config(
                p("heads"),
                format!(
                    "d_model {} must be a positive multiple of heads {}",
                    self.d_model, self.heads
                ),
            ));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(UmeError::config(
                p("conv_kernel"),
                "must be odd for same-length padding",
            ));
        }
        if self.ff_dim == 0 {
            return Err(UmeError::config(p("ff_dim"), "must be positive"));
        }
        Ok(())
    }

    /// Encoder frames for a waveform of `t` samples: `⌊⌊t/2⌋/2⌋`.
    pub fn frames(&self, t: usize) -> usize {
        let a = conv_out_len(t, FRONT1_KERNEL, conv_attrs(2, 7, 1, 1));
        conv_out_len(a, FRONT2_KERNEL, conv_attrs(2, 1, 1, 1))
    }
}

/// Two parallel branches (depthwise convolution, self-attention) over one
/// pre-norm input, summed into the residual, then a feed-forward residual.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub dwconv: Conv1d,
    pub conv_proj: Linear,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    fn new(b: &mut Builder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
            dwconv: Conv1d::new(
                b,
                &format!("{name}.conv"),
                d,
                d,
                cfg.conv_kernel,
                conv_attrs(1, cfg.conv_kernel / 2, 1, d),
                true,
            )?,
            conv_proj: Linear::new(b, &format!("{name}.conv_proj"), d, d, true)?,
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), d, cfg.heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
            ff: FeedForward::new(b, &format!("{name}.ff"), d, cfg.ff_dim)?,
        })
    }

    pub fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let g = cx.g;
        let n = self.ln1.forward(cx, x)?;
        let conv = self.conv_proj.forward(cx, self.dwconv.forward_time_major(cx, n)?)?;
        let attn = self.attn.forward(cx, n, n, false)?;
        let x = g.add(g.add(x, conv)?, attn)?;
        let n = self.ln2.forward(cx, x)?;
        Ok(g.add(x, self.ff.forward(cx, n)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub cfg: EncoderConfig,
    pub front1: Conv1d,
    pub front2: Conv1d,
    pub blocks: Vec<EncoderBlock>,
}

impl SpeechEncoder {
    pub fn new(b: &mut Builder, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        let front1 = Conv1d::new(
            b,
            "encoder.frontend.conv1",
            1,
            d,
            FRONT1_KERNEL,
            conv_attrs(2, 7, 1, 1),
            true,
        )?;
        let front2 = Conv1d::new(
            b,
            "encoder.frontend.conv2",
            d,
            d,
            FRONT2_KERNEL,
            conv_attrs(2, 1, 1, 1),
            true,
        )?;
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::new(b, &format!("encoder.layer{}", l + 1), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            front1,
            front2,
            blocks,
        })
    }

    /// Waveform `[T]` → hidden states `H_(1..L)`, each `[T_enc, D]`.
    pub fn encode_layers(&self, cx: Ctx, x: Var) -> Result<Vec<Var>> {
        let g = cx.g;
        let shape = g.shape(x);
        if shape.len() != 1 {
            return Err(invalid(format!(
                "encoder input must be a 1-D waveform, got shape {shape:?}"
            )));
        }
        let t = shape[0];
        let t_enc = self.cfg.frames(t);
        if t < MIN_INPUT_SAMPLES || t_enc == 0 {
            return Err(invalid(format!(
                "input of {t} samples is too short: the frontend needs at least {MIN_INPUT_SAMPLES}"
            )));
        }
        let x = g.reshape(x, &[1, t])?;
        let h = g.relu(self.front1.forward(cx, x)?)?;
        let h = g.relu(self.front2.forward(cx, h)?)?;
        let mut h = g.transpose(h)?;
        if self.cfg.positional_encoding {
            h = g.add(h, g.constant(positional_encoding(t_enc, self.cfg.d_model)))?;
        }
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(cx, h)?;
            layers.push(h);
        }
        Ok(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Diar,
    Sep,
    Asr,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Diar, Task::Sep, Task::Asr];

    pub fn name(self) -> &'static str {
        match self {
            Task::Diar => "diar",
            Task::Sep => "sep",
            Task::Asr => "asr",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// How a task head reads the encoder: last layer only, softmax-weighted sum
/// of all layers, or that sum plus a residual copy of the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    None,
    WeightedSum,
    #[default]
    Rwse,
}

/// Per-task layer logits (absent in `None` mode).
#[derive(Debug, Clone)]
pub struct Fusion {
    pub mode: FusionMode,
    pub logits: Option<[ParamId; 3]>,
}

impl Fusion {
    pub fn new(b: &mut Builder, mode: FusionMode, layers: usize) -> Result<Self> {
        let tag = match mode {
            FusionMode::None => return Ok(Self { mode, logits: None }),
            FusionMode::WeightedSum => "ws",
            FusionMode::Rwse => "rwse",
        };
        let mut ids = Vec::with_capacity(3);
        for task in Task::ALL {
            ids.push(b.add(
                &format!("fusion.{tag}.{}.layer_logits", task.name()),
                &[layers],
                Init::Zeros,
            )?);
        }
        Ok(Self {
            mode,
            logits: Some([ids[0], ids[1], ids[2]]),
        })
    }

    pub fn logits_param(&self, task: Task) -> Option<ParamId> {
        self.logits.map(|l| l[task.index()])
    }

    /// `H^enc` for one task.
    pub fn fuse(&self, cx: Ctx, layers: &[Var], task: Task) -> Result<Var> {
        let last = *layers.last().ok_or_else(|| invalid("no encoder layers"))?;
        match (self.mode, self.logits_param(task)) {
            (FusionMode::None, _) | (_, None) => Ok(last),
            (FusionMode::WeightedSum, Some(id)) => weighted_sum(cx, layers, cx.p(id)),
            (FusionMode::Rwse, Some(id)) => {
                let ws = weighted_sum(cx, layers, cx.p(id))?;
                rwse(cx, ws, last)
            }
        }
    }
}

/// `H^ws = Σ_l softmax(logits)_l · H_(l)`.
pub fn weighted_sum(cx: Ctx, layers: &[Var], logits: Var) -> Result<Var> {
    let g = cx.g;
    let n = g.shape(logits);
    if n != [layers.len()] {
        return Err(invalid(format!(
            "{} layer logits for {} layers",
            n.iter().product::<usize>(),
            layers.len()
        )));
    }
    let w = g.softmax(logits, 0)?;
    let mut acc: Option<Var> = None;
    for (l, &h) in layers.iter().enumerate() {
        let wl = g.reshape(g.slice(w, 0, l, l + 1)?, &[])?;
        let term = g.mul(wl, h)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    acc.ok_or_else(|| invalid("no encoder layers"))
}

/// `H^enc = H^ws + H_(L)`.
pub fn rwse(cx: Ctx, ws: Var, last: Var) -> Result<Var> {
    let (a, b) = (cx.g.shape(ws), cx.g.shape(last));
    if a != b {
        return Err(invalid(format!("rwse: weighted sum {a:?} and last layer {b:?} differ")));
    }
    Ok(cx.g.add(ws, last)?)
}

/// Softmax of a logit vector in plain arithmetic.
pub fn softmax_weights(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Snapshot of fused features, for inspection and tests.
pub fn fused_values(cx: Ctx, layers: &[Var], fusion: &Fusion, task: Task) -> Result<Tensor> {
    let v = fusion.fuse(cx, layers, task)?;
    Ok(cx.g.value(v).clone())
}
