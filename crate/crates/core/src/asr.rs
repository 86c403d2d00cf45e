//! Multi-speaker recognition branch: one speaker-differentiating encoder per
//! output speaker, a shared CTC projection and a shared attention decoder,
//! trained with a permutation-invariant CTC/attention objective.

use serde::{Deserialize, Serialize};
use ume_tensor::{ctc_min_frames, Graph, Tensor, Var};

use crate::error::{invalid, Result, UmeError};
use crate::nn::{
    conv_attrs, conv_out_len, positional_encoding, Builder, Conv1d, Ctx, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, TransformerBlock,
};
use crate::perm::{best_assignment, check_speakers};

pub const BLANK: usize = 0;

/// Which objective picks the speaker permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitSelection {
    /// CTC loss alone (the combined objective is then evaluated under it).
    #[default]
    Ctc,
    /// The full weighted CTC/attention objective.
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsrConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub subsample: usize,
    /// Number of real tokens; ids are `1..=vocab_size`.
    pub vocab_size: usize,
    pub ctc_weight: f64,
    pub pit_selection: PitSelection,
}

impl Default for AsrConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            ff_dim: 64,
            encoder_blocks: 2,
            decoder_blocks: 2,
            subsample: 4,
            vocab_size: 5,
            ctc_weight: 0.2,
            pit_selection: PitSelection::Ctc,
        }
    }
}

impl AsrConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return Err(UmeError::config(
                p("heads"),
                format!(
                    "d_model {} must be a positive multiple of heads {}",
                    self.d_model, self.heads
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(UmeError::config(
                p("ctc_weight"),
                format!("must be in [0, 1], got {}", self.ctc_weight),
            ));
        }
        if self.subsample == 0 {
            return Err(UmeError::config(p("subsample"), "must be positive"));
        }
        if self.vocab_size == 0 {
            return Err(UmeError::config(p("vocab_size"), "must be positive"));
        }
        if self.ff_dim == 0 {
            return Err(UmeError::config(p("ff_dim"), "must be positive"));
        }
        Ok(())
    }

    pub fn sos(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn eos(&self) -> usize {
        self.vocab_size + 2
    }

    /// CTC classes: blank plus every token.
    pub fn ctc_classes(&self) -> usize {
        self.vocab_size + 1
    }

    /// Decoder output classes: every token (class `k−1` for token `k`) plus eos (class `V`).
    pub fn decoder_classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn frames(&self, t_enc: usize) -> usize {
        conv_out_len(t_enc, self.subsample, conv_attrs(self.subsample, 0, 1, 1))
    }
}

#[derive(Debug, Clone)]
struct SpeakerEncoder {
    conv: Conv1d,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ff: FeedForward,
}

impl DecoderBlock {
    fn forward(&self, cx: Ctx, x: Var, memory: Var) -> Result<Var> {
        let g = cx.g;
        let n = self.ln1.forward(cx, x)?;
        let x = g.add(x, self.self_attn.forward(cx, n, n, true)?)?;
        let n = self.ln2.forward(cx, x)?;
        let x = g.add(x, self.cross_attn.forward(cx, n, memory, false)?)?;
        let n = self.ln3.forward(cx, x)?;
        Ok(g.add(x, self.ff.forward(cx, n)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct AsrHead {
    pub cfg: AsrConfig,
    pub speakers: usize,
    encoders: Vec<SpeakerEncoder>,
    ctc: Linear,
    embed: ume_tensor::ParamId,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    dec_out: Linear,
}

/// Per-branch CTC log-probabilities `[T_asr, V+1]` and hidden states.
#[derive(Debug, Clone)]
pub struct AsrBranches {
    pub hidden: Vec<Var>,
    pub ctc_log_probs: Vec<Var>,
}

/// Outcome of the permutation-invariant objective for one item.
#[derive(Debug, Clone)]
pub struct AsrLoss {
    pub loss: Var,
    pub perm: Vec<usize>,
    /// `Σ_c L_ctc` under `perm`.
    pub ctc_sum: f64,
}

impl AsrHead {
    pub fn new(b: &mut Builder, cfg: &AsrConfig, d_enc: usize, speakers: usize) -> Result<Self> {
        let d = cfg.d_model;
        let mut encoders = Vec::with_capacity(speakers);
        for c in 0..speakers {
            let name = format!("asr.spk{}", c + 1);
            encoders.push(SpeakerEncoder {
                conv: Conv1d::new(
                    b,
                    &format!("{name}.conv"),
                    d_enc,
                    d,
                    cfg.subsample,
                    conv_attrs(cfg.subsample, 0, 1, 1),
                    true,
                )?,
                blocks: (0..cfg.encoder_blocks)
                    .map(|i| TransformerBlock::new(b, &format!("{name}.block{}", i + 1), d, cfg.heads, cfg.ff_dim))
                    .collect::<Result<_>>()?,
                ln: LayerNorm::new(b, &format!("{name}.ln"), d)?,
            });
        }
        let ctc = Linear::new(b, "asr.ctc", d, cfg.ctc_classes(), true)?;
        let vocab_in = cfg.vocab_size + 3;
        let embed = b.xavier("asr.decoder.embed", &[vocab_in, d], vocab_in, d)?;
        let mut dec_blocks = Vec::with_capacity(cfg.decoder_blocks);
        for i in 0..cfg.decoder_blocks {
            let name = format!("asr.decoder.block{}", i + 1);
            dec_blocks.push(DecoderBlock {
                ln1: LayerNorm::new(b, &format!("{name}.ln1"), d)?,
                self_attn: MultiHeadAttention::new(b, &format!("{name}.self_attn"), d, cfg.heads)?,
                ln2: LayerNorm::new(b, &format!("{name}.ln2"), d)?,
                cross_attn: MultiHeadAttention::new(b, &format!("{name}.cross_attn"), d, cfg.heads)?,
                ln3: LayerNorm::new(b, &format!("{name}.ln3"), d)?,
                ff: FeedForward::new(b, &format!("{name}.ff"), d, cfg.ff_dim)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            speakers,
            encoders,
            ctc,
            embed,
            dec_blocks,
            dec_ln: LayerNorm::new(b, "asr.decoder.ln", d)?,
            dec_out: Linear::new(b, "asr.decoder.out", d, cfg.decoder_classes(), true)?,
        })
    }

    /// `H^asr_c` for every output speaker, each from its own parameters.
    pub fn speaker_encode(&self, cx: Ctx, h_enc: Var) -> Result<Vec<Var>> {
        let g = cx.g;
        let t_enc = g.shape(h_enc)[0];
        let t_asr = self.cfg.frames(t_enc);
        if t_asr == 0 {
            return Err(invalid(format!(
                "{t_enc} encoder frames leave no recognizer frames after {}x subsampling",
                self.cfg.subsample
            )));
        }
        let pe = g.constant(positional_encoding(t_asr, self.cfg.d_model));
        self.encoders
            .iter()
            .map(|enc| {
                let mut h = g.relu(enc.conv.forward_time_major(cx, h_enc)?)?;
                h = g.add(h, pe)?;
                for block in &enc.blocks {
                    h = block.forward(cx, h)?;
                }
                enc.ln.forward(cx, h)
            })
            .collect()
    }

    pub fn ctc_log_probs(&self, cx: Ctx, h: Var) -> Result<Var> {
        Ok(cx.g.log_softmax(self.ctc.forward(cx, h)?, 1)?)
    }

    pub fn branches(&self, cx: Ctx, h_enc: Var) -> Result<AsrBranches> {
        let hidden = self.speaker_encode(cx, h_enc)?;
        let ctc_log_probs = hidden
            .iter()
            .map(|&h| self.ctc_log_probs(cx, h))
            .collect::<Result<_>>()?;
        Ok(AsrBranches { hidden, ctc_log_probs })
    }

    /// Decoder logits `[U+1, V+1]` for the teacher-forced input `[sos, target…]`.
    pub fn decoder_logits(&self, cx: Ctx, memory: Var, target: &[usize]) -> Result<Var> {
        let g = cx.g;
        let mut ids = Vec::with_capacity(target.len() + 1);
        ids.push(self.cfg.sos());
        ids.extend_from_slice(target);
        let n = ids.len();
        let mut x = g.embedding(cx.p(self.embed), ids)?;
        x = g.add(x, g.constant(positional_encoding(n, self.cfg.d_model)))?;
        for block in &self.dec_blocks {
            x = block.forward(cx, x, memory)?;
        }
        self.dec_out.forward(cx, self.dec_ln.forward(cx, x)?)
    }

    /// Teacher-forced cross-entropy of `[target…, eos]`, mean over positions.
    pub fn attention_loss(&self, cx: Ctx, memory: Var, target: &[usize]) -> Result<Var> {
        check_tokens(target, self.cfg.vocab_size)?;
        if target.is_empty() {
            return Err(invalid("attention loss needs a non-empty target"));
        }
        let g = cx.g;
        let logits = self.decoder_logits(cx, memory, target)?;
        let lp = g.log_softmax(logits, 1)?;
        let classes = self.cfg.decoder_classes();
        let n = target.len() + 1;
        let mut onehot = vec![0.0; n * classes];
        for (i, &tok) in target.iter().enumerate() {
            onehot[i * classes + tok - 1] = 1.0;
        }
        onehot[(n - 1) * classes + self.cfg.vocab_size] = 1.0;
        let picked = g.sum(g.mul(lp, g.constant(Tensor::new(vec![n, classes], onehot)?))?)?;
        Ok(g.scale(picked, -1.0 / n as f64)?)
    }

    /// `min_π` over speaker assignments (selected by CTC unless configured
    /// otherwise) of `Σ_c [λ·L_ctc + (1−λ)·L_att]`. Returns `None` when every
    /// assignment contains an infeasible CTC pairing.
    pub fn pit_loss(&self, cx: Ctx, branches: &AsrBranches, targets: &[Vec<usize>]) -> Result<Option<AsrLoss>> {
        let c = branches.hidden.len();
        check_speakers(c)?;
        if targets.len() != c {
            return Err(invalid(format!(
                "{c} recognizer branches for {} transcripts",
                targets.len()
            )));
        }
        for t in targets {
            check_tokens(t, self.cfg.vocab_size)?;
        }
        let g = cx.g;
        let lambda = self.cfg.ctc_weight;
        let use_att = lambda < 1.0;
        // ctc[o][r]: branch o scored against reference r; None when infeasible
        let mut ctc: Vec<Vec<Option<Var>>> = vec![vec![None; c]; c];
        let mut cost = vec![vec![f64::INFINITY; c]; c];
        for o in 0..c {
            let frames = g.shape(branches.ctc_log_probs[o])[0];
            for r in 0..c {
                if ctc_min_frames(&targets[r]) <= frames {
                    let v = g.ctc(branches.ctc_log_probs[o], &targets[r], BLANK)?;
                    cost[o][r] = g.item(v)?;
                    ctc[o][r] = Some(v);
                }
            }
        }
        let mut att: Vec<Vec<Option<Var>>> = vec![vec![None; c]; c];
        if use_att && self.cfg.pit_selection == PitSelection::Combined {
            for o in 0..c {
                for r in 0..c {
                    if cost[o][r].is_finite() {
                        let a = self.attention_loss(cx, branches.hidden[o], &targets[r])?;
                        cost[o][r] = lambda * cost[o][r] + (1.0 - lambda) * g.item(a)?;
                        att[o][r] = Some(a);
                    }
                }
            }
        }
        let Some((perm, _)) = best_assignment(&cost) else {
            return Ok(None);
        };
        let mut total: Option<Var> = None;
        let mut ctc_sum = 0.0;
        for (o, &r) in perm.iter().enumerate() {
            let l_ctc = ctc[o][r].expect("finite cost implies a feasible pairing");
            ctc_sum += g.item(l_ctc)?;
            let term = if use_att {
                let l_att = match att[o][r] {
                    Some(a) => a,
                    None => self.attention_loss(cx, branches.hidden[o], &targets[r])?,
                };
                g.add(g.scale(l_ctc, lambda)?, g.scale(l_att, 1.0 - lambda)?)?
            } else {
                l_ctc
            };
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        Ok(Some(AsrLoss {
            loss: total.expect("at least one speaker"),
            perm,
            ctc_sum,
        }))
    }
}

fn check_tokens(target: &[usize], vocab: usize) -> Result<()> {
    if let Some(&t) = target.iter().find(|&&t| t == 0 || t > vocab) {
        return Err(invalid(format!("token id {t} outside 1..={vocab}")));
    }
    Ok(())
}

/// Stand-alone CTC negative log-likelihood of `target` under `log_probs`.
pub fn ctc_loss(g: &Graph, log_probs: Var, target: &[usize]) -> Result<Var> {
    Ok(g.ctc(log_probs, target, BLANK)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Log-probability of each emitted token at the frame that emitted it.
    pub scores: Vec<f64>,
}

/// Greedy CTC decoding: per-frame argmax (first index on ties), collapse
/// repeats, drop blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Hypothesis {
    let mut tokens = Vec::new();
    let mut scores = Vec::new();
    let mut prev = None;
    for f in 0..log_probs.rows() {
        let row = log_probs.row(f);
        let (best, &score) = row
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if best != BLANK && Some(best) != prev {
            tokens.push(best);
            scores.push(score);
        }
        prev = Some(best);
    }
    Hypothesis { tokens, scores }
}
