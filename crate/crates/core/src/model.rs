//! The full model: shared encoder, per-task fusion and the three heads.

use serde::{Deserialize, Serialize};
use ume_tensor::rng::seeded;
use ume_tensor::{Graph, ParamStore, Precision, Tensor, Var};

use crate::asr::{greedy_decode, AsrBranches, AsrConfig, AsrHead, AsrLoss, Hypothesis};
use crate::diar::{frame_labels, pit_bce_loss, sigmoid, DiarHead};
use crate::encoder::{EncoderConfig, Fusion, FusionMode, SpeechEncoder, Task};
use crate::error::{Result, UmeError};
use crate::nn::{Builder, Ctx};
use crate::perm::MAX_SPEAKERS;
use crate::sep::{si_sdr_pit_loss, SepConfig, SepHead};
use crate::sim::MixtureSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub speakers: usize,
    /// Rate of the waveforms the model consumes.
    pub sample_rate: u32,
    pub fusion: FusionMode,
    pub encoder: EncoderConfig,
    pub sep: SepConfig,
    pub asr: AsrConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            speakers: 2,
            sample_rate: 2000,
            fusion: FusionMode::Rwse,
            encoder: EncoderConfig::default(),
            sep: SepConfig::default(),
            asr: AsrConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.speakers == 0 || self.speakers > MAX_SPEAKERS {
            return Err(UmeError::config(
                format!("{prefix}.speakers"),
                format!("must be in 1..={MAX_SPEAKERS}, got {}", self.speakers),
            ));
        }
        if self.sample_rate == 0 {
            return Err(UmeError::config(format!("{prefix}.sample_rate"), "must be positive"));
        }
        self.encoder.validate(&format!("{prefix}.encoder"))?;
        self.sep.validate(&format!("{prefix}.sep"))?;
        self.asr.validate(&format!("{prefix}.asr"))
    }
}

#[derive(Debug, Clone)]
pub struct UmeModel {
    pub cfg: ModelConfig,
    pub encoder: SpeechEncoder,
    pub fusion: Fusion,
    pub diar: DiarHead,
    pub sep: SepHead,
    pub asr: AsrHead,
}

/// Which heads to evaluate for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub diar: bool,
    pub sep: bool,
    pub asr: bool,
}

impl Heads {
    pub const ALL: Heads = Heads {
        diar: true,
        sep: true,
        asr: true,
    };
}

/// Graph losses of one item for the requested heads.
#[derive(Debug, Clone, Default)]
pub struct ItemLosses {
    pub diar: Option<(Var, Vec<usize>)>,
    pub sep: Option<(Var, Vec<usize>)>,
    /// `Some(None)` when ASR was requested but every assignment was CTC-infeasible.
    pub asr: Option<Option<AsrLoss>>,
}

/// Plain-value outputs of all three heads for one waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Activity probabilities `[T_enc, C]`.
    pub diar_probs: Tensor,
    pub estimates: Vec<Vec<f64>>,
    pub hypotheses: Vec<Hypothesis>,
}

impl UmeModel {
    /// Registers every parameter in a fresh store. Each module draws its
    /// initial values from its own stream of `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate("model")?;
        let mut store = ParamStore::new(Precision::F32);
        let c = cfg.speakers;
        let d = cfg.encoder.d_model;
        let mut rng = seeded(seed, 1);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let encoder = SpeechEncoder::new(&mut b, &cfg.encoder)?;
        let fusion = Fusion::new(&mut b, cfg.fusion, cfg.encoder.layers)?;
        let mut rng = seeded(seed, 2);
        let diar = DiarHead::new(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            d,
            c,
        )?;
        let mut rng = seeded(seed, 3);
        let sep = SepHead::new(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            &cfg.sep,
            d,
            c,
        )?;
        let mut rng = seeded(seed, 4);
        let asr = AsrHead::new(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            &cfg.asr,
            d,
            c,
        )?;
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                fusion,
                diar,
                sep,
                asr,
            },
            store,
        ))
    }

    /// Records the losses of `sample` for the requested heads.
    pub fn item_losses(&self, cx: Ctx, sample: &MixtureSample, heads: Heads) -> Result<ItemLosses> {
        let g = cx.g;
        let x = g.constant(Tensor::from_vec(sample.mixture.clone()));
        let layers = self.encoder.encode_layers(cx, x)?;
        let mut out = ItemLosses::default();
        if heads.diar {
            let h = self.fusion.fuse(cx, &layers, Task::Diar)?;
            let logits = self.diar.forward(cx, h)?;
            let t_enc = g.shape(logits)[0];
            let labels = frame_labels(&sample.activity, sample.len(), t_enc);
            out.diar = Some(pit_bce_loss(g, logits, &labels)?);
        }
        if heads.sep {
            let h = self.fusion.fuse(cx, &layers, Task::Sep)?;
            let sep = self.sep.forward(cx, x, Some(h))?;
            let refs: Vec<Vec<f64>> = (0..sample.speakers()).map(|c| sample.gated_source(c)).collect();
            out.sep = Some(si_sdr_pit_loss(g, &sep.estimates, &refs)?);
        }
        if heads.asr {
            let h = self.fusion.fuse(cx, &layers, Task::Asr)?;
            let branches = self.asr.branches(cx, h)?;
            out.asr = Some(self.asr.pit_loss(cx, &branches, &sample.transcripts)?);
        }
        Ok(out)
    }

    /// Runs every head on a waveform and extracts plain values.
    pub fn infer(&self, store: &ParamStore, wave: &[f64]) -> Result<Inference> {
        let g = Graph::new();
        let cx = Ctx::new(&g, store);
        let x = g.constant(Tensor::from_vec(wave.to_vec()));
        let layers = self.encoder.encode_layers(cx, x)?;
        let h = self.fusion.fuse(cx, &layers, Task::Diar)?;
        let logits = self.diar.forward(cx, h)?;
        let diar_probs = g.value(logits).map(sigmoid);
        let h = self.fusion.fuse(cx, &layers, Task::Sep)?;
        let sep = self.sep.forward(cx, x, Some(h))?;
        let estimates = sep.estimates.iter().map(|&e| g.value(e).data().to_vec()).collect();
        let h = self.fusion.fuse(cx, &layers, Task::Asr)?;
        let AsrBranches { ctc_log_probs, .. } = self.asr.branches(cx, h)?;
        let hypotheses = ctc_log_probs.iter().map(|&lp| greedy_decode(&g.value(lp))).collect();
        Ok(Inference {
            diar_probs,
            estimates,
            hypotheses,
        })
    }
}

/// Names of parameters used only by the given head.
pub fn head_prefix(task: Task) -> &'static str {
    match task {
        Task::Diar => "diar.",
        Task::Sep => "sep.",
        Task::Asr => "asr.",
    }
}
