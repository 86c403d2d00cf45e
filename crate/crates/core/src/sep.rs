//! Time-domain masking separator: learned analysis filterbank, encoder
//! feature concatenation, dilated TCN, sigmoid masks and a transposed-conv
//! synthesis decoder, trained with permutation-invariant SI-SDR.

use serde::{Deserialize, Serialize};
use ume_tensor::{Graph, Init, ParamId, Tensor, Var};

use crate::error::{invalid, Result, UmeError};
use crate::nn::{conv_attrs, Builder, Conv1d, Ctx, LayerNorm, Linear};
use crate::perm::{best_assignment, check_speakers};

/// Guard added to both energies of the SI-SDR ratio.
pub const SI_SDR_EPS: f64 = 1e-8;
const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SepConfig {
    pub kernel: usize,
    pub stride: usize,
    pub filters: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub tcn_kernel: usize,
    /// Concatenate the fused encoder features with the analysis features.
    pub use_encoder_features: bool,
}

impl Default for SepConfig {
    fn default() -> Self {
        Self {
            kernel: 16,
            stride: 8,
            filters: 32,
            bottleneck: 48,
            hidden: 64,
            blocks: 2,
            layers_per_block: 4,
            tcn_kernel: 3,
            use_encoder_features: true,
        }
    }
}

impl SepConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.stride == 0 || self.stride > self.kernel {
            return Err(UmeError::config(
                p("stride"),
                format!("must be in 1..={} (kernel)", self.kernel),
            ));
        }
        if self.tcn_kernel % 2 == 0 {
            return Err(UmeError::config(p("tcn_kernel"), "must be odd for same-length padding"));
        }
        for (f, v) in [
            ("filters", self.filters),
            ("bottleneck", self.bottleneck),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("layers_per_block", self.layers_per_block),
        ] {
            if v == 0 {
                return Err(UmeError::config(p(f), "must be positive"));
            }
        }
        Ok(())
    }

    pub fn frames(&self, t: usize) -> usize {
        if t < self.kernel {
            0
        } else {
            (t - self.kernel) / self.stride + 1
        }
    }

    pub fn feature_width(&self, d_enc: usize) -> usize {
        self.filters + if self.use_encoder_features { d_enc } else { 0 }
    }

    /// Dilation of each TCN layer: `1, 2, 4, …` restarting every block.
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.blocks)
            .flat_map(|_| (0..self.layers_per_block).map(|l| 1 << l))
            .collect()
    }

    /// Frames seen by one output frame of the TCN.
    pub fn receptive_field(&self) -> usize {
        1 + self
            .dilations()
            .iter()
            .map(|d| (self.tcn_kernel - 1) * d)
            .sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct TcnLayer {
    inp: Linear,
    prelu1: ParamId,
    ln1: LayerNorm,
    dwconv: Conv1d,
    prelu2: ParamId,
    ln2: LayerNorm,
    out: Linear,
}

impl TcnLayer {
    fn forward(&self, cx: Ctx, x: Var) -> Result<Var> {
        let g = cx.g;
        let h = g.prelu(self.inp.forward(cx, x)?, cx.p(self.prelu1))?;
        let h = self.ln1.forward(cx, h)?;
        let h = g.prelu(self.dwconv.forward_time_major(cx, h)?, cx.p(self.prelu2))?;
        let h = self.ln2.forward(cx, h)?;
        Ok(g.add(x, self.out.forward(cx, h)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct SepHead {
    pub cfg: SepConfig,
    pub speakers: usize,
    pub width: usize,
    analysis: Conv1d,
    ln: LayerNorm,
    bottleneck: Linear,
    tcn: Vec<TcnLayer>,
    mask_prelu: ParamId,
    mask: Linear,
    decoder: ParamId,
}

/// Masks `M^c` and waveform estimates `Ŝ^c`, one per output speaker.
#[derive(Debug, Clone)]
pub struct SepOutput {
    pub masks: Vec<Var>,
    pub estimates: Vec<Var>,
}

impl SepHead {
    pub fn new(b: &mut Builder, cfg: &SepConfig, d_enc: usize, speakers: usize) -> Result<Self> {
        let width = cfg.feature_width(d_enc);
        let analysis = Conv1d::new(
            b,
            "sep.analysis",
            1,
            cfg.filters,
            cfg.kernel,
            conv_attrs(cfg.stride, 0, 1, 1),
            false,
        )?;
        let ln = LayerNorm::new(b, "sep.ln", width)?;
        let bottleneck = Linear::new(b, "sep.bottleneck", width, cfg.bottleneck, true)?;
        let mut tcn = Vec::new();
        for (i, d) in cfg.dilations().into_iter().enumerate() {
            let (blk, lyr) = (i / cfg.layers_per_block, i % cfg.layers_per_block);
            let name = format!("sep.tcn.block{}.layer{}", blk + 1, lyr + 1);
            let h = cfg.hidden;
            tcn.push(TcnLayer {
                inp: Linear::new(b, &format!("{name}.in"), cfg.bottleneck, h, true)?,
                prelu1: b.add(&format!("{name}.prelu1"), &[1], Init::Constant(PRELU_INIT))?,
                ln1: LayerNorm::new(b, &format!("{name}.ln1"), h)?,
                dwconv: Conv1d::new(
                    b,
                    &format!("{name}.dwconv"),
                    h,
                    h,
                    cfg.tcn_kernel,
                    conv_attrs(1, d * (cfg.tcn_kernel - 1) / 2, d, h),
                    true,
                )?,
                prelu2: b.add(&format!("{name}.prelu2"), &[1], Init::Constant(PRELU_INIT))?,
                ln2: LayerNorm::new(b, &format!("{name}.ln2"), h)?,
                out: Linear::new(b, &format!("{name}.out"), h, cfg.bottleneck, true)?,
            });
        }
        let mask_prelu = b.add("sep.mask.prelu", &[1], Init::Constant(PRELU_INIT))?;
        let mask = Linear::new(b, "sep.mask.proj", cfg.bottleneck, speakers * width, true)?;
        let decoder = b.xavier(
            "sep.decoder.weight",
            &[width, 1, cfg.kernel],
            width * cfg.kernel,
            cfg.kernel,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            speakers,
            width,
            analysis,
            ln,
            bottleneck,
            tcn,
            mask_prelu,
            mask,
            decoder,
        })
    }

    /// Analysis representation `[T_sep, filters]` of waveform `[T]`.
    pub fn conv_encode(&self, cx: Ctx, x: Var) -> Result<Var> {
        let g = cx.g;
        let t = g.shape(x)[0];
        if t < self.cfg.kernel {
            return Err(invalid(format!(
                "separator input of {t} samples is shorter than the {}-sample kernel",
                self.cfg.kernel
            )));
        }
        let h = g.relu(self.analysis.forward(cx, g.reshape(x, &[1, t])?)?)?;
        Ok(g.transpose(h)?)
    }

    /// `H^concat`: analysis features, with time-aligned encoder features appended when enabled.
    pub fn concat_features(&self, cx: Ctx, h_sep: Var, h_enc: Option<Var>) -> Result<Var> {
        match (self.cfg.use_encoder_features, h_enc) {
            (false, _) => Ok(h_sep),
            (true, None) => Err(invalid("separator configured for encoder features but none supplied")),
            (true, Some(h)) => concat_upsample(cx.g, h_sep, h),
        }
    }

    /// Masks from `H^concat [T_sep, D_sep]`.
    pub fn separate(&self, cx: Ctx, h_concat: Var) -> Result<Vec<Var>> {
        let g = cx.g;
        let mut e = self.bottleneck.forward(cx, self.ln.forward(cx, h_concat)?)?;
        for layer in &self.tcn {
            e = layer.forward(cx, e)?;
        }
        let m = self.mask.forward(cx, g.prelu(e, cx.p(self.mask_prelu))?)?;
        let m = g.sigmoid(m)?;
        (0..self.speakers)
            .map(|c| Ok(g.slice(m, 1, c * self.width, (c + 1) * self.width)?))
            .collect()
    }

    /// `Ŝ^c = Decoder(H^concat ⊙ M^c)`, trimmed or zero-padded to `t` samples.
    pub fn reconstruct(&self, cx: Ctx, h_concat: Var, masks: &[Var], t: usize) -> Result<Vec<Var>> {
        let g = cx.g;
        masks
            .iter()
            .map(|&m| {
                let d = g.transpose(g.mul(h_concat, m)?)?;
                let y = g.conv_transpose1d(d, cx.p(self.decoder), self.cfg.stride)?;
                let n = g.shape(y)[1];
                let y = g.reshape(y, &[n])?;
                Ok(if n >= t {
                    g.slice(y, 0, 0, t)?
                } else {
                    g.concat(&[y, g.constant(Tensor::zeros(vec![t - n]))], 0)?
                })
            })
            .collect()
    }

    pub fn forward(&self, cx: Ctx, x: Var, h_enc: Option<Var>) -> Result<SepOutput> {
        let t = cx.g.shape(x)[0];
        let h_sep = self.conv_encode(cx, x)?;
        let h_concat = self.concat_features(cx, h_sep, h_enc)?;
        let masks = self.separate(cx, h_concat)?;
        let estimates = self.reconstruct(cx, h_concat, &masks, t)?;
        Ok(SepOutput { masks, estimates })
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Encoder-frame index feeding each separator frame. With `T_enc ≤ T_sep`
/// every encoder frame is repeated `r = max(1, round(T_sep/T_enc))` times,
/// truncated or edge-padded to `T_sep`; with `T_enc > T_sep` every
/// `q = round(T_enc/T_sep)`-th encoder frame is taken instead so the two
/// time axes stay aligned.
pub fn upsample_indices(t_enc: usize, t_sep: usize) -> Vec<usize> {
    if t_enc == 0 {
        return Vec::new();
    }
    if t_enc <= t_sep {
        let r = round_half_up(t_sep as f64 / t_enc as f64).max(1);
        (0..t_sep).map(|i| (i / r).min(t_enc - 1)).collect()
    } else {
        let q = round_half_up(t_enc as f64 / t_sep as f64).max(1);
        (0..t_sep).map(|i| (i * q).min(t_enc - 1)).collect()
    }
}

/// Concatenates time-aligned encoder features `[T_enc, D]` onto `h_sep [T_sep, F]`.
pub fn concat_upsample(g: &Graph, h_sep: Var, h_enc: Var) -> Result<Var> {
    let t_sep = g.shape(h_sep)[0];
    let t_enc = g.shape(h_enc)[0];
    if t_enc == 0 {
        return Err(invalid("no encoder frames to concatenate"));
    }
    let aligned = g.gather_rows(h_enc, upsample_indices(t_enc, t_sep))?;
    Ok(g.concat(&[h_sep, aligned], 1)?)
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB after zero-meaning both signals:
/// `10·log10((‖αs‖² + ε) / (‖ŝ − αs‖² + ε))`, `α = ⟨ŝ, s⟩ / ‖s‖²`.
/// Perfect estimates reach the ε-ceiling rather than infinity.
pub fn si_sdr_db(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(invalid(format!(
            "si_sdr: lengths {} and {} must match and be non-empty",
            est.len(),
            reference.len()
        )));
    }
    let s = zero_mean(reference);
    let e = zero_mean(est);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(invalid("si_sdr: reference is zero after mean removal"));
    }
    let alpha = dot(&e, &s) / ss;
    let target = alpha * alpha * ss;
    let err: f64 = e.iter().zip(&s).map(|(e, s)| (e - alpha * s).powi(2)).sum();
    Ok(10.0 * ((target + SI_SDR_EPS) / (err + SI_SDR_EPS)).log10())
}

/// Graph form of [`si_sdr_db`] with a constant reference.
pub fn si_sdr_graph(g: &Graph, est: Var, reference: &[f64]) -> Result<Var> {
    let n = g.shape(est);
    if n != [reference.len()] {
        return Err(invalid(format!(
            "si_sdr: estimate {n:?} vs reference length {}",
            reference.len()
        )));
    }
    let s = zero_mean(reference);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(invalid("si_sdr: reference is zero after mean removal"));
    }
    let s = g.constant(Tensor::from_vec(s));
    let e = g.sub(est, g.mean(est)?)?;
    let alpha = g.scale(g.dot(e, s)?, 1.0 / ss)?;
    let target = g.mul(alpha, s)?;
    let err = g.sub(e, target)?;
    let eps = g.scalar(SI_SDR_EPS);
    let num = g.log(g.add(g.dot(target, target)?, eps)?)?;
    let den = g.log(g.add(g.dot(err, err)?, eps)?)?;
    Ok(g.scale(g.sub(num, den)?, 10.0 / std::f64::consts::LN_10)?)
}

/// `cost[c][r] = −SI-SDR(Ŝ^c, S^r)`.
pub fn si_sdr_cost_matrix(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if estimates.len() != references.len() {
        return Err(invalid(format!(
            "{} estimates for {} references",
            estimates.len(),
            references.len()
        )));
    }
    check_speakers(estimates.len())?;
    estimates
        .iter()
        .map(|e| references.iter().map(|r| Ok(-si_sdr_db(e, r)?)).collect())
        .collect()
}

/// `min_π −Σ_c SI-SDR(Ŝ^c, S^{π(c)})`; gradient flows through the winner only.
pub fn si_sdr_pit_loss(g: &Graph, estimates: &[Var], references: &[Vec<f64>]) -> Result<(Var, Vec<usize>)> {
    let values: Vec<Vec<f64>> = estimates.iter().map(|&e| g.value(e).data().to_vec()).collect();
    let cost = si_sdr_cost_matrix(&values, references)?;
    let (perm, _) = best_assignment(&cost).ok_or_else(|| invalid("si_sdr: non-finite loss for every permutation"))?;
    let mut total: Option<Var> = None;
    for (c, &r) in perm.iter().enumerate() {
        let v = si_sdr_graph(g, estimates[c], &references[r])?;
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
    }
    let loss = g.scale(total.expect("at least one speaker"), -1.0)?;
    Ok((loss, perm))
}
