//! Frame-level multi-label speaker-activity head trained with
//! permutation-invariant binary cross-entropy.

use ume_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::perm::{best_assignment, check_speakers};
use crate::sim::Span;

#[derive(Debug, Clone)]
pub struct DiarHead {
    pub linear: Linear,
    pub speakers: usize,
}

impl DiarHead {
    pub fn new(b: &mut Builder, d_model: usize, speakers: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(b, "diar.linear", d_model, speakers, true)?,
            speakers,
        })
    }

    /// Activity logits `[T_enc, C]`; probabilities are their sigmoid.
    pub fn forward(&self, cx: Ctx, h: Var) -> Result<Var> {
        self.linear.forward(cx, h)
    }
}

/// Numerically stable `BCE(y, σ(z))` from a logit.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `cost[c][r]`: frame-mean BCE of output track `c` against reference `r`.
pub fn bce_cost_matrix(logits: &Tensor, labels: &Tensor) -> Result<Vec<Vec<f64>>> {
    if logits.shape() != labels.shape() || logits.ndim() != 2 {
        return Err(invalid(format!(
            "pit_bce: logits {:?} and labels {:?} must be equal [T, C]",
            logits.shape(),
            labels.shape()
        )));
    }
    let (t, c) = (logits.rows(), logits.cols());
    check_speakers(c)?;
    if t == 0 {
        return Err(invalid("pit_bce: no frames"));
    }
    if labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(invalid("pit_bce: labels must be binary"));
    }
    let mut cost = vec![vec![0.0; c]; c];
    for (o, row) in cost.iter_mut().enumerate() {
        for (r, v) in row.iter_mut().enumerate() {
            let s: f64 = (0..t).map(|f| bce_from_logit(logits.row(f)[o], labels.row(f)[r])).sum();
            *v = s / t as f64;
        }
    }
    Ok(cost)
}

/// Label columns reordered so that column `c` holds reference `perm[c]`.
pub fn permute_columns(labels: &Tensor, perm: &[usize]) -> Tensor {
    let (t, c) = (labels.rows(), labels.cols());
    let mut data = Vec::with_capacity(t * c);
    for f in 0..t {
        let row = labels.row(f);
        data.extend(perm.iter().map(|&r| row[r]));
    }
    Tensor::new(vec![t, c], data).expect("same shape")
}

/// `min_π Σ_c mean_t BCE(Y^{π(c)}, σ(z^c))`. The permutation is chosen on
/// plain values; the returned loss is recorded only for the winner, so the
/// gradient flows through that term alone.
pub fn pit_bce_loss(g: &Graph, logits: Var, labels: &Tensor) -> Result<(Var, Vec<usize>)> {
    let cost = bce_cost_matrix(&g.value(logits), labels)?;
    let (perm, _) = best_assignment(&cost).ok_or_else(|| invalid("pit_bce: non-finite loss for every permutation"))?;
    let t = labels.rows() as f64;
    let y = g.constant(permute_columns(labels, &perm));
    let loss = g.scale(g.sum(g.bce_with_logits(logits, y)?)?, 1.0 / t)?;
    Ok((loss, perm))
}

/// Frame labels `[T_enc, C]` from sample spans: frame `f` covers samples
/// `[⌊f·T/T_enc⌋, ⌊(f+1)·T/T_enc⌋)` and is active iff more than half of
/// them are.
pub fn frame_labels(activity: &[Vec<Span>], t: usize, t_enc: usize) -> Tensor {
    let c = activity.len();
    let mut data = vec![0.0; t_enc * c];
    for f in 0..t_enc {
        let (lo, hi) = frame_bounds(f, t, t_enc);
        for (s, spans) in activity.iter().enumerate() {
            let active: usize = spans.iter().map(|sp| sp.overlap(lo, hi)).sum();
            if 2 * active > hi - lo {
                data[f * c + s] = 1.0;
            }
        }
    }
    Tensor::new(vec![t_enc, c], data).expect("shape matches data")
}

pub fn frame_bounds(f: usize, t: usize, t_enc: usize) -> (usize, usize) {
    (f * t / t_enc, (f + 1) * t / t_enc)
}
