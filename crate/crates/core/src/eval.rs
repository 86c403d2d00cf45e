//! Scoring a model over a set of items and single-file inference outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ume_tensor::{ParamStore, Tensor};

use crate::asr::Hypothesis;
use crate::dataset::write_wav;
use crate::diar::frame_labels;
use crate::encoder::Task;
use crate::error::{invalid, Result, UmeError};
use crate::metrics::{
    collar_key, der, format_rttm, median_filter, score_separation, segments_from_frames, wer_optimal_perm, DerConfig,
    ItemReport, MetricsReport, ReportBuilder,
};
use crate::model::{Inference, UmeModel};
use crate::sim::MixtureSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// DER collars in seconds; one DER is reported per collar.
    pub collars: Vec<f64>,
    pub median_frames: usize,
    pub threshold: f64,
    pub tasks: Vec<Task>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            collars: vec![0.0, 0.25],
            median_frames: 11,
            threshold: 0.5,
            tasks: Task::ALL.to_vec(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let p = |f: &str| format!("{prefix}.{f}");
        if let Some(c) = self.collars.iter().find(|c| !(c.is_finite() && **c >= 0.0)) {
            return Err(UmeError::config(
                p("collars"),
                format!("collars must be finite and ≥ 0, got {c}"),
            ));
        }
        if self.median_frames == 0 || self.median_frames % 2 == 0 {
            return Err(UmeError::config(
                p("median_frames"),
                format!("must be odd, got {}", self.median_frames),
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(UmeError::config(p("threshold"), "must be in (0, 1)"));
        }
        if self.tasks.is_empty() {
            return Err(UmeError::config(p("tasks"), "at least one task is required"));
        }
        Ok(())
    }

    pub fn scores(&self, task: Task) -> bool {
        self.tasks.contains(&task)
    }
}

/// Duration of one encoder frame: the frontend subsamples time by four.
pub fn frame_seconds(sample_rate: u32) -> f64 {
    4.0 / sample_rate as f64
}

/// Inference outputs replaced by the references of `sample`; a debugging aid
/// that pins every metric at its best value.
pub fn oracle_inference(model: &UmeModel, sample: &MixtureSample) -> Inference {
    let t_enc = model.cfg.encoder.frames(sample.len());
    Inference {
        diar_probs: frame_labels(&sample.activity, sample.len(), t_enc),
        estimates: (0..sample.speakers()).map(|c| sample.gated_source(c)).collect(),
        hypotheses: sample
            .transcripts
            .iter()
            .map(|t| Hypothesis {
                tokens: t.clone(),
                scores: vec![0.0; t.len()],
            })
            .collect(),
    }
}

/// Scores one item; also returns the ceiling-capped SI-SNR and SDR values
/// used for aggregation.
pub fn score_item(
    model: &UmeModel,
    store: &ParamStore,
    sample: &MixtureSample,
    cfg: &EvalConfig,
    oracle: bool,
) -> Result<(ItemReport, Vec<f64>, Vec<f64>)> {
    if sample.sample_rate != model.cfg.sample_rate {
        return Err(invalid(format!(
            "item {} is sampled at {} Hz, model expects {} Hz",
            sample.id, sample.sample_rate, model.cfg.sample_rate
        )));
    }
    if sample.speakers() != model.cfg.speakers {
        return Err(invalid(format!(
            "item {} has {} speakers, model expects {}",
            sample.id,
            sample.speakers(),
            model.cfg.speakers
        )));
    }
    let inf = if oracle {
        oracle_inference(model, sample)
    } else {
        model.infer(store, &sample.mixture)?
    };
    let mut item = ItemReport {
        id: sample.id.clone(),
        der: None,
        separation: None,
        wer: None,
    };
    if cfg.scores(Task::Diar) {
        let reference = frame_labels(&sample.activity, sample.len(), inf.diar_probs.rows());
        let mut per_collar = BTreeMap::new();
        for &collar_s in &cfg.collars {
            let d = der(
                &inf.diar_probs,
                &reference,
                &DerConfig {
                    collar_s,
                    median_frames: cfg.median_frames,
                    threshold: cfg.threshold,
                    frame_s: frame_seconds(sample.sample_rate),
                },
            )?;
            per_collar.insert(collar_key(collar_s), d);
        }
        item.der = Some(per_collar);
    }
    let (mut capped_si, mut capped_sdr) = (Vec::new(), Vec::new());
    if cfg.scores(Task::Sep) {
        let refs: Vec<Vec<f64>> = (0..sample.speakers()).map(|c| sample.gated_source(c)).collect();
        let (scores, si, sdr) = score_separation(&inf.estimates, &refs, &sample.mixture)?;
        item.separation = Some(scores);
        capped_si = si;
        capped_sdr = sdr;
    }
    if cfg.scores(Task::Asr) {
        let hyps: Vec<Vec<usize>> = inf.hypotheses.iter().map(|h| h.tokens.clone()).collect();
        item.wer = Some(wer_optimal_perm(&hyps, &sample.transcripts)?);
    }
    Ok((item, capped_si, capped_sdr))
}

/// Scores every item, in parallel across the current thread pool; the
/// report keeps the input order.
pub fn evaluate(
    model: &UmeModel,
    store: &ParamStore,
    samples: &[MixtureSample],
    cfg: &EvalConfig,
    oracle: bool,
) -> Result<MetricsReport> {
    cfg.validate("eval")?;
    let scored: Vec<_> = samples
        .par_iter()
        .map(|s| score_item(model, store, s, cfg, oracle))
        .collect::<Result<_>>()?;
    let mut builder = ReportBuilder::new();
    for (item, si, sdr) in scored {
        builder.push(item, &si, &sdr);
    }
    Ok(builder.finish())
}

/// Thresholded, median-filtered activity tracks `[T, C]` as 0/1 values.
pub fn binarize_activity(probs: &Tensor, threshold: f64, median_frames: usize) -> Result<Tensor> {
    let (t, c) = (probs.rows(), probs.cols());
    let mut data = vec![0.0; t * c];
    for k in 0..c {
        let raw: Vec<bool> = (0..t).map(|f| probs.row(f)[k] > threshold).collect();
        for (f, on) in median_filter(&raw, median_frames)?.into_iter().enumerate() {
            data[f * c + k] = on as u8 as f64;
        }
    }
    Ok(Tensor::new(vec![t, c], data)?)
}

/// The decoded token sequences of one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisFile {
    pub id: String,
    pub hypotheses: Vec<Hypothesis>,
}

pub fn estimate_file(id: &str, c: usize) -> String {
    format!("{id}_est{}.wav", c + 1)
}

/// Writes `{id}_est{c}.wav` per output track, `{id}.rttm` and
/// `{id}.hyp.json` into `dir`; returns the written paths.
pub fn write_inference(
    dir: &Path,
    id: &str,
    inf: &Inference,
    sample_rate: u32,
    cfg: &EvalConfig,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| UmeError::io(dir, e))?;
    let mut written = Vec::new();
    for (c, est) in inf.estimates.iter().enumerate() {
        let path = dir.join(estimate_file(id, c));
        write_wav(&path, est, sample_rate)?;
        written.push(path);
    }
    let tracks = binarize_activity(&inf.diar_probs, cfg.threshold, cfg.median_frames)?;
    let rttm = format_rttm(&segments_from_frames(id, &tracks, frame_seconds(sample_rate)));
    let path = dir.join(format!("{id}.rttm"));
    fs::write(&path, rttm).map_err(|e| UmeError::io(&path, e))?;
    written.push(path);
    let hyp = HypothesisFile {
        id: id.to_string(),
        hypotheses: inf.hypotheses.clone(),
    };
    let path = dir.join(format!("{id}.hyp.json"));
    let json = serde_json::to_string_pretty(&hyp).expect("hypotheses serialize");
    fs::write(&path, json).map_err(|e| UmeError::io(&path, e))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sim::{generate_dataset, DatasetConfig};

    #[test]
    fn oracle_pins_every_metric() {
        let data = generate_dataset(&DatasetConfig {
            num_items: 3,
            ..Default::default()
        })
        .unwrap();
        let (model, store) = UmeModel::new(&ModelConfig::default(), 0).unwrap();
        let r = evaluate(&model, &store, &data, &EvalConfig::default(), true).unwrap();
        for d in r.aggregate.der.as_ref().unwrap().values() {
            assert_eq!(d.der, 0.0);
        }
        assert_eq!(r.aggregate.wer, Some(0.0));
        for item in &r.per_item {
            assert!(item
                .separation
                .as_ref()
                .unwrap()
                .si_snr
                .iter()
                .all(|v| v.0 == f64::INFINITY));
        }
    }

    #[test]
    fn task_subset_and_validation() {
        let data = generate_dataset(&DatasetConfig {
            num_items: 1,
            ..Default::default()
        })
        .unwrap();
        let (model, store) = UmeModel::new(&ModelConfig::default(), 0).unwrap();
        let cfg = EvalConfig {
            tasks: vec![Task::Asr],
            ..Default::default()
        };
        let r = evaluate(&model, &store, &data, &cfg, false).unwrap();
        assert!(r.aggregate.der.is_none() && r.aggregate.si_snri.is_none() && r.aggregate.wer.is_some());
        let bad = EvalConfig {
            median_frames: 4,
            ..Default::default()
        };
        assert!(bad
            .validate("eval")
            .unwrap_err()
            .to_string()
            .contains("eval.median_frames"));
    }
}
