//! Small random models and items shared by the gradient and acceptance
//! suites.
#![allow(dead_code)]

use rand::Rng;
use ume::asr::AsrConfig;
use ume::encoder::{EncoderConfig, FusionMode, Task};
use ume::model::{Heads, ModelConfig, UmeModel};
use ume::nn::Ctx;
use ume::sep::SepConfig;
use ume::sim::{MixtureSample, Span};
use ume::train::{total_loss, LossWeights};
use ume_tensor::gradcheck::{grad_check, GradCheckConfig};
use ume_tensor::rng::{seeded, UmeRng};
use ume_tensor::{Graph, ParamId, ParamStore, Precision, Var};

/// Central differences with a step near the roundoff/truncation optimum for
/// losses of magnitude ~10.
pub const CFG: GradCheckConfig = GradCheckConfig {
    eps: 1e-5,
    tol: 1e-4,
    floor: 1e-6,
    max_elements: Some(3),
};

pub fn random_model(rng: &mut UmeRng, speakers: usize, vocab: usize) -> ModelConfig {
    let heads = rng.gen_range(1..=2);
    ModelConfig {
        speakers,
        fusion: FusionMode::Rwse,
        encoder: EncoderConfig {
            layers: rng.gen_range(1..=2),
            d_model: 4 * heads,
            heads,
            conv_kernel: 3,
            ff_dim: 6,
            positional_encoding: true,
        },
        sep: SepConfig {
            filters: 4,
            bottleneck: 4,
            hidden: 5,
            blocks: 1,
            layers_per_block: 2,
            ..Default::default()
        },
        asr: AsrConfig {
            d_model: 4,
            heads: 1,
            ff_dim: 6,
            encoder_blocks: 1,
            decoder_blocks: 1,
            vocab_size: vocab,
            ctc_weight: rng.gen_range(0.2..0.8),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// A random item: noise-like waveforms, one activity span per speaker and
/// short token sequences.
pub fn random_sample(rng: &mut UmeRng, t: usize, speakers: usize, vocab: usize, max_tokens: usize) -> MixtureSample {
    let mut wave = || (0..t).map(|_| rng.gen_range(-0.5..0.5)).collect::<Vec<f64>>();
    let sources: Vec<Vec<f64>> = (0..speakers).map(|_| wave()).collect();
    let mixture = (0..t).map(|i| sources.iter().map(|s| s[i]).sum()).collect();
    let activity = (0..speakers)
        .map(|_| {
            let a = rng.gen_range(0..t / 2);
            vec![Span::new(a, rng.gen_range(a + t / 4..=t))]
        })
        .collect();
    let transcripts = (0..speakers)
        .map(|_| {
            (0..rng.gen_range(1..=max_tokens))
                .map(|_| rng.gen_range(1..=vocab))
                .collect()
        })
        .collect();
    MixtureSample {
        id: "x".into(),
        sample_rate: 2000,
        mixture,
        sources,
        activity,
        transcripts,
        noise_snr_db: None,
        noise: None,
    }
}

pub fn build(cfg: &ModelConfig, seed: u64) -> (UmeModel, ParamStore) {
    let (model, mut store) = UmeModel::new(cfg, seed).unwrap();
    store.set_precision(Precision::F64);
    (model, store)
}

pub fn head_loss<'a>(
    model: &'a UmeModel,
    sample: &MixtureSample,
    task: Task,
) -> impl Fn(&Graph, &ParamStore) -> ume_tensor::Result<Var> + 'a {
    let sample = sample.clone();
    move |g, store| {
        let heads = Heads {
            diar: task == Task::Diar,
            sep: task == Task::Sep,
            asr: task == Task::Asr,
        };
        let l = model
            .item_losses(Ctx::new(g, store), &sample, heads)
            .expect("losses record");
        Ok(match task {
            Task::Diar => l.diar.unwrap().0,
            Task::Sep => l.sep.unwrap().0,
            Task::Asr => l.asr.unwrap().expect("feasible targets").loss,
        })
    }
}

/// Checks `task`'s loss on 20 random models and items; `samples` draws the
/// waveform length.
pub fn check_head(task: Task, samples: impl Fn(&mut UmeRng, usize) -> usize, max_tokens: usize) {
    for case in 0..20u64 {
        let mut rng = seeded(case, 77);
        let speakers = rng.gen_range(2..=3);
        let cfg = random_model(&mut rng, speakers, 3);
        let t = samples(&mut rng, case as usize);
        let sample = random_sample(&mut rng, t, speakers, 3, max_tokens);
        let (model, mut store) = build(&cfg, case);
        let report = grad_check(&mut store, None, head_loss(&model, &sample, task), CFG).unwrap();
        let used: Vec<_> = report.params.iter().filter(|p| p.checked > 0).collect();
        assert!(!used.is_empty());
        assert!(
            report.passed(),
            "{task:?} case {case} (T={t}): {:?} worst {}",
            report.failures(),
            report.worst()
        );
    }
}

/// Checks `L_all` with random task weights against the three fusion logit
/// vectors on 20 random models.
pub fn check_fusion_logits() {
    for case in 0..20u64 {
        let mut rng = seeded(case, 78);
        let cfg = random_model(&mut rng, 2, 3);
        let t = rng.gen_range(56..64);
        let sample = random_sample(&mut rng, t, 2, 3, 2);
        let (model, mut store) = build(&cfg, case);
        let w = LossWeights {
            diar: rng.gen_range(0.1..1.0),
            sep: rng.gen_range(0.1..1.0),
            asr: rng.gen_range(0.1..1.0),
        };
        let fusion: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.name.starts_with("fusion."))
            .map(|(id, _)| id)
            .collect();
        assert_eq!(fusion.len(), 3);
        let report = grad_check(
            &mut store,
            Some(&fusion),
            |g, s| {
                Ok(total_loss(Ctx::new(g, s), &model, &[&sample], &w)
                    .expect("loss records")
                    .0)
            },
            GradCheckConfig {
                max_elements: None,
                ..CFG
            },
        )
        .unwrap();
        assert!(report.passed(), "case {case}: {:?}", report.params);
    }
}
