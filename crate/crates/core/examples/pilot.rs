//! Calibration runs for the toy trend checks. Knobs come from the
//! environment: STEPS, BATCH, LR, WARMUP, TRAIN, EVAL, W (diar,sep,asr),
//! FUSION (none|weighted_sum|rwse), SEED, BETA2, SAVE (checkpoint directory),
//! INIT_ASR (checkpoint to initialize the encoder and ASR head from).

use std::env;
use std::time::Instant;

use ume::encoder::FusionMode;
use ume::eval::{evaluate, EvalConfig};
use ume::model::{ModelConfig, UmeModel};
use ume::sim::{generate_dataset, DatasetConfig};
use ume::train::{init_from_asr, train, LossWeights, TrainConfig, TrainOptions};

fn var<T: std::str::FromStr>(k: &str, d: T) -> T {
    env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() {
    let n_train: usize = var("TRAIN", 400);
    let n_eval: usize = var("EVAL", 50);
    let all = generate_dataset(&DatasetConfig {
        num_items: n_train + n_eval,
        ..Default::default()
    })
    .unwrap();
    let (tr, ev) = all.split_at(n_train);
    let w: Vec<f64> = env::var("W")
        .unwrap_or("0.33,0.34,0.33".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let fusion = match env::var("FUSION").as_deref() {
        Ok("none") => FusionMode::None,
        Ok("weighted_sum") => FusionMode::WeightedSum,
        _ => FusionMode::Rwse,
    };
    let mcfg = ModelConfig {
        fusion,
        ..Default::default()
    };
    let steps = var("STEPS", 600);
    let cfg = TrainConfig {
        steps,
        batch_size: var("BATCH", 8),
        lr: var("LR", 2e-3),
        warmup_steps: var("WARMUP", 50),
        seed: var("SEED", 0),
        betas: [0.9, var("BETA2", 0.98)],
        weights: LossWeights {
            diar: w[0],
            sep: w[1],
            asr: w[2],
        },
        ..Default::default()
    };
    let (model, mut store) = UmeModel::new(&mcfg, cfg.seed).unwrap();
    if let Ok(p) = env::var("INIT_ASR") {
        init_from_asr(&mut store, p.as_ref()).unwrap();
    }
    let opts = TrainOptions {
        out_dir: env::var("SAVE").ok().map(Into::into),
        ..Default::default()
    };
    let t = Instant::now();
    let out = train(&model, &mut store, tr, &cfg, &opts);
    let log = match out {
        Ok(o) => o.log,
        Err(e) => {
            println!("train error: {e}");
            return;
        }
    };
    let k = (steps as usize / 10).max(1);
    for chunk in log.chunks(k) {
        let m = |f: &dyn Fn(&ume::train::StepLog) -> Option<f64>| {
            let v: Vec<f64> = chunk.iter().filter_map(f).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        println!(
            "step {:5} all {:8.3} diar {:6.3} sep {:8.3} asr {:7.3}",
            chunk[0].step,
            m(&|l| Some(l.losses.all)),
            m(&|l| l.losses.diar),
            m(&|l| l.losses.sep),
            m(&|l| l.losses.asr)
        );
    }
    println!("train time {:?}", t.elapsed());
    let t = Instant::now();
    let r = evaluate(&model, &store, ev, &EvalConfig::default(), false).unwrap();
    let a = &r.aggregate;
    println!(
        "eval DER {:?} SI-SNRi {:?} WER {:?} ({:?})",
        a.der
            .as_ref()
            .map(|d| d.iter().map(|(k, v)| format!("{k}:{:.4}", v.der)).collect::<Vec<_>>()),
        a.si_snri,
        a.wer,
        t.elapsed()
    );
}
