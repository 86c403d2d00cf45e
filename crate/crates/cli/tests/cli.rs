use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;
use ume::dataset::{read_wav, write_wav};
use ume::metrics::parse_rttm;
use ume_tensor::checkpoint::Checkpoint;

fn tiny_config() -> Value {
    json!({
        "data": {"num_items": 6, "tokens_per_utterance": [5, 6], "seed": 3},
        "model": {
            "encoder": {"layers": 2, "d_model": 16, "heads": 2, "ff_dim": 32},
            "sep": {"filters": 16, "bottleneck": 16, "hidden": 16, "blocks": 1, "layers_per_block": 2},
            "asr": {"d_model": 16, "heads": 2, "ff_dim": 32, "encoder_blocks": 1, "decoder_blocks": 1}
        },
        "train": {"steps": 20, "batch_size": 2, "warmup_steps": 5, "lr": 0.002, "checkpoint_every": 10}
    })
}

fn with(mut base: Value, section: &str, key: &str, v: Value) -> Value {
    base[section][key] = v;
    base
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn ume(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ume")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, cfg: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(ume(&["gen", "--config", s(cfg), "--out", s(&out)]));
    out
}

fn loss_rows(run: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(run.join("loss.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn gen_counts_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        &with(tiny_config(), "data", "num_items", json!(10)),
    );
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let stdout = ok(ume(&["gen", "--config", s(&cfg), "--out", s(&a), "--seed", "9"]));
    assert!(stdout.starts_with("10 items"), "{stdout}");
    ok(ume(&["gen", "--config", s(&cfg), "--out", s(&b), "--seed", "9"]));
    let manifest = fs::read(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest, fs::read(b.join("manifest.jsonl")).unwrap());
    assert_eq!(String::from_utf8(manifest).unwrap().lines().count(), 10);
    let wavs = fs::read_dir(&a)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count();
    assert_eq!(wavs, 10 * 3);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &with(tiny_config(), "data", "speakers", json!(5)));
    let out = ume(&["gen", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.speakers"));
    assert!(!tmp.path().join("d").exists(), "nothing written on config errors");
    let mut bad = tiny_config();
    bad["train"]["weights"] = json!({"diar": 0.5, "sep": "x", "asr": 0.5});
    let cfg = write_config(tmp.path(), "bad.json", &bad);
    let out = ume(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        "nowhere",
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.weights.sep"));
    let good = write_config(tmp.path(), "good.json", &tiny_config());
    let out = Command::new(env!("CARGO_BIN_EXE_ume"))
        .args(["gen", "--config", s(&good), "--out", s(&tmp.path().join("e"))])
        .env("UME_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_smoke_resume_and_fusion_parameter_sets() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(tmp.path(), "c.json", &tiny_config());
    let data = gen(tmp.path(), &cfg_path);
    let run = tmp.path().join("run");
    ok(ume(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]));
    assert!(run.join("step000010.ckpt").is_file() && run.join("step000020.ckpt").is_file());
    let full = loss_rows(&run);
    assert_eq!(full.len(), 20);

    // resuming from step 10 reproduces the remaining log exactly
    let resumed = tmp.path().join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    let ck = run.join("step000010.ckpt");
    ok(ume(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&ck),
    ]));
    assert_eq!(loss_rows(&resumed), full[10..].to_vec());

    let mut names = Vec::new();
    for mode in ["none", "weighted_sum", "rwse"] {
        let mut c = with(tiny_config(), "train", "steps", json!(1));
        c["train"]["warmup_steps"] = json!(0);
        c["model"]["fusion"] = json!(mode);
        let p = write_config(tmp.path(), &format!("{mode}.json"), &c);
        let out = tmp.path().join(mode);
        ok(ume(&["train", "--config", s(&p), "--data", s(&data), "--out", s(&out)]));
        let ck = Checkpoint::load(&out.join("step000001.ckpt")).unwrap();
        names.push(ck.param_names().map(String::from).collect::<Vec<_>>());
    }
    assert!(names[0] != names[1] && names[1] != names[2] && names[0] != names[2]);
    assert!(names[2].iter().any(|n| n.contains("rwse") || n.contains("fusion")));
}

#[test]
fn asr_init_lowers_the_first_asr_loss() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = write_config(
        tmp.path(),
        "c.json",
        &with(tiny_config(), "train", "checkpoint_every", json!(0)),
    );
    let data = gen(tmp.path(), &cfg_path);
    let pre = tmp.path().join("pre");
    ok(ume(&[
        "pretrain-asr",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&pre),
    ]));
    let pre_rows = loss_rows(&pre);
    assert!(pre_rows.iter().all(|r| r[3].is_empty() && r[4].is_empty()));
    let flat = tmp.path().join("flat");
    let init = tmp.path().join("init");
    ok(ume(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&flat),
    ]));
    let stdout = ok(ume(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&init),
        "--init-asr",
        s(&pre.join("step000020.ckpt")),
    ]));
    assert!(stdout.contains("initialized"), "{stdout}");
    let l = |run: &Path| loss_rows(run)[0][5].parse::<f64>().unwrap();
    assert!(l(&init) < l(&flat), "init {} vs flat {}", l(&init), l(&flat));
}

#[test]
fn divergence_exits_3() {
    let tmp = TempDir::new().unwrap();
    let mut c = tiny_config();
    c["train"]["lr"] = json!(5.0);
    c["train"]["warmup_steps"] = json!(0);
    c["train"]["divergence"] = json!({"window": 1, "factor": 1.5, "floor": 0.0, "min_history": 1});
    let cfg_path = write_config(tmp.path(), "c.json", &c);
    let data = gen(tmp.path(), &cfg_path);
    let out = ume(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at step"));
}

#[test]
fn eval_oracle_collars_and_infer() {
    let tmp = TempDir::new().unwrap();
    let c = with(tiny_config(), "train", "steps", json!(5));
    let cfg_path = write_config(tmp.path(), "c.json", &with(c, "train", "checkpoint_every", json!(0)));
    let data = gen(tmp.path(), &cfg_path);
    let run = tmp.path().join("run");
    ok(ume(&[
        "train",
        "--config",
        s(&cfg_path),
        "--data",
        s(&data),
        "--out",
        s(&run),
    ]));
    let ck = run.join("step000005.ckpt");

    let oracle = tmp.path().join("oracle");
    ok(ume(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&oracle),
        "--oracle",
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(oracle.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["der"]["0.00"]["der"], 0.0);
    assert_eq!(report["aggregate"]["wer"], 0.0);
    assert!(report["per_item"].as_array().unwrap().iter().all(|i| i["si_snr"]
        .as_array()
        .unwrap()
        .iter()
        .all(|v| v == "+inf")));
    assert!(oracle.join("report.csv").is_file());

    let model = tmp.path().join("model");
    ok(ume(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&model),
        "--collar",
        "0",
        "--collar",
        "0.25",
        "--median",
        "11",
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(model.join("report.json")).unwrap()).unwrap();
    for item in report["per_item"].as_array().unwrap() {
        let d0 = item["der"]["0.00"]["der"].as_f64().unwrap();
        let d25 = item["der"]["0.25"]["der"].as_f64().unwrap();
        assert!(d25 <= d0);
    }
    let subset = tmp.path().join("subset");
    ok(ume(&[
        "eval",
        "--ckpt",
        s(&ck),
        "--data",
        s(&data),
        "--out",
        s(&subset),
        "--tasks",
        "asr",
    ]));
    let report: Value = serde_json::from_str(&fs::read_to_string(subset.join("report.json")).unwrap()).unwrap();
    assert!(report["aggregate"].get("der").is_none() && report["aggregate"]["wer"].is_number());

    let wav = data.join("mix00000_mix.wav");
    let (input, sr) = read_wav(&wav).unwrap();
    let a = tmp.path().join("inf_a");
    let b = tmp.path().join("inf_b");
    ok(ume(&["infer", "--ckpt", s(&ck), "--wav", s(&wav), "--out", s(&a)]));
    ok(ume(&["infer", "--ckpt", s(&ck), "--wav", s(&wav), "--out", s(&b)]));
    for c in 1..=2 {
        let (est, esr) = read_wav(&a.join(format!("mix00000_mix_est{c}.wav"))).unwrap();
        assert_eq!((est.len(), esr), (input.len(), sr));
    }
    assert!(!a.join("mix00000_mix_est3.wav").exists());
    let rttm = fs::read_to_string(a.join("mix00000_mix.rttm")).unwrap();
    let dur = input.len() as f64 / sr as f64;
    for seg in parse_rttm(&rttm).unwrap() {
        assert!(seg.onset_s >= 0.0 && seg.onset_s + seg.duration_s <= dur + 1e-9);
    }
    for name in [
        "mix00000_mix_est1.wav",
        "mix00000_mix_est2.wav",
        "mix00000_mix.rttm",
        "mix00000_mix.hyp.json",
    ] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }

    let wrong = tmp.path().join("wrong.wav");
    write_wav(&wrong, &input, 8000).unwrap();
    let out = ume(&[
        "infer",
        "--ckpt",
        s(&ck),
        "--wav",
        s(&wrong),
        "--out",
        s(&tmp.path().join("w")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("2000 Hz"));
}
