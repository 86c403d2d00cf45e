//! Multi-task training: the weighted total loss, the warmup schedule, the
//! optimizer loop with checkpointing and resume, and the divergence guard.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use ume_tensor::checkpoint::Checkpoint;
use ume_tensor::rng::seeded;
use ume_tensor::{AdamW, Graph, ParamStore, Var};

use crate::encoder::Task;
use crate::error::{invalid, Result, UmeError};
use crate::model::{head_prefix, Heads, ModelConfig, UmeModel};
use crate::nn::Ctx;
use crate::perm::is_identity;
use crate::sim::MixtureSample;

pub const LOSS_LOG: &str = "loss.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub diar: f64,
    pub sep: f64,
    pub asr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diar: 0.33,
            sep: 0.34,
            asr: 0.33,
        }
    }
}

impl LossWeights {
    pub fn only(task: Task) -> Self {
        let mut w = Self {
            diar: 0.0,
            sep: 0.0,
            asr: 0.0,
        };
        *w.get_mut(task) = 1.0;
        w
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Diar => self.diar,
            Task::Sep => self.sep,
            Task::Asr => self.asr,
        }
    }

    fn get_mut(&mut self, task: Task) -> &mut f64 {
        match task {
            Task::Diar => &mut self.diar,
            Task::Sep => &mut self.sep,
            Task::Asr => &mut self.asr,
        }
    }

    /// Heads with a positive weight; the others are never evaluated.
    pub fn heads(&self) -> Heads {
        Heads {
            diar: self.diar > 0.0,
            sep: self.sep > 0.0,
            asr: self.asr > 0.0,
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        for task in Task::ALL {
            let w = self.get(task);
            if !(w.is_finite() && w >= 0.0) {
                return Err(UmeError::config(
                    format!("{prefix}.{}", task.name()),
                    format!("must be a finite non-negative number, got {w}"),
                ));
            }
        }
        if Task::ALL.iter().all(|&t| self.get(t) == 0.0) {
            return Err(UmeError::config(prefix, "at least one weight must be positive"));
        }
        Ok(())
    }
}

/// Where the parameters of a run start from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Flat,
    /// Encoder, fusion and ASR head from a pretraining checkpoint; the
    /// diarization and separation heads keep their fresh values.
    AsrCheckpoint(PathBuf),
}

/// Aborts when `L_all` is not finite or exceeds its trailing median `m` by
/// more than `(factor − 1)·max(|m|, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceGuard {
    pub window: usize,
    pub factor: f64,
    pub floor: f64,
    /// Steps of history required before the ratio test applies.
    pub min_history: usize,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self {
            window: 100,
            factor: 10.0,
            floor: 1.0,
            min_history: 10,
        }
    }
}

impl DivergenceGuard {
    pub fn triggered(&self, history: &[f64], loss: f64) -> bool {
        if !loss.is_finite() {
            return true;
        }
        if history.len() < self.min_history.max(1) {
            return false;
        }
        let tail = &history[history.len().saturating_sub(self.window)..];
        let m = median(tail);
        loss - m > (self.factor - 1.0) * m.abs().max(self.floor)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub init: InitMode,
    /// Save every this many steps (0: only the final step).
    pub checkpoint_every: u64,
    pub divergence: DivergenceGuard,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 4e-4,
            warmup_steps: 500,
            weight_decay: 1e-6,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            init: InitMode::Flat,
            checkpoint_every: 0,
            divergence: DivergenceGuard::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let p = |f: &str| format!("{prefix}.{f}");
        if self.steps == 0 {
            return Err(UmeError::config(p("steps"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(UmeError::config(p("batch_size"), "must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(UmeError::config(p("lr"), "must be finite and non-negative"));
        }
        if self.warmup_steps > self.steps {
            return Err(UmeError::config(
                p("warmup_steps"),
                format!("must not exceed steps ({} > {})", self.warmup_steps, self.steps),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(UmeError::config(p("weight_decay"), "must be finite and non-negative"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(UmeError::config(p("betas"), "each beta must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(UmeError::config(p("adam_eps"), "must be positive"));
        }
        if self.divergence.window == 0 || !(self.divergence.factor > 1.0) || !(self.divergence.floor >= 0.0) {
            return Err(UmeError::config(
                p("divergence"),
                "window must be positive, factor > 1 and floor ≥ 0",
            ));
        }
        self.weights.validate(&p("weights"))
    }

    pub fn optimizer(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            betas: (self.betas[0], self.betas[1]),
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then `peak·sqrt(warmup/step)`.
pub fn lr_schedule(step: u64, peak: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return peak;
    }
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

/// Scalar values of one batch's losses. A task with zero weight is absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskLossBundle {
    pub diar: Option<f64>,
    pub sep: Option<f64>,
    pub asr: Option<f64>,
    pub all: f64,
    /// Chosen assignment per item, per task.
    pub perms: [Vec<Vec<usize>>; 3],
    /// Items left out of the ASR mean because no assignment was CTC-feasible.
    pub asr_skipped: usize,
}

impl TaskLossBundle {
    pub fn get(&self, task: Task) -> Option<f64> {
        match task {
            Task::Diar => self.diar,
            Task::Sep => self.sep,
            Task::Asr => self.asr,
        }
    }

    /// `Σ λ_t·L_t` over present tasks, accumulated in the order diar, sep, asr.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        let mut acc: Option<f64> = None;
        for task in Task::ALL {
            if let Some(l) = self.get(task) {
                let term = l * w.get(task);
                acc = Some(acc.map_or(term, |a| a + term));
            }
        }
        acc.unwrap_or(0.0)
    }

    /// Items whose chosen assignment differs from the identity.
    pub fn perm_switches(&self, task: Task) -> usize {
        self.perms[task.index()].iter().filter(|p| !is_identity(p)).count()
    }
}

/// Records `L_all` for a batch: per-task means over items, then the weighted
/// sum. Tasks with zero weight are not evaluated at all.
pub fn total_loss(
    cx: Ctx,
    model: &UmeModel,
    batch: &[&MixtureSample],
    weights: &LossWeights,
) -> Result<(Var, TaskLossBundle)> {
    if batch.is_empty() {
        return Err(invalid("total_loss: empty batch"));
    }
    let g = cx.g;
    let heads = weights.heads();
    let mut per_task: [Vec<Var>; 3] = Default::default();
    let mut bundle = TaskLossBundle::default();
    for item in batch {
        let l = model.item_losses(cx, item, heads)?;
        if let Some((v, p)) = l.diar {
            per_task[Task::Diar.index()].push(v);
            bundle.perms[Task::Diar.index()].push(p);
        }
        if let Some((v, p)) = l.sep {
            per_task[Task::Sep.index()].push(v);
            bundle.perms[Task::Sep.index()].push(p);
        }
        match l.asr {
            Some(Some(a)) => {
                per_task[Task::Asr.index()].push(a.loss);
                bundle.perms[Task::Asr.index()].push(a.perm);
            }
            Some(None) => bundle.asr_skipped += 1,
            None => {}
        }
    }
    if heads.asr && per_task[Task::Asr.index()].is_empty() {
        return Err(UmeError::AllItemsSkipped);
    }
    let mut all: Option<Var> = None;
    for task in Task::ALL {
        let vars = &per_task[task.index()];
        if vars.is_empty() {
            continue;
        }
        let mut sum = vars[0];
        for &v in &vars[1..] {
            sum = g.add(sum, v)?;
        }
        let mean = g.scale(sum, 1.0 / vars.len() as f64)?;
        let value = g.item(mean)?;
        match task {
            Task::Diar => bundle.diar = Some(value),
            Task::Sep => bundle.sep = Some(value),
            Task::Asr => bundle.asr = Some(value),
        }
        let term = g.scale(mean, weights.get(task))?;
        all = Some(match all {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let all = all.expect("at least one weight is positive");
    bundle.all = g.item(all)?;
    Ok((all, bundle))
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub losses: TaskLossBundle,
}

impl StepLog {
    pub const HEADER: &'static str =
        "step,lr,L_all,L_diar,L_sep,L_asr,diar_perm_switches,sep_perm_switches,asr_perm_switches,asr_skipped";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.lr,
            l.all,
            opt(l.diar),
            opt(l.sep),
            opt(l.asr),
            l.perm_switches(Task::Diar),
            l.perm_switches(Task::Sep),
            l.perm_switches(Task::Asr),
            l.asr_skipped
        )
    }
}

/// Deterministic batch order: each epoch is a fresh shuffle of the dataset
/// seeded from the run seed and the epoch index.
#[derive(Debug, Clone)]
pub struct BatchOrder {
    len: usize,
    seed: u64,
    cache: Vec<Vec<usize>>,
}

impl BatchOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        Self {
            len,
            seed,
            cache: Vec::new(),
        }
    }

    fn epoch(&mut self, e: usize) -> &[usize] {
        while self.cache.len() <= e {
            let k = self.cache.len();
            let mut order: Vec<usize> = (0..self.len).collect();
            order.shuffle(&mut seeded(self.seed, 100 + k as u64));
            self.cache.push(order);
        }
        &self.cache[e]
    }

    /// Dataset indices of the batch used at 1-based `step`.
    pub fn batch(&mut self, step: u64, batch_size: usize) -> Vec<usize> {
        let start = (step - 1) as usize * batch_size;
        let n = self.len;
        (start..start + batch_size).map(|p| self.epoch(p / n)[p % n]).collect()
    }
}

/// Header metadata stored with every training checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: u64,
    pub weights: LossWeights,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:06}.ckpt")
}

pub fn save_checkpoint(
    path: &Path,
    model: &UmeModel,
    store: &ParamStore,
    step: u64,
    weights: &LossWeights,
) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        step,
        weights: *weights,
    };
    let meta = serde_json::to_value(meta).map_err(|e| invalid(format!("checkpoint meta: {e}")))?;
    Checkpoint::from_store(store, meta, true).save(path)?;
    Ok(())
}

/// Rebuilds the model recorded in a checkpoint and loads every parameter,
/// with optimizer state.
pub fn load_checkpoint(path: &Path) -> Result<(UmeModel, ParamStore, CheckpointMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
        .map_err(|e| invalid(format!("{}: unreadable checkpoint metadata: {e}", path.display())))?;
    let (model, mut store) = UmeModel::new(&meta.model, 0)?;
    let loaded = ck.restore_into(&mut store, |_| true, true)?;
    if loaded.len() != store.len() {
        let missing: Vec<&str> = store.names().filter(|n| !loaded.iter().any(|l| l == n)).collect();
        return Err(invalid(format!(
            "{}: checkpoint lacks parameters: {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok((model, store, meta))
}

/// Copies encoder, fusion and ASR-head values from a pretraining checkpoint;
/// optimizer state starts fresh. Returns the loaded names.
pub fn init_from_asr(store: &mut ParamStore, path: &Path) -> Result<Vec<String>> {
    let ck = Checkpoint::load(path)?;
    let skip = [head_prefix(Task::Diar), head_prefix(Task::Sep)];
    let loaded = ck.restore_into(store, |n| !skip.iter().any(|p| n.starts_with(p)), false)?;
    if loaded.is_empty() {
        return Err(invalid(format!("{}: no parameters matched the model", path.display())));
    }
    Ok(loaded)
}

/// Settings of a pretraining run: the same schedule with ASR weight only.
pub fn pretrain_asr_config(cfg: &TrainConfig) -> TrainConfig {
    TrainConfig {
        weights: LossWeights::only(Task::Asr),
        init: InitMode::Flat,
        ..cfg.clone()
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and the loss log; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
    /// Number of steps already taken (resume); training continues at the
    /// next step.
    pub start_step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

struct LossLog {
    path: PathBuf,
    w: BufWriter<File>,
}

impl LossLog {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let path = dir.join(LOSS_LOG);
        let exists = path.exists();
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| UmeError::io(&path, e))?;
        let mut log = Self {
            w: BufWriter::new(f),
            path,
        };
        if !(append && exists) {
            log.line(StepLog::HEADER)?;
        }
        Ok(log)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}")
            .and_then(|_| self.w.flush())
            .map_err(|e| UmeError::io(&self.path, e))
    }
}

/// Runs steps `start_step + 1 ..= cfg.steps`. Each step draws a batch, records
/// `L_all`, checks the divergence guard, back-propagates and applies AdamW
/// with the scheduled rate to every parameter that received a gradient.
pub fn train(
    model: &UmeModel,
    store: &mut ParamStore,
    data: &[MixtureSample],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate("train")?;
    if data.is_empty() {
        return Err(invalid("train: dataset is empty"));
    }
    if let Some(bad) = data.iter().find(|s| s.speakers() != model.cfg.speakers) {
        return Err(invalid(format!(
            "train: item {} has {} speakers, model expects {}",
            bad.id,
            bad.speakers(),
            model.cfg.speakers
        )));
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| UmeError::io(dir, e))?;
            Some(LossLog::open(dir, opts.start_step > 0)?)
        }
        None => None,
    };
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    let mut out = TrainOutcome::default();
    let mut history: Vec<f64> = Vec::new();
    for step in opts.start_step + 1..=cfg.steps {
        let lr = lr_schedule(step, cfg.lr, cfg.warmup_steps);
        let batch: Vec<&MixtureSample> = order
            .batch(step, cfg.batch_size)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        store.zero_grad();
        let g = Graph::new();
        let (loss, losses) = total_loss(Ctx::new(&g, store), model, &batch, &cfg.weights)?;
        if losses.recombine(&cfg.weights).to_bits() != losses.all.to_bits() && losses.all.is_finite() {
            return Err(invalid(format!(
                "step {step}: L_all differs from the weighted task losses"
            )));
        }
        let entry = StepLog { step, lr, losses };
        if let Some(l) = &mut log {
            l.line(&entry.csv_row())?;
        }
        let l_all = entry.losses.all;
        out.log.push(entry);
        if cfg.divergence.triggered(&history, l_all) {
            return Err(UmeError::Diverged { step, loss: l_all });
        }
        history.push(l_all);
        g.backward(loss, store)?;
        let ids = store.with_grad();
        cfg.optimizer(lr).step(store, &ids)?;
        store.zero_grad();
        let save = step == cfg.steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0);
        if let (Some(dir), true) = (&opts.out_dir, save) {
            let path = dir.join(checkpoint_name(step));
            save_checkpoint(&path, model, store, step, &cfg.weights)?;
            out.checkpoints.push(path);
        }
    }
    Ok(out)
}

/// Loss bundle of a batch without touching parameters.
pub fn evaluate_losses(
    model: &UmeModel,
    store: &ParamStore,
    batch: &[&MixtureSample],
    weights: &LossWeights,
) -> Result<TaskLossBundle> {
    let g = Graph::new();
    Ok(total_loss(Ctx::new(&g, store), model, batch, weights)?.1)
}
