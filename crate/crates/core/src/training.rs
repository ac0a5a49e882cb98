//! Nesterov-accelerated Adam and the corruption curriculum loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionSpec;
use crate::datagen::{Dataset, Split};
use crate::error::{PaeError, Result};
use crate::model::{self, ModelConfig, PaeModel};
use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NadamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_decay: 4e-3,
        }
    }
}

impl NadamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.momentum_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(PaeError::Parameter(format!("optimizer settings out of range: {self:?}")))
        }
    }

    /// Momentum coefficient for step `t` (1-based).
    fn mu(&self, t: u64) -> f64 {
        self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.momentum_decay))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// Product of the momentum coefficients applied so far.
    pub mu_product: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            mu_product: 1.0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }
}

/// One Nadam update from the gradients stored on `params`. Every tensor
/// must carry a gradient.
pub fn nadam_step(params: &mut [Tensor], state: &mut OptimizerState, cfg: &NadamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(PaeError::Contract(format!(
            "optimizer tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(PaeError::Contract(format!("parameter {i} has no gradient")));
    }
    let t = state.step + 1;
    let mu = cfg.mu(t);
    let mu_next = cfg.mu(t + 1);
    let mu_product = state.mu_product * mu;
    let mu_product_next = mu_product * mu_next;
    let bias2 = 1.0 - cfg.beta2.powf(t as f64);
    let grad_coef = cfg.lr * (1.0 - mu) / (1.0 - mu_product);
    let mom_coef = cfg.lr * mu_next / (1.0 - mu_product_next);

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad().expect("checked above").to_vec();
        if m.len() != g.len() {
            return Err(PaeError::shape("nadam_step", p.shape(), &[m.len()]));
        }
        for (((theta, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let denom = (*v / bias2).sqrt() + cfg.eps;
            *theta -= grad_coef * g / denom + mom_coef * *m / denom;
        }
    }
    state.step = t;
    state.mu_product = mu_product;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct CurriculumStage {
    pub snr_db: f64,
    pub mask_ratio: f64,
}

impl From<[f64; 2]> for CurriculumStage {
    fn from([snr_db, mask_ratio]: [f64; 2]) -> Self {
        Self { snr_db, mask_ratio }
    }
}

impl From<CurriculumStage> for [f64; 2] {
    fn from(s: CurriculumStage) -> Self {
        [s.snr_db, s.mask_ratio]
    }
}

/// High-to-low interference, then two repeats of the focus level.
pub fn default_schedule() -> Vec<CurriculumStage> {
    [20.0, 30.0, 40.0, 35.0, 35.0]
        .into_iter()
        .zip([0.40, 0.25, 0.10, 0.20, 0.20])
        .map(|(snr_db, mask_ratio)| CurriculumStage { snr_db, mask_ratio })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopUnit {
    #[default]
    Step,
    Epoch,
}

fn default_batch_size() -> usize {
    16
}
fn default_max_steps() -> u64 {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: NadamConfig,
    #[serde(default = "default_schedule")]
    pub schedule: Vec<CurriculumStage>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub stop_unit: StopUnit,
    /// Steps between periodic checkpoints; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset_dir: dataset_dir.into(),
            model: ModelConfig::default(),
            optimizer: NadamConfig::default(),
            schedule: default_schedule(),
            batch_size: default_batch_size(),
            max_steps: default_max_steps(),
            stop_unit: StopUnit::Step,
            checkpoint_every: 0,
            seed: 0,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.schedule.is_empty() {
            return Err(PaeError::Parameter("schedule must not be empty".into()));
        }
        for (i, s) in self.schedule.iter().enumerate() {
            CorruptionSpec::new(s.snr_db, s.mask_ratio, 0)
                .map_err(|e| PaeError::Parameter(format!("schedule[{i}]: {e}")))?;
        }
        if self.batch_size == 0 {
            return Err(PaeError::Parameter("batch_size must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(PaeError::Parameter("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Cuts a `[channels × samples]` model window out of a full transient:
/// the first `cfg.channels` channels, evenly decimated to `cfg.samples`.
pub fn fit_window(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if cfg.channels > rows || cfg.samples > cols || cols % cfg.samples != 0 {
        return Err(PaeError::Mismatch(format!(
            "model expects {}×{} windows, data is {rows}×{cols}",
            cfg.channels, cfg.samples
        )));
    }
    if (rows, cols) == (cfg.channels, cfg.samples) {
        return Ok(x.clone());
    }
    let stride = cols / cfg.samples;
    let data = (0..cfg.channels)
        .flat_map(|c| x.row(c).iter().step_by(stride).copied())
        .collect();
    Tensor::matrix(cfg.channels, cfg.samples, data)
}

/// Normalized model windows for the given transients.
pub fn windows(dataset: &Dataset, indices: &[usize], cfg: &ModelConfig) -> Result<Vec<Tensor>> {
    indices
        .iter()
        .map(|&i| fit_window(&dataset.normalized(i)?, cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub epoch: u64,
    pub stage: usize,
    pub batch: usize,
    pub snr_db: f64,
    pub mask_ratio: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,stage,snr_db,mask_ratio,loss\n");
        for e in &self.entries {
            writeln!(s, "{},{},{},{},{},{}", e.step, e.epoch, e.stage, e.snr_db, e.mask_ratio, e.loss).unwrap();
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }
}

/// Order in which an epoch visits the training windows.
pub fn epoch_order(count: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng::substream(seed, &[0xe0, epoch]));
    order
}

/// Corruption for member `k` of the batch taken at `step`.
pub fn sample_spec(seed: u64, step: u64, k: usize, stage: &CurriculumStage) -> CorruptionSpec {
    CorruptionSpec {
        snr_db: stage.snr_db,
        mask_ratio: stage.mask_ratio,
        seed: rng::derive(seed, &[0x5e, step, k as u64]),
    }
}

/// Mean training loss and mean gradients over a batch. Members run in
/// parallel; the reduction is in member order so results do not depend on
/// the thread count.
pub fn batch_loss(
    model: &PaeModel,
    batch: &[&Tensor],
    stage: &CurriculumStage,
    seed: u64,
    step: u64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .enumerate()
        .map(|(k, x)| model.loss_and_grads(x, &sample_spec(seed, step, k, stage)))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (l, g) in &per_sample {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|v| *v *= scale);
    Ok((loss * scale, grads))
}

/// Mutable training state threaded through epochs.
pub struct Session {
    pub model: PaeModel,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
    pub epoch: u64,
}

impl Session {
    pub fn new(model: PaeModel) -> Self {
        let optimizer = OptimizerState::new(model.params.tensors());
        Self {
            model,
            optimizer,
            log: TrainLog::default(),
            epoch: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }
}

/// Per-step callback, run after each optimizer update.
pub type StepHook<'h> = dyn FnMut(&Session) -> Result<()> + 'h;

/// One pass of every stage over every training batch. Stops early once
/// `step_limit` optimizer steps have been taken in total.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    session: &mut Session,
    train: &[Tensor],
    schedule: &[CurriculumStage],
    batch_size: usize,
    optimizer: &NadamConfig,
    seed: u64,
    step_limit: Option<u64>,
    hook: &mut StepHook<'_>,
) -> Result<()> {
    if schedule.is_empty() {
        return Err(PaeError::Contract("empty curriculum schedule".into()));
    }
    if train.is_empty() {
        return Err(PaeError::Contract("empty training split".into()));
    }
    if batch_size == 0 {
        return Err(PaeError::Contract("batch_size must be positive".into()));
    }
    let epoch = session.epoch;
    let order = epoch_order(train.len(), seed, epoch);
    for (stage_idx, stage) in schedule.iter().enumerate() {
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            if step_limit.is_some_and(|lim| session.step() >= lim) {
                return Ok(());
            }
            let step = session.step() + 1;
            let members: Vec<&Tensor> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_loss(&session.model, &members, stage, seed, step)?;
            if !loss.is_finite() {
                return Err(PaeError::Numeric {
                    stage: format!("training loss at step {step}"),
                });
            }
            let params = session.model.params.tensors_mut();
            for (p, g) in params.iter_mut().zip(&grads) {
                p.zero_grad();
                p.accumulate_grad(g)?;
            }
            nadam_step(params, &mut session.optimizer, optimizer)?;
            params.iter_mut().for_each(Tensor::zero_grad);
            session.log.entries.push(LogEntry {
                step,
                epoch,
                stage: stage_idx,
                batch: batch_idx,
                snr_db: stage.snr_db,
                mask_ratio: stage.mask_ratio,
                loss,
            });
            hook(session)?;
        }
    }
    session.epoch += 1;
    Ok(())
}

/// In-memory training loop; the hook sees the session after every step.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset, hook: &mut StepHook<'_>) -> Result<Session> {
    cfg.validate()?;
    let train = windows(dataset, &dataset.indices(Split::Train), &cfg.model)?;
    let model = PaeModel::init(cfg.model.clone(), rng::derive(cfg.seed, &[0x1a]))?;
    let mut session = Session::new(model);
    loop {
        let done = match cfg.stop_unit {
            StopUnit::Step => session.step() >= cfg.max_steps,
            StopUnit::Epoch => session.epoch >= cfg.max_steps,
        };
        if done {
            break;
        }
        let limit = (cfg.stop_unit == StopUnit::Step).then_some(cfg.max_steps);
        run_epoch(
            &mut session,
            &train,
            &cfg.schedule,
            cfg.batch_size,
            &cfg.optimizer,
            cfg.seed,
            limit,
            hook,
        )?;
    }
    Ok(session)
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("step_{step:06}.ckpt"))
}

pub struct TrainOutcome {
    pub session: Session,
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

/// [`fit`] plus artifacts: periodic checkpoints, `final.ckpt` and
/// `train_log.csv` under `cfg.out_dir`.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PaeError::io(&cfg.out_dir, e))?;
    let mut checkpoints = Vec::new();
    let every = cfg.checkpoint_every;
    let mut hook = |s: &Session| -> Result<()> {
        if every > 0 && s.step() % every == 0 {
            let path = checkpoint_path(&cfg.out_dir, s.step());
            model::save(&s.model, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    };
    let session = fit(cfg, dataset, &mut hook)?;
    let final_checkpoint = cfg.out_dir.join("final.ckpt");
    model::save(&session.model, &final_checkpoint)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    fs::write(&log_path, session.log.to_csv()).map_err(|e| PaeError::io(&log_path, e))?;
    Ok(TrainOutcome {
        session,
        final_checkpoint,
        checkpoints,
        log_path,
    })
}
