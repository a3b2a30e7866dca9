//! Optimization loop: learning-rate schedule, decoupled-weight-decay adaptive
//! moments, per-step mask plans, metrics rows, checkpointing, and resume.
//!
//! Determinism contract: every random choice derives from the run seed and a
//! position — parameters from the seed alone, the epoch-e shuffle from
//! `(seed, epoch)`, step-s mask plans from `(seed, step)` — so a state
//! rebuilt from a checkpoint continues bit-exactly, with no generator state
//! to persist.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{CsmaeModel, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::masking::{make_mask_plan, masked_count, CorrespondenceMode, MaskingOptions};
use crate::objectives::{build_batch_loss, BatchLoss, LossBreakdown, LossOptions};
use crate::rngutil::{derive_seed, SeedDomain};

/// Everything a training run depends on besides the dataset itself. Resume
/// requires the stored and current values to be equal field-for-field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    /// Maximum global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Epochs between checkpoint snapshots; 0 keeps only the final file.
    pub checkpoint_every: usize,
    pub model: ModelConfig,
    pub masking: MaskingOptions,
    pub loss: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            base_lr: 1e-4,
            warmup_epochs: 10,
            betas: (0.9, 0.95),
            weight_decay: 0.05,
            eps: 1e-8,
            grad_clip: 0.0,
            seed: 42,
            checkpoint_every: 0,
            model: ModelConfig::base(),
            masking: MaskingOptions::default(),
            loss: LossOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        // Surfaces degenerate ratios up front rather than at the first step.
        let m = masked_count(self.masking.ratio, self.model.n_patches())?;
        if self.masking.mode == CorrespondenceMode::Disjoint && 2 * m > self.model.n_patches()
        {
            return Err(Error::infeasible(format!(
                "disjoint masking needs 2x{m} masked patches out of {}",
                self.model.n_patches()
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !self.loss.flags.any_enabled() {
            return Err(Error::config("no loss terms enabled"));
        }
        if self.loss.flags.use_mim {
            if self.batch_size < 2 {
                return Err(Error::config("mim needs batch_size of at least 2"));
            }
            if !(self.loss.tau.is_finite() && self.loss.tau > 0.0) {
                return Err(Error::config(format!(
                    "temperature must be positive, got {}",
                    self.loss.tau
                )));
            }
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(b.is_finite() && (0.0..1.0).contains(&b)) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::config(format!(
                "grad_clip must be finite and >= 0 (0 disables), got {}",
                self.grad_clip
            )));
        }
        Ok(())
    }
}

/// Learning rate at an optimizer step: linear ramp from 0 to `base_lr` over
/// the warmup, then cosine decay to 0 at `total_steps`.
pub fn lr_at_step(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else if total_steps == warmup_steps {
        base_lr
    } else {
        let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// A run's schedule parameters, fixed once the dataset size is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub base_lr: f64,
}

impl LrSchedule {
    pub fn for_run(cfg: &TrainConfig, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            warmup_steps: (cfg.warmup_epochs * steps_per_epoch) as u64,
            total_steps: (cfg.epochs * steps_per_epoch) as u64,
            base_lr: cfg.base_lr,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        lr_at_step(step, self.total_steps, self.warmup_steps, self.base_lr)
    }
}

/// First and second moments, aligned index-for-index with
/// [`CsmaeModel::params`]. Parameters that receive no gradient in a step are
/// skipped entirely: no moment update and no weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamWState {
    pub fn new(model: &CsmaeModel) -> AdamWState {
        let zeros: Vec<Array2<f64>> =
            model.params().iter().map(|t| Array2::zeros(t.value.dim())).collect();
        AdamWState { m: zeros.clone(), v: zeros }
    }
}

/// One decoupled-weight-decay adaptive-moment update of a single tensor.
/// `t` is the 1-based update index for bias correction.
fn adamw_update_tensor(
    theta: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    t: u64,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    ndarray::Zip::from(theta).and(grad).and(m).and(v).for_each(|th, &g, m, v| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *th -= lr * (weight_decay * *th + m_hat / (v_hat.sqrt() + eps));
    });
}

/// Mutable training state. Fully reconstructible from a checkpoint plus the
/// configuration; holds no generator state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: CsmaeModel,
    pub opt: AdamWState,
    /// Completed optimizer steps.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

const OPT_M_PREFIX: &str = "opt.m.";
const OPT_V_PREFIX: &str = "opt.v.";

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let model = CsmaeModel::init(cfg.model.clone(), cfg.seed)?;
        let opt = AdamWState::new(&model);
        Ok(TrainState { model, opt, step: 0, epoch: 0 })
    }

    /// Snapshot into the checkpoint container: parameters first, then both
    /// moment sets under `opt.m.` / `opt.v.` prefixes.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let config_toml = toml::to_string(cfg)
            .map_err(|e| Error::config(format!("configuration is not serializable: {e}")))?;
        let mut tensors: Vec<_> = self.model.params().to_vec();
        for (prefix, moments) in [(OPT_M_PREFIX, &self.opt.m), (OPT_V_PREFIX, &self.opt.v)] {
            for (t, value) in self.model.params().iter().zip(moments) {
                tensors.push(crate::backbone::NamedTensor {
                    name: format!("{prefix}{}", t.name),
                    value: value.clone(),
                });
            }
        }
        Ok(Checkpoint {
            config_toml,
            step: self.step,
            epoch: self.epoch,
            seed: cfg.seed,
            tensors,
        })
    }

    /// Rebuild state from a checkpoint, requiring the stored configuration to
    /// equal `cfg` exactly.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let stored: TrainConfig = toml::from_str(&ckpt.config_toml)
            .map_err(|e| Error::data(format!("checkpoint carries an unreadable configuration: {e}")))?;
        if &stored != cfg {
            return Err(Error::config(
                "resume requires the exact configuration the checkpoint was written with",
            ));
        }
        if ckpt.seed != cfg.seed {
            return Err(Error::data("checkpoint seed disagrees with its own configuration"));
        }
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for t in &ckpt.tensors {
            if let Some(name) = t.name.strip_prefix(OPT_M_PREFIX) {
                m.push((name.to_string(), t.value.clone()));
            } else if let Some(name) = t.name.strip_prefix(OPT_V_PREFIX) {
                v.push((name.to_string(), t.value.clone()));
            } else {
                params.push(t.clone());
            }
        }
        let model = CsmaeModel::from_parts(cfg.model.clone(), params)?;
        let opt = AdamWState {
            m: align_moments(&model, m, "first")?,
            v: align_moments(&model, v, "second")?,
        };
        Ok(TrainState { model, opt, step: ckpt.step, epoch: ckpt.epoch })
    }
}

fn align_moments(
    model: &CsmaeModel,
    moments: Vec<(String, Array2<f64>)>,
    which: &str,
) -> Result<Vec<Array2<f64>>> {
    if moments.len() != model.params().len() {
        return Err(Error::data(format!(
            "checkpoint holds {} {which}-moment tensors for {} parameters",
            moments.len(),
            model.params().len()
        )));
    }
    moments
        .into_iter()
        .zip(model.params())
        .map(|((name, value), t)| {
            if name != t.name {
                return Err(Error::data(format!(
                    "checkpoint {which}-moment order mismatch: '{name}' where '{}' expected",
                    t.name
                )));
            }
            if value.dim() != t.value.dim() {
                return Err(Error::data(format!(
                    "checkpoint {which} moment '{name}' has shape {:?}, parameter is {:?}",
                    value.dim(),
                    t.value.dim()
                )));
            }
            Ok(value)
        })
        .collect()
}

/// Outcome of one optimizer step, ready to serialize as a metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Optimizer steps completed after this update (1-based).
    pub step: u64,
    pub breakdown: LossBreakdown,
    /// Learning rate the update used.
    pub lr: f64,
}

/// Column header written at the top of every metrics file.
pub const METRICS_HEADER: &str = "# step,umr_1,umr_2,cmr_1,cmr_2,mde,mim,total,lr";

impl StepRecord {
    /// Comma-separated row matching [`METRICS_HEADER`]; absent terms print
    /// as `-`. Floats use the shortest round-trippable decimal form.
    pub fn metrics_row(&self) -> String {
        let mut row = self.step.to_string();
        for (_, value) in self.breakdown.named_terms() {
            row.push(',');
            match value {
                Some(v) => row.push_str(&v.to_string()),
                None => row.push('-'),
            }
        }
        row.push(',');
        row.push_str(&self.breakdown.total.to_string());
        row.push(',');
        row.push_str(&self.lr.to_string());
        row
    }
}

/// One optimizer step: draw fresh mask plans from `(seed, step)`, run the
/// combined objective forward and backward, clip if configured, and apply
/// the update at the scheduled learning rate.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(&Array3<f64>, &Array3<f64>)],
    cfg: &TrainConfig,
    schedule: &LrSchedule,
) -> Result<StepRecord> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedDomain::StepMask, state.step));
    let plans: Result<Vec<_>> = batch
        .iter()
        .map(|_| {
            make_mask_plan(cfg.model.n_patches(), cfg.masking.ratio, cfg.masking.mode, &mut rng)
        })
        .collect();
    let plans = plans?;

    let BatchLoss { mut session, total, breakdown } =
        build_batch_loss(&state.model, batch, &plans, &cfg.loss)?;
    let mut grads = session.graph_mut().backward(total);
    let node_ids: Vec<_> = session.param_nodes().to_vec();
    let mut by_param: Vec<Option<Array2<f64>>> =
        node_ids.iter().map(|&id| grads.take(id)).collect();
    drop(session);

    let norm_sq: f64 = by_param
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    if !norm_sq.is_finite() {
        return Err(Error::numeric("gradient norm is non-finite"));
    }
    if cfg.grad_clip > 0.0 {
        let norm = norm_sq.sqrt();
        if norm > cfg.grad_clip {
            let factor = cfg.grad_clip / norm;
            for g in by_param.iter_mut().flatten() {
                g.mapv_inplace(|v| v * factor);
            }
        }
    }

    let lr = schedule.at(state.step);
    let t = state.step + 1;
    for (i, tensor) in state.model.params_mut().iter_mut().enumerate() {
        if let Some(g) = &by_param[i] {
            adamw_update_tensor(
                &mut tensor.value,
                g,
                &mut state.opt.m[i],
                &mut state.opt.v[i],
                t,
                lr,
                cfg.betas,
                cfg.weight_decay,
                cfg.eps,
            );
        }
    }
    state.step = t;
    Ok(StepRecord { step: state.step, breakdown, lr })
}

/// Artifacts of a completed (or completed-by-resume) run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// Record of the last executed step, if any step ran in this invocation.
    pub last: Option<StepRecord>,
}

/// Run (or continue) training: seeded epoch shuffles, one metrics row per
/// step, snapshots at the configured cadence as `checkpoint_epoch_<e>.bin`,
/// and a final `checkpoint.bin`.
pub fn train(
    cfg: &TrainConfig,
    pairs: &[(Array3<f64>, Array3<f64>)],
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = pairs.len();
    if n == 0 {
        return Err(Error::data("training dataset is empty"));
    }
    if cfg.loss.flags.use_mim && n % cfg.batch_size == 1 {
        return Err(Error::config(format!(
            "the final batch would hold a single pair ({n} pairs at batch_size {}), \
             but mim needs at least 2",
            cfg.batch_size
        )));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = LrSchedule::for_run(cfg, steps_per_epoch);

    let mut state = match resume_from {
        Some(path) => {
            let st = TrainState::from_checkpoint(&Checkpoint::load(path)?, cfg)?;
            if st.step != st.epoch * steps_per_epoch as u64 {
                return Err(Error::data(format!(
                    "checkpoint step {} does not sit on an epoch boundary for {} \
                     steps per epoch — was the dataset changed?",
                    st.step, steps_per_epoch
                )));
            }
            if st.epoch as usize > cfg.epochs {
                return Err(Error::config(format!(
                    "checkpoint has {} completed epochs, run is configured for {}",
                    st.epoch, cfg.epochs
                )));
            }
            st
        }
        None => TrainState::new(cfg)?,
    };

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.txt");
    let checkpoint_path = out_dir.join("checkpoint.bin");
    let mut metrics = if resume_from.is_some() && metrics_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?)
    } else {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        w
    };

    let mut last = None;
    for epoch in state.epoch as usize..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            SeedDomain::EpochShuffle,
            epoch as u64,
        ));
        order.shuffle(&mut rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
            let record = train_step(&mut state, &batch, cfg, &schedule)?;
            writeln!(metrics, "{}", record.metrics_row())?;
            last = Some(record);
        }
        state.epoch = (epoch + 1) as u64;

        let snapshot_due = cfg.checkpoint_every > 0
            && (epoch + 1) % cfg.checkpoint_every == 0
            && epoch + 1 < cfg.epochs;
        if snapshot_due {
            let path = out_dir.join(format!("checkpoint_epoch_{}.bin", epoch + 1));
            state.to_checkpoint(cfg)?.save(&path)?;
        }
    }
    metrics.flush()?;
    state.to_checkpoint(cfg)?.save(&checkpoint_path)?;

    Ok(TrainOutcome { state, metrics_path, checkpoint_path, last })
}

/// Average the objective over a dataset without updating anything. Mask
/// plans derive from `(seed, eval-domain)`, so repeated calls agree bitwise.
/// Batches are taken in dataset order; each term is averaged over batches
/// weighted by batch size.
pub fn evaluate_loss(
    model: &CsmaeModel,
    pairs: &[(Array3<f64>, Array3<f64>)],
    opts: &LossOptions,
    masking: &MaskingOptions,
    seed: u64,
    batch_size: usize,
) -> Result<LossBreakdown> {
    if pairs.is_empty() {
        return Err(Error::data("evaluation dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let n_patches = model.config().n_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SeedDomain::Eval, 0));
    let mut acc: Option<LossBreakdown> = None;
    let mut weight_sum = 0.0;
    for chunk in pairs.chunks(batch_size) {
        let batch: Vec<_> = chunk.iter().map(|(a, b)| (a, b)).collect();
        let plans: Result<Vec<_>> = batch
            .iter()
            .map(|_| make_mask_plan(n_patches, masking.ratio, masking.mode, &mut rng))
            .collect();
        let breakdown = build_batch_loss(model, &batch, &plans?, opts)?.breakdown;
        let w = chunk.len() as f64;
        weight_sum += w;
        acc = Some(match acc {
            None => scale_breakdown(&breakdown, w),
            Some(a) => add_breakdowns(&a, &scale_breakdown(&breakdown, w)),
        });
    }
    let acc = acc.expect("non-empty dataset yields at least one batch");
    Ok(scale_breakdown(&acc, 1.0 / weight_sum))
}

fn scale_breakdown(b: &LossBreakdown, w: f64) -> LossBreakdown {
    LossBreakdown {
        umr_1: b.umr_1.map(|v| v * w),
        umr_2: b.umr_2.map(|v| v * w),
        cmr_1: b.cmr_1.map(|v| v * w),
        cmr_2: b.cmr_2.map(|v| v * w),
        mde: b.mde.map(|v| v * w),
        mim: b.mim.map(|v| v * w),
        total: b.total * w,
        weights: b.weights,
    }
}

fn add_breakdowns(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    let join = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => Some(x + y),
        (None, None) => None,
        _ => unreachable!("term presence is fixed by the flags for a whole run"),
    };
    LossBreakdown {
        umr_1: join(a.umr_1, b.umr_1),
        umr_2: join(a.umr_2, b.umr_2),
        cmr_1: join(a.cmr_1, b.cmr_1),
        cmr_2: join(a.cmr_2, b.cmr_2),
        mde: join(a.mde, b.mde),
        mim: join(a.mim, b.mim),
        total: a.total + b.total,
        weights: a.weights,
    }
}

#[cfg(test)]
mod tests;
