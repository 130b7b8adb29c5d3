//! Training pipeline: online data generation, loss assembly, Adam updates,
//! a reduce-on-plateau learning-rate rule, checkpointing, and exact resume.

mod augment;
mod loss;
mod sampler;

pub use augment::{augment, AugmentConfig};
pub use loss::{snr_scale, step_weights, total_loss_reference, total_loss_tape, LOSS_FLOOR};
pub use sampler::{sample_train_config, SamplerConfig, ScenarioDraw, TrainVariant};

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::chansim::{make_precoder, sample_channel, transmit_dmrs, Observation, TransmitParams};
use crate::grid::{build_grid, dmrs_symbols};
use crate::model::{load_archive, save_archive, ModelConfig, RecurrentEstimator};
use crate::nn::Adam;
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Chansim(#[from] crate::chansim::ChansimError),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Checkpoint(#[from] crate::model::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad train config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_slots: usize,
    pub steps: u64,
    pub lr: f64,
    pub plateau_factor: f64,
    /// Evaluations without improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub eval_every: u64,
    pub ckpt_every: u64,
    /// Held-out validation slots regenerated identically each evaluation.
    pub n_val_slots: usize,
}

impl TrainConfig {
    /// Full-size defaults: batch of 32 independent slots, 40k steps,
    /// lr 4e-4 with reduce-on-plateau.
    pub fn paper(seed: u64) -> Self {
        Self {
            batch_slots: 32,
            steps: 40_000,
            lr: 4e-4,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-6,
            seed,
            sampler: SamplerConfig::paper(TrainVariant::Standard),
            eval_every: 500,
            ckpt_every: 2_000,
            n_val_slots: 64,
        }
    }

    /// Laptop-scale smoke run: randomized profiles, n_rb <= 16, SNR 0..20.
    pub fn desk_smoke(seed: u64) -> Self {
        let mut sampler = SamplerConfig::desk(TrainVariant::Random);
        sampler.n_rb_range = (4, 16);
        sampler.snr_range_db = (0.0, 20.0);
        Self {
            batch_slots: 8,
            steps: 2_000,
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_lr: 1e-5,
            seed,
            sampler,
            eval_every: 200,
            ckpt_every: 500,
            n_val_slots: 64,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.lr <= 0.0 {
            return Err("lr must be positive".to_string());
        }
        if self.steps == 0 {
            return Err("steps must be positive".to_string());
        }
        if self.batch_slots == 0 {
            return Err("batch_slots must be positive".to_string());
        }
        Ok(())
    }
}

/// One observation for a scenario and slot seed (augmentation separate).
pub fn generate_slot(scenario: &ScenarioDraw, slot_seed: u64) -> Result<Observation, TrainError> {
    let layout = build_grid(scenario.carrier, scenario.dmrs.clone(), scenario.prg)?;
    let pilots = dmrs_symbols(&scenario.dmrs, &layout);
    let h = sample_channel(&scenario.channel, &scenario.carrier, 2, 2, slot_seed)?;
    let plan = make_precoder(
        scenario.precoding,
        &h,
        &layout,
        scenario.n_layers,
        derive_seed(slot_seed, "precoder", 0),
    )?;
    Ok(transmit_dmrs(
        &h,
        &plan,
        &layout,
        &pilots,
        TransmitParams {
            snr_db: scenario.snr_db,
            amp: 1.0,
            seed: derive_seed(slot_seed, "tx", 0),
            strict_snr: true,
        },
    )?)
}

/// Batch of augmented slots for one training step.
pub fn generate_train_batch(
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    step: u64,
) -> Result<Vec<Observation>, TrainError> {
    let scenario = sample_train_config(derive_seed(cfg.seed, "step-scenario", step), &cfg.sampler);
    let mut batch = Vec::with_capacity(cfg.batch_slots);
    for i in 0..cfg.batch_slots {
        let slot_seed = derive_seed(cfg.seed, "slot", step * cfg.batch_slots as u64 + i as u64);
        let obs = generate_slot(&scenario, slot_seed)?;
        batch.push(augment(&obs, aug, derive_seed(slot_seed, "aug-draw", 0)));
    }
    Ok(batch)
}

/// Fixed validation set: scenarios and slots derive from the master seed
/// only, so every evaluation sees identical data.
fn validation_batches(cfg: &TrainConfig) -> Result<Vec<Vec<Observation>>, TrainError> {
    let per_scenario = 8usize.min(cfg.n_val_slots.max(1));
    let n_scenarios = cfg.n_val_slots.div_ceil(per_scenario);
    let mut out = Vec::with_capacity(n_scenarios);
    let mut produced = 0usize;
    for k in 0..n_scenarios {
        let scenario = sample_train_config(derive_seed(cfg.seed, "val-scenario", k as u64), &cfg.sampler);
        let mut batch = Vec::new();
        for i in 0..per_scenario {
            if produced == cfg.n_val_slots {
                break;
            }
            let slot_seed = derive_seed(cfg.seed, "val-slot", (k * per_scenario + i) as u64);
            batch.push(generate_slot(&scenario, slot_seed)?);
            produced += 1;
        }
        if !batch.is_empty() {
            out.push(batch);
        }
    }
    Ok(out)
}

fn eval_loss(
    model: &mut RecurrentEstimator<f32>,
    batches: &[Vec<Observation>],
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for batch in batches {
        let refs: Vec<&Observation> = batch.iter().collect();
        let mut fwd = model.forward_batch(&refs)?;
        let loss = total_loss_tape(&mut fwd, &refs);
        total += *fwd.tape.value(loss).first().unwrap() as f64;
        n += 1;
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct TrainState {
    step: u64,
    lr: f64,
    best_val: f64,
    evals_since_improvement: usize,
}

#[derive(Debug)]
pub struct TrainReport {
    pub steps_done: u64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<(u64, f64)>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    /// Populated when training stopped on a non-finite loss; names the last
    /// good checkpoint.
    pub halted: Option<String>,
}

fn save_train_checkpoint(
    path: &Path,
    model: &RecurrentEstimator<f32>,
    adam: &Adam<f32>,
    train_cfg: &TrainConfig,
    state: &TrainState,
    manifest_hash: &str,
) -> Result<(), TrainError> {
    let meta = serde_json::json!({
        "kind": "train",
        "config": model.config,
        "train_config": train_cfg,
        "state": state,
        "manifest_hash": manifest_hash,
    });
    let mut tensors: Vec<(String, &ndarray::ArrayD<f32>)> = Vec::new();
    for i in 0..model.store.len() {
        tensors.push((model.store.names()[i].clone(), model.store.value(i)));
    }
    for i in 0..model.store.len() {
        tensors.push((format!("adam.m.{}", model.store.names()[i]), &adam.m[i]));
        tensors.push((format!("adam.v.{}", model.store.names()[i]), &adam.v[i]));
    }
    save_archive(path, &meta, &tensors)?;
    Ok(())
}

/// Restores model parameters and optimizer state from a training checkpoint.
/// Returns the saved state and the adam step counter encoded in it.
pub fn load_train_checkpoint(
    path: &Path,
    model: &mut RecurrentEstimator<f32>,
    adam: &mut Adam<f32>,
) -> Result<(u64, f64), TrainError> {
    let (meta, tensors) = load_archive(path)?;
    let state: TrainState = serde_json::from_value(
        meta.get("state")
            .cloned()
            .ok_or_else(|| TrainError::Config("checkpoint has no train state".to_string()))?,
    )
    .map_err(|e| TrainError::Config(e.to_string()))?;
    let cfg: ModelConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| TrainError::Config(e.to_string()))?;
    if cfg != model.config {
        return Err(TrainError::Config(
            "checkpoint model config differs from the constructed model".to_string(),
        ));
    }
    let mut params = Vec::new();
    for (name, arr) in tensors {
        if let Some(rest) = name.strip_prefix("adam.m.") {
            let idx = model
                .store
                .index_of(rest)
                .ok_or_else(|| TrainError::Config(format!("unknown adam tensor `{name}`")))?;
            adam.m[idx] = arr;
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            let idx = model
                .store
                .index_of(rest)
                .ok_or_else(|| TrainError::Config(format!("unknown adam tensor `{name}`")))?;
            adam.v[idx] = arr;
        } else {
            params.push((name, arr));
        }
    }
    crate::model::load_into_store(&mut model.store, params)?;
    adam.step = state.step;
    adam.lr = state.lr;
    Ok((state.step, state.lr))
}

/// Runs the optimization loop. Checkpoints land in `out_dir`; pass
/// `resume_from` to continue a previous run exactly.
pub fn train_loop(
    model: &mut RecurrentEstimator<f32>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate().map_err(TrainError::Config)?;
    aug.validate().map_err(TrainError::Config)?;
    std::fs::create_dir_all(out_dir)?;

    let manifest = serde_json::json!({
        "model_config": model.config,
        "train_config": cfg,
        "augment": aug,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let manifest_text = serde_json::to_string_pretty(&manifest).expect("manifest json");
    let manifest_hash = fnv_hex(manifest_text.as_bytes());
    std::fs::write(out_dir.join("train_manifest.json"), &manifest_text)?;

    let mut adam = Adam::new(cfg.lr, &model.store);
    let mut state = TrainState {
        step: 0,
        lr: cfg.lr,
        best_val: f64::INFINITY,
        evals_since_improvement: 0,
    };
    if let Some(path) = resume_from {
        let (step, lr) = load_train_checkpoint(path, model, &mut adam)?;
        state.step = step;
        state.lr = lr;
    }

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?,
    );
    if state.step == 0 {
        writeln!(log, "step,loss,lr,wall_time_s")?;
    }

    let val_batches = validation_batches(cfg)?;
    let latest = out_dir.join("checkpoint_latest.ckpt");
    let start_wall = std::time::Instant::now();
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut halted = None;

    let start_step = state.step;
    for step in start_step..cfg.steps {
        let batch = generate_train_batch(cfg, aug, step)?;
        let refs: Vec<&Observation> = batch.iter().collect();
        let mut fwd = model.forward_batch(&refs)?;
        let loss_id = total_loss_tape(&mut fwd, &refs);
        let loss = *fwd.tape.value(loss_id).first().unwrap() as f64;

        if !loss.is_finite() {
            halted = Some(format!(
                "non-finite loss at step {step}; last good checkpoint: {}",
                latest.display()
            ));
            log::error!("{}", halted.as_ref().unwrap());
            break;
        }

        let node_grads = fwd.tape.backward(loss_id);
        let grads = fwd.bound.grads(&model.store, &node_grads);
        adam.lr = state.lr;
        adam.update(&mut model.store, &grads);

        train_losses.push(loss);
        state.step = step + 1;
        writeln!(
            log,
            "{},{:.6},{:.3e},{:.3}",
            step,
            loss,
            state.lr,
            start_wall.elapsed().as_secs_f64()
        )?;

        if state.step % cfg.eval_every == 0 || state.step == cfg.steps {
            let val = eval_loss(model, &val_batches)?;
            val_losses.push((state.step, val));
            if val + 1e-9 < state.best_val {
                state.best_val = val;
                state.evals_since_improvement = 0;
            } else {
                state.evals_since_improvement += 1;
                if state.evals_since_improvement > cfg.plateau_patience {
                    state.lr = (state.lr * cfg.plateau_factor).max(cfg.min_lr);
                    state.evals_since_improvement = 0;
                    log::info!("plateau: lr reduced to {:.3e} at step {}", state.lr, state.step);
                }
            }
        }
        if state.step % cfg.ckpt_every == 0 {
            save_train_checkpoint(&latest, model, &adam, cfg, &state, &manifest_hash)?;
        }
    }
    log.flush()?;

    let final_path = out_dir.join("checkpoint_final.ckpt");
    save_train_checkpoint(&final_path, model, &adam, cfg, &state, &manifest_hash)?;
    crate::model::save_model(&out_dir.join("model_final.ckpt"), model, &manifest_hash)?;

    Ok(TrainReport {
        steps_done: state.step,
        train_losses,
        val_losses,
        final_checkpoint: final_path,
        log_path,
        halted,
    })
}

/// FNV-1a hex digest used as a lightweight run/manifest tag.
pub fn fnv_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}
