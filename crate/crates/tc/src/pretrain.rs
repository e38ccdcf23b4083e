//! Multi-task pre-training with on-disk logging and checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use tc_core::trainer::{EvalSplit, MtlState, TaskMetrics, TrainHooks, TrainLogRecord};

use crate::checkpoint::{encoder_checkpoint, load_state, state_checkpoint};
use crate::config::RunConfig;
use crate::error::{Result, TcError};
use crate::io::{file_checksum, write_json};

pub const CHECKPOINT: &str = "checkpoint.tcck";
pub const ENCODER: &str = "encoder.tcck";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const ENCODER_ID: &str = "mtl";

struct DiskHooks {
    log: BufWriter<File>,
    checkpoint: PathBuf,
    start: Instant,
    budget_secs: Option<f64>,
}

fn state_err(what: &str, e: impl std::fmt::Display) -> tc_core::Error {
    tc_core::Error::State(format!("{what}: {e}"))
}

impl TrainHooks for DiskHooks {
    fn now_secs(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn record(&mut self, rec: &TrainLogRecord) -> tc_core::Result<()> {
        serde_json::to_writer(&mut self.log, rec).map_err(|e| state_err("writing the training log", e))?;
        self.log.write_all(b"\n").map_err(|e| state_err("writing the training log", e))
    }

    fn checkpoint(&mut self, state: &MtlState) -> tc_core::Result<()> {
        self.log.flush().map_err(|e| state_err("writing the training log", e))?;
        state_checkpoint(&state.snapshot()).save(&self.checkpoint).map_err(|e| state_err("saving a checkpoint", e))
    }

    fn should_stop(&mut self) -> bool {
        self.budget_secs.is_some_and(|b| self.start.elapsed().as_secs_f64() >= b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub micro_steps: u64,
    pub optimizer_steps: u64,
    pub fingerprint: String,
    pub checkpoint_sha256: String,
    pub encoder_sha256: String,
    pub seed: u64,
    pub wall_secs: f64,
    pub metrics: Vec<TaskMetrics>,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from `checkpoint.tcck` in the output directory.
    pub resume: bool,
    /// Stop at the first optimizer step after this many seconds.
    pub budget_secs: Option<f64>,
    pub evaluate: bool,
}

/// Drops log lines past the checkpointed step, so a resumed run does not repeat them.
fn keep_log_lines(path: &Path, n: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).map_err(|e| TcError::io(path, e))?;
    let kept: String = text.lines().take(n as usize).flat_map(|l| [l, "\n"]).collect();
    crate::io::atomic_write(path, kept.as_bytes())
}

pub fn pretrain(cfg: &RunConfig, out: &Path, opts: &PretrainOptions) -> Result<PretrainSummary> {
    std::fs::create_dir_all(out).map_err(|e| TcError::io(out, e))?;
    let ck_path = out.join(CHECKPOINT);
    let log_path = out.join(TRAIN_LOG);
    let mut state = if opts.resume && ck_path.exists() {
        let s = load_state(&ck_path)?;
        if s.cfg != cfg.trainer_config() {
            return Err(TcError::Usage(format!("{} was written with a different trainer configuration", ck_path.display())));
        }
        log::info!("resuming at micro-step {}", s.micro_step);
        s
    } else {
        MtlState::new(cfg.trainer_config())?
    };
    let file = if opts.resume {
        keep_log_lines(&log_path, state.micro_step)?;
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| TcError::io(&log_path, e))?;
    let mut hooks = DiskHooks { log: BufWriter::new(file), checkpoint: ck_path.clone(), start: Instant::now(), budget_secs: opts.budget_secs };
    let summary = state.train(cfg.trainer.total_steps, cfg.trainer.checkpoint_every, &mut hooks)?;
    hooks.log.flush().map_err(|e| TcError::io(&log_path, e))?;
    let wall_secs = hooks.start.elapsed().as_secs_f64();

    state_checkpoint(&state.snapshot()).save(&ck_path)?;
    let mut encoder = state.export_encoder();
    encoder.freeze();
    let enc_path = out.join(ENCODER);
    encoder_checkpoint(&encoder, ENCODER_ID).save(&enc_path)?;

    let mut metrics = Vec::new();
    if opts.evaluate {
        for t in 0..state.num_tasks() {
            metrics.push(state.evaluate_task(t, EvalSplit::Val, cfg.trainer.eval_limit)?);
        }
    }
    let result = PretrainSummary {
        micro_steps: summary.micro_steps,
        optimizer_steps: summary.optimizer_steps,
        fingerprint: format!("{:016x}", summary.fingerprint),
        checkpoint_sha256: file_checksum(&ck_path)?,
        encoder_sha256: file_checksum(&enc_path)?,
        seed: cfg.seed,
        wall_secs,
        metrics,
    };
    write_json(&out.join("pretrain_summary.json"), &result)?;
    Ok(result)
}
