//! The full run: checkpoint schedule, on-disk trail, exact resume, and
//! checkpoint selection.
//!
//! Files under the output directory:
//! - `metrics.tsv`: one line per step, `step \t L_bias \t L_rep \t L_total \t grad_norm`
//! - `trail.tsv`: one line per checkpoint with its held-out loss
//! - `checkpoints/step-NNNNNNN.pdpt` plus `.config` (run config) and
//!   `.state` (full-precision prefix and optimizer moments, for resuming)

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::{
    batch_for_step, heldout_batches, split_corpus, steps_per_epoch, AdamState, Result, RunningLoss, TrainState,
    Trainer, TrainingData, TuneConfig, TuneError,
};
use crate::corpus::CorpusSlices;
use crate::encoder::{write_checkpoint, DifferentiableEncoder, PromptParameters};
use crate::geometry::LossBreakdown;

/// The step the `early` policy looks for.
pub const EARLY_STEP: u64 = 500;

const STATE_MAGIC: &[u8; 4] = b"PDST";
const TRAIL_HEADER: &str = "step\tcheckpoint\tL_bias\tL_rep\tlambda\tL_total";

#[derive(Debug, Clone, PartialEq)]
pub struct TrailEntry {
    pub step: u64,
    pub path: PathBuf,
    pub heldout: LossBreakdown,
}

/// Checkpoints of one run in step order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointTrail {
    pub entries: Vec<TrailEntry>,
}

impl CheckpointTrail {
    pub fn steps(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.step).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{TRAIL_HEADER}")?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            let l = e.heldout;
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.step,
                rel.display(),
                l.bias,
                l.representation,
                l.lambda,
                l.total
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a `trail.tsv`; relative checkpoint paths resolve against its
/// directory.
pub fn read_trail(path: &Path) -> Result<CheckpointTrail> {
    let base = path.parent().unwrap_or(Path::new(""));
    let bad = |n: usize, why: &str| TuneError::Resume(format!("{}:{}: {why}", path.display(), n + 1));
    let mut entries: Vec<TrailEntry> = Vec::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if n == 0 && line == TRAIL_HEADER || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad(n, "expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "bad number"));
        let step: u64 = f[0].parse().map_err(|_| bad(n, "bad step"))?;
        if entries.last().is_some_and(|e| e.step >= step) {
            return Err(bad(n, "steps must increase"));
        }
        entries.push(TrailEntry {
            step,
            path: base.join(f[1]),
            heldout: LossBreakdown {
                bias: num(f[2])?,
                representation: num(f[3])?,
                lambda: num(f[4])?,
                total: num(f[5])?,
            },
        });
    }
    Ok(CheckpointTrail { entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointPolicy {
    /// The checkpoint at step 500: least drift, for masked-token benchmarks.
    Early,
    /// The last checkpoint: for embedding-geometry benchmarks.
    Final,
}

pub fn select_checkpoint(trail: &CheckpointTrail, policy: CheckpointPolicy) -> Result<&TrailEntry> {
    select_checkpoint_at(trail, policy, EARLY_STEP)
}

/// `Early` takes the entry at `early_step`, else the first one after it,
/// else the last entry.
pub fn select_checkpoint_at(trail: &CheckpointTrail, policy: CheckpointPolicy, early_step: u64) -> Result<&TrailEntry> {
    let last = trail.entries.last().ok_or(TuneError::EmptyTrail)?;
    Ok(match policy {
        CheckpointPolicy::Final => last,
        CheckpointPolicy::Early => trail.entries.iter().find(|e| e.step >= early_step).unwrap_or(last),
    })
}

fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:07}.pdpt"))
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write_config_sidecar(path: &Path, config: &TuneConfig, step: u64, checksum: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(sidecar(path, ".config"))?);
    for (k, v) in config.to_kv() {
        writeln!(w, "{k} = {v}")?;
    }
    writeln!(w, "# step {step}")?;
    writeln!(w, "# base_checksum {checksum}")?;
    w.flush()?;
    Ok(())
}

fn write_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(sidecar(path, ".state"))?);
    w.write_all(STATE_MAGIC)?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.adam.t.to_le_bytes())?;
    let r = state.running;
    w.write_all(&r.steps.to_le_bytes())?;
    for x in [r.bias, r.representation, r.total] {
        w.write_all(&x.to_le_bytes())?;
    }
    let (l, two, k, h) = state.prompt.per_layer_kv.dim();
    for n in [l, two, k, h] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for a in [&state.prompt.per_layer_kv, &state.adam.m, &state.adam.v] {
        for x in a.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads the full-precision training state saved next to a checkpoint.
pub fn read_state(checkpoint: &Path) -> Result<TrainState> {
    let path = sidecar(checkpoint, ".state");
    let mut bytes = Vec::new();
    File::open(&path)
        .map_err(|e| TuneError::Resume(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let bad = || TuneError::Resume(format!("{}: corrupt state file", path.display()));
    if bytes.get(..4) != Some(STATE_MAGIC) {
        return Err(bad());
    }
    let mut pos = 4;
    let mut word = || -> Result<[u8; 8]> {
        let w = bytes.get(pos..pos + 8).ok_or_else(bad)?;
        pos += 8;
        Ok(w.try_into().expect("8 bytes"))
    };
    let step = u64::from_le_bytes(word()?);
    let t = u64::from_le_bytes(word()?);
    let steps = u64::from_le_bytes(word()?);
    let bias = f64::from_le_bytes(word()?);
    let representation = f64::from_le_bytes(word()?);
    let total = f64::from_le_bytes(word()?);
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u64::from_le_bytes(word()?) as usize;
    }
    let count: usize = dims.iter().product();
    let mut tensor = || -> Result<Array4<f64>> {
        let v = (0..count)
            .map(|_| word().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), v).map_err(|_| bad())
    };
    let prompt = PromptParameters {
        per_layer_kv: tensor()?,
    };
    let m = tensor()?;
    let v = tensor()?;
    Ok(TrainState {
        step,
        prompt,
        adam: AdamState { m, v, t },
        running: RunningLoss {
            steps,
            bias,
            representation,
            total,
        },
    })
}

/// Splits the corpus and runs [`tune_prepared`].
pub fn tune<E: DifferentiableEncoder + ?Sized>(
    slices: &CorpusSlices,
    encoder: &E,
    config: &TuneConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<CheckpointTrail> {
    let (train, heldout) = split_corpus(slices, encoder, config)?;
    tune_prepared(&train, &heldout, encoder, config, out_dir, resume)
}

/// Keeps the lines of `path` whose leading step is at most `step`.
fn truncate_after(path: &Path, step: u64, keep_header: bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .enumerate()
        .filter(|(n, l)| {
            (keep_header && *n == 0 && l.starts_with("step"))
                || l.split('\t')
                    .next()
                    .and_then(|s| s.parse::<u64>().ok())
                    .is_some_and(|s| s <= step)
        })
        .map(|(_, l)| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Runs `max_epochs` epochs (or `max_steps` steps). A checkpoint is written
/// at initialization, every `checkpoint_every_steps`, at each epoch end and
/// at the last step. With `resume`, training continues from that
/// checkpoint's saved state and reproduces the uninterrupted run exactly.
pub fn tune_prepared<E: DifferentiableEncoder + ?Sized>(
    train: &TrainingData,
    heldout: &TrainingData,
    encoder: &E,
    config: &TuneConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<CheckpointTrail> {
    let d = train.d();
    let mut trainer = Trainer::new(encoder, config.clone())?;
    let checksum = encoder.base_checksum();
    fs::create_dir_all(out_dir.join("checkpoints"))?;
    let metrics_path = out_dir.join("metrics.tsv");
    let trail_path = out_dir.join("trail.tsv");
    let eval_batches = heldout_batches(heldout, config)?;

    let spe = steps_per_epoch(train, config.batch_size);
    let mut total = config.max_epochs as u64 * spe;
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    log::info!("{total} steps ({spe} per epoch), batch {}", config.batch_size);

    let mut trail = CheckpointTrail::default();
    let save = |state: &TrainState, trainer: &mut Trainer<'_, E>, trail: &mut CheckpointTrail| -> Result<()> {
        let path = checkpoint_path(out_dir, state.step);
        write_checkpoint(&path, &state.prompt, config.lambda, config.rho, state.step)?;
        write_config_sidecar(&path, config, state.step, &checksum)?;
        write_state(&path, state)?;
        let heldout = trainer.evaluate(&state.prompt, &eval_batches, d)?;
        log::info!(
            "checkpoint step {}: held-out bias {:.6} rep {:.6} total {:.6}",
            state.step,
            heldout.bias,
            heldout.representation,
            heldout.total
        );
        trail.entries.push(TrailEntry {
            step: state.step,
            path,
            heldout,
        });
        trail.write(&trail_path)
    };

    let mut state = match resume {
        Some(ckpt) => {
            let state = read_state(ckpt)?;
            if state.prompt.check_fits(encoder.spec()).is_err() || state.prompt.prefix_length() != config.prefix_length
            {
                return Err(TuneError::Resume(
                    "checkpoint shape does not match the encoder and config".into(),
                ));
            }
            truncate_after(&metrics_path, state.step, false)?;
            if trail_path.exists() {
                trail = read_trail(&trail_path)?;
                trail.entries.retain(|e| e.step <= state.step);
            }
            if trail.entries.last().is_none_or(|e| e.step != state.step) {
                save(&state, &mut trainer, &mut trail)?;
            } else {
                trail.write(&trail_path)?;
            }
            state
        }
        None => {
            let state = TrainState::init(encoder, config);
            File::create(&metrics_path)?;
            save(&state, &mut trainer, &mut trail)?;
            state
        }
    };

    let mut metrics = BufWriter::new(fs::OpenOptions::new().append(true).create(true).open(&metrics_path)?);
    while state.step < total {
        let batch = batch_for_step(train, config, state.step + 1)?;
        let report = trainer.train_step(&mut state, &batch, d)?;
        writeln!(metrics, "{}", report.metrics_line())?;
        let s = state.step;
        if s % config.checkpoint_every_steps == 0 || s % spe == 0 || s == total {
            metrics.flush()?;
            save(&state, &mut trainer, &mut trail)?;
        }
    }
    metrics.flush()?;
    if encoder.base_checksum() != checksum {
        return Err(TuneError::BaseModified);
    }
    Ok(trail)
}
