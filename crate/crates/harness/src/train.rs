//! Deterministic training loop and evaluation.
//!
//! A run is fully determined by the model config, the task spec (its seed
//! drives every batch) and the train spec (its seed drives initialization).
//! Training batch `i` is `gen_batch(task, batch, i)`; evaluation batches use
//! indices from `EVAL_INDEX_BASE` up, so they never overlap training data.

use std::path::{Path, PathBuf};
use std::time::Instant;

use jamba_core::config::JambaConfig;
use jamba_core::error::Error as CoreError;
use jamba_core::model::{argmax, JambaModel};
use jamba_core::numerics::{NumericsError, Real, Tape};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::optim::{clip_global_norm, Optimizer, OptimizerKind};
use crate::tasks::{gen_batch, Batch, TaskKind, TaskSpec};

pub const EVAL_INDEX_BASE: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip: f64,
    /// Evaluate every this many steps (and always after the last); 0 evaluates only at the end.
    pub eval_every: usize,
    /// Held-out sequences per evaluation.
    pub eval_samples: usize,
    /// Linear warmup length in steps; the rate then decays along a cosine to 10% of `lr`.
    #[serde(default)]
    pub warmup: usize,
    /// Model initialization seed.
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            steps: 1000,
            batch: 16,
            lr: 3e-4,
            optimizer: OptimizerKind::default(),
            clip: 1.0,
            eval_every: 100,
            eval_samples: 64,
            warmup: 0,
            seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(HarnessError::InvalidTrainSpec(why.into()));
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(self.clip.is_finite() && self.clip >= 0.0) {
            return bad("clip must be finite and nonnegative");
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be positive");
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad("adam needs beta1, beta2 in [0, 1) and eps > 0");
            }
        }
        Ok(())
    }

    /// Learning rate applied at 1-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            return self.lr;
        }
        if step <= self.warmup {
            return self.lr * step as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// One CSV row. `eval_accuracy` is empty on steps without an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub aux_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub grad_norm: f64,
    pub tokens_seen: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRouting {
    pub layer: usize,
    /// Fraction of assignments per expert.
    pub load: Vec<f64>,
    pub mean_probs: Vec<f64>,
}

/// Routing balance and activation magnitudes captured at evaluation steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepStats {
    pub step: usize,
    pub routing: Vec<LayerRouting>,
    /// Largest |value| of the residual stream after each layer.
    pub residual_max_abs: Vec<f64>,
    /// Largest pre-norm |value| of the Mamba Δ/B/C streams, by layer.
    pub mamba_stream_max_abs: Vec<(usize, f64)>,
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
    pub stats: Vec<StepStats>,
}

pub const CSV_HEADER: &str = "step,loss,aux_loss,eval_accuracy,grad_norm,tokens_seen,wall_ms";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let acc = r.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.loss, r.aux_loss, acc, r.grad_norm, r.tokens_seen, r.wall_ms
            ));
        }
        s
    }

    /// The CSV with the wall-clock column blanked, for reproducibility comparisons.
    pub fn to_csv_without_wall_time(&self) -> String {
        let rows = self.rows.iter().map(|r| LogRow { wall_ms: 0, ..r.clone() }).collect();
        RunLog { rows, stats: self.stats.clone() }.to_csv()
    }

    pub fn last_eval_accuracy(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_accuracy)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    /// Writes the CSV to `path` and the stats next to it (`<stem>.stats.json`).
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        write_atomic(path, self.to_csv().as_bytes())?;
        let sidecar = stats_path(path);
        write_atomic(&sidecar, serde_json::to_string_pretty(&self.stats)?.as_bytes())?;
        Ok(sidecar)
    }
}

pub fn stats_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    csv.with_file_name(format!("{stem}.stats.json"))
}

fn diverged(step: usize, e: CoreError) -> HarnessError {
    match e {
        CoreError::NumericOverflow { .. } | CoreError::Numerics(NumericsError::NonFinite { .. }) => {
            HarnessError::Divergence { step, detail: e.to_string() }
        }
        other => HarnessError::Core(other),
    }
}

/// Trains a freshly initialized model.
pub fn train<T: Real>(config: &JambaConfig, task: &TaskSpec, spec: &TrainSpec) -> Result<(JambaModel<T>, RunLog)> {
    let model = JambaModel::init(config, spec.seed)?;
    train_model(model, task, spec)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_model<T: Real>(
    mut model: JambaModel<T>,
    task: &TaskSpec,
    spec: &TrainSpec,
) -> Result<(JambaModel<T>, RunLog)> {
    spec.validate()?;
    task.validate()?;
    if task.vocab_size > model.config().vocab_size {
        return Err(HarnessError::ImpossibleTask(format!(
            "task vocabulary {} exceeds model vocabulary {}",
            task.vocab_size,
            model.config().vocab_size
        )));
    }
    let started = Instant::now();
    let mut opt = Optimizer::new(spec.optimizer, &model.weights.flat());
    let mut log = RunLog::default();
    let mut tokens_seen = 0u64;

    for step in 1..=spec.steps {
        let batch = gen_batch(task, spec.batch, (step - 1) as u64)?;
        let (loss, aux, grad_norm, grads) = {
            let tape = Tape::new();
            let w = model.bind_params(&tape).map_err(|e| diverged(step, e))?;
            let out = model.forward_with(&tape, &w, &batch.inputs, batch.batch, None).map_err(|e| diverged(step, e))?;
            let ce = out
                .logits
                .cross_entropy(&batch.targets, &batch.mask)
                .map_err(|e| diverged(step, e.into()))?;
            let total = ce.add(out.aux_loss).map_err(|e| diverged(step, e.into()))?;
            let loss = ce.value().item().f64();
            let aux = out.aux_loss.value().item().f64();
            if !loss.is_finite() {
                return Err(HarnessError::Divergence { step, detail: format!("loss {loss}") });
            }
            let mut g = tape.backward(total).map_err(|e| diverged(step, e.into()))?;
            let mut grads: Vec<_> = w.flat().into_iter().map(|v| g.take(*v)).collect();
            let norm = clip_global_norm(&mut grads, spec.clip);
            if !norm.is_finite() {
                return Err(HarnessError::Divergence { step, detail: format!("gradient norm {norm}") });
            }
            (loss, aux, norm, grads)
        };
        let mut flat: Vec<_> = model.weights.flat().into_iter().cloned().collect();
        opt.update(&mut flat, &grads, spec.lr_at(step));
        model.weights = model.weights.replace(&flat);
        tokens_seen += (batch.batch * batch.seq_len) as u64;

        let eval_now = step == spec.steps || (spec.eval_every > 0 && step % spec.eval_every == 0);
        let eval_accuracy = if eval_now {
            let report = evaluate(&model, task, spec.eval_samples)?;
            log.stats.push(StepStats { step, ..report.stats });
            Some(report.accuracy)
        } else {
            None
        };
        log.rows.push(LogRow {
            step,
            loss,
            aux_loss: aux,
            eval_accuracy,
            grad_norm,
            tokens_seen,
            wall_ms: started.elapsed().as_millis() as u64,
        });
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Fraction of scored positions whose argmax prediction equals the target.
    pub accuracy: f64,
    /// Mean masked cross-entropy.
    pub loss: f64,
    pub scored: usize,
    #[serde(skip)]
    pub stats: StepStats,
}

const EVAL_CHUNK: usize = 32;

/// Accuracy and loss on `samples` held-out sequences.
pub fn evaluate<T: Real>(model: &JambaModel<T>, task: &TaskSpec, samples: usize) -> Result<EvalReport> {
    let mut correct = 0usize;
    let mut scored = 0usize;
    let mut loss_sum = 0.0;
    let mut stats = None;
    let mut done = 0;
    let mut index = EVAL_INDEX_BASE;
    while done < samples {
        let n = EVAL_CHUNK.min(samples - done);
        let batch = gen_batch(task, n, index)?;
        let (c, s, l, st) = score_batch(model, &batch)?;
        correct += c;
        scored += s;
        loss_sum += l;
        stats.get_or_insert(st);
        done += n;
        index += 1;
    }
    Ok(EvalReport {
        accuracy: if scored == 0 { 0.0 } else { correct as f64 / scored as f64 },
        loss: if scored == 0 { 0.0 } else { loss_sum / scored as f64 },
        scored,
        stats: stats.expect("at least one evaluation batch"),
    })
}

/// (correct, scored, summed loss, stats) over the masked positions of one batch.
fn score_batch<T: Real>(model: &JambaModel<T>, batch: &Batch) -> Result<(usize, usize, f64, StepStats)> {
    let tape = Tape::new();
    let w = model.bind_constants(&tape)?;
    let out = model.forward_with(&tape, &w, &batch.inputs, batch.batch, None)?;
    let logits = out.logits.value();
    let v = logits.last_dim();
    let (mut correct, mut scored, mut loss) = (0, 0, 0.0);
    for (r, row) in logits.data().chunks_exact(v).enumerate() {
        if batch.mask[r] == 0.0 {
            continue;
        }
        scored += 1;
        let target = batch.targets[r];
        if argmax(row) == target {
            correct += 1;
        }
        let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[target].f64();
    }
    let stats = StepStats {
        step: 0,
        routing: out
            .routing
            .into_iter()
            .map(|(layer, r)| LayerRouting { layer, load: r.load, mean_probs: r.mean_probs })
            .collect(),
        residual_max_abs: out.residual_max_abs,
        mamba_stream_max_abs: out.mamba_stream_max_abs,
    };
    Ok((correct, scored, loss, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeedleCell {
    pub seq_len: usize,
    pub depth: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Retrieval accuracy over every (length, depth) pair, in row-major order.
pub fn needle_grid<T: Real>(
    model: &JambaModel<T>,
    base: &TaskSpec,
    lengths: &[usize],
    depths: &[f64],
    samples: usize,
) -> Result<Vec<NeedleCell>> {
    if base.kind != TaskKind::Needle {
        return Err(HarnessError::ImpossibleTask("needle grid needs a needle task".into()));
    }
    let mut cells = Vec::with_capacity(lengths.len() * depths.len());
    for &seq_len in lengths {
        for &depth in depths {
            let spec = TaskSpec { seq_len, needle_depth: Some(depth), ..base.clone() };
            let report = evaluate(model, &spec, samples)?;
            cells.push(NeedleCell { seq_len, depth, accuracy: report.accuracy, samples });
        }
    }
    Ok(cells)
}

