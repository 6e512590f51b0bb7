//! Architecture comparisons under one task, budget and seed.

use std::path::Path;
use std::thread;

use jamba_core::config::JambaConfig;
use jamba_core::numerics::Real;
use serde::Serialize;

use crate::error::{HarnessError, Result};
use crate::io::write_atomic;
use crate::tasks::TaskSpec;
use crate::train::{train, RunLog, TrainSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: JambaConfig,
}

impl Variant {
    pub fn new(name: &str, config: JambaConfig) -> Self {
        Variant { name: name.to_string(), config }
    }
}

/// The five standard shapes built around `base`'s widths:
/// pure attention, pure Mamba, hybrids at 1:7 and 1:3, and the 1:7 hybrid with MoE every other layer.
pub fn standard_variants(base: &JambaConfig) -> Vec<Variant> {
    let plain = JambaConfig { moe_every: 0, moe_phase: 0, n_experts: 1, top_k: 1, ..base.clone() };
    let ratio = |a, m| JambaConfig { attn_ratio: a, mamba_ratio: m, ..plain.clone() };
    vec![
        Variant::new("attention", ratio(1, 0)),
        Variant::new("mamba", ratio(0, 1)),
        Variant::new("hybrid-1-7", ratio(1, 7)),
        Variant::new("hybrid-1-3", ratio(1, 3)),
        Variant::new(
            "hybrid-moe",
            JambaConfig { moe_every: 2, n_experts: 4, top_k: 2, ..ratio(1, 7) },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub layer_pattern: String,
    pub params: usize,
    pub final_loss: f64,
    pub mean_loss_last_10pct: f64,
    pub final_eval_accuracy: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    #[serde(skip)]
    pub logs: Vec<RunLog>,
}

impl AblationReport {
    /// One column of per-step training loss per variant, aligned on step.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("step");
        for r in &self.rows {
            s.push(',');
            s.push_str(&r.name);
        }
        s.push('\n');
        let steps = self.logs.iter().map(|l| l.rows.len()).max().unwrap_or(0);
        for i in 0..steps {
            s.push_str(&(i + 1).to_string());
            for log in &self.logs {
                s.push(',');
                if let Some(r) = log.rows.get(i) {
                    s.push_str(&r.loss.to_string());
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<14} {:<10} {:>9} {:>11} {:>11} {:>9} {:>9}\n",
            "variant", "layers", "params", "final_loss", "tail_loss", "eval_acc", "wall_s"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<14} {:<10} {:>9} {:>11.4} {:>11.4} {:>9.4} {:>9.1}\n",
                r.name,
                r.layer_pattern,
                r.params,
                r.final_loss,
                r.mean_loss_last_10pct,
                r.final_eval_accuracy,
                r.wall_ms as f64 / 1000.0
            ));
        }
        s
    }

    /// Writes `<name>.csv` (plus stats) per variant, `curves.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (row, log) in self.rows.iter().zip(&self.logs) {
            log.write(&dir.join(format!("{}.csv", row.name)))?;
        }
        write_atomic(&dir.join("curves.csv"), self.curves_csv().as_bytes())?;
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }
}

/// Trains every variant with the same task, train spec and seeds, one thread per variant.
pub fn ablate<T: Real>(variants: &[Variant], task: &TaskSpec, spec: &TrainSpec) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(HarnessError::InvalidTrainSpec("ablation needs at least one variant".into()));
    }
    let mut names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != variants.len() {
        return Err(HarnessError::InvalidTrainSpec("variant names must be unique".into()));
    }
    let results: Vec<Result<(AblationRow, RunLog)>> = thread::scope(|s| {
        let handles: Vec<_> = variants
            .iter()
            .map(|v| s.spawn(move || run_variant::<T>(v, task, spec)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("variant thread panicked")).collect()
    });
    let mut report = AblationReport { rows: Vec::new(), logs: Vec::new() };
    for r in results {
        let (row, log) = r?;
        report.rows.push(row);
        report.logs.push(log);
    }
    Ok(report)
}

fn run_variant<T: Real>(v: &Variant, task: &TaskSpec, spec: &TrainSpec) -> Result<(AblationRow, RunLog)> {
    let (model, log) = train::<T>(&v.config, task, spec)?;
    let losses: Vec<f64> = log.rows.iter().map(|r| r.loss).collect();
    let tail = (losses.len() / 10).max(1).min(losses.len().max(1));
    let tail_mean = if losses.is_empty() { f64::NAN } else { losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64 };
    let row = AblationRow {
        name: v.name.clone(),
        layer_pattern: model.schedule().pattern(),
        params: model.param_count(),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
        mean_loss_last_10pct: tail_mean,
        final_eval_accuracy: log.last_eval_accuracy().unwrap_or(f64::NAN),
        wall_ms: log.rows.last().map(|r| r.wall_ms).unwrap_or(0),
    };
    Ok((row, log))
}
