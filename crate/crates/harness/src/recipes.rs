//! Fixed run recipes whose outcomes are checked by the test suite.

use jamba_core::config::JambaConfig;

use crate::optim::OptimizerKind;
use crate::tasks::TaskSpec;
use crate::train::TrainSpec;

/// Toy 8-layer hybrid (one attention layer, seven Mamba layers, d_model 64)
/// on the induction task.
///
/// Pilot runs in f32 (model seeds 0, 1, 2 with task seed 1234) all reached
/// held-out accuracy 1.0, first crossing 0.99 at steps 1100, 900 and 600.
/// The best head's query-position induction score on the probe sequence was
/// 0.98 to 0.9996 against a uniform-attention base rate near 0.06. The
/// acceptance thresholds (accuracy >= 0.99, score > 0.5) leave that margin.
pub fn induction() -> (JambaConfig, TaskSpec, TrainSpec) {
    let config = JambaConfig {
        n_heads: 4,
        n_kv_heads: 2,
        head_dim: 16,
        mamba_d_state: 8,
        mamba_expand: 1,
        mlp_hidden: 128,
        vocab_size: 32,
        ..JambaConfig::toy(64, 8, 1, 7)
    };
    let task = TaskSpec::induction(32, 32, 8, 1234);
    let spec = TrainSpec {
        steps: 2000,
        batch: 16,
        lr: 3e-3,
        optimizer: OptimizerKind::default(),
        clip: 1.0,
        eval_every: 250,
        eval_samples: 128,
        warmup: 100,
        seed: 0,
    };
    (config, task, spec)
}

/// Task seed of the sequence the induction probe is run on.
pub const INDUCTION_PROBE_SEED: u64 = 0x1d0c;
