//! Trains the toy induction hybrid and reports accuracy and induction scores.
//!
//! cargo run --release -p jamba-harness --example induction_pilot -- [seed] [steps] [lr]

use jamba_harness::probe::{probe_attention, uniform_base_rate};
use jamba_harness::tasks::gen_task;
use jamba_harness::train::train;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (config, task, mut spec) = jamba_harness::recipes::induction();
    if let Some(seed) = args.get(1).and_then(|s| s.parse().ok()) {
        spec.seed = seed;
    }
    if let Some(steps) = args.get(2).and_then(|s| s.parse().ok()) {
        spec.steps = steps;
    }
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        spec.lr = lr;
    }
    spec.eval_every = 100.min(spec.steps);
    let t0 = std::time::Instant::now();
    let (model, log) = train::<f32>(&config, &task, &spec).expect("training run");
    for r in log.rows.iter().filter(|r| r.eval_accuracy.is_some()) {
        println!(
            "step {:>5} loss {:.4} acc {:.4} gnorm {:.3} {}ms",
            r.step,
            r.loss,
            r.eval_accuracy.unwrap(),
            r.grad_norm,
            r.wall_ms
        );
    }
    let sample = gen_task(&task.with_seed(jamba_harness::recipes::INDUCTION_PROBE_SEED)).unwrap();
    let queries: Vec<usize> = (0..sample.mask.len()).filter(|&t| sample.mask[t] > 0.0).collect();
    let all = probe_attention(&model, &sample.inputs, None).unwrap();
    let at_queries = probe_attention(&model, &sample.inputs, Some(&queries)).unwrap();
    for (a, q) in all.iter().zip(&at_queries) {
        println!(
            "layer {} head {} induction all-positions {:.4} query-positions {:.4}",
            a.layer,
            a.head,
            a.induction_score.unwrap_or(f64::NAN),
            q.induction_score.unwrap_or(f64::NAN)
        );
    }
    println!(
        "base rate all {:.4} queries {:.4}; total {:.1}s",
        uniform_base_rate(&sample.inputs, None).unwrap_or(f64::NAN),
        uniform_base_rate(&sample.inputs, Some(&queries)).unwrap_or(f64::NAN),
        t0.elapsed().as_secs_f64()
    );
}
