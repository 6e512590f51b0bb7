//! Oracle checks runnable outside the test suite: chunked scan against the
//! sequential recurrence, and tape gradients against finite differences.

use jamba_core::attention::{attend, attend_unmasked, AttentionShape, AttentionWeights};
use jamba_core::config::JambaConfig;
use jamba_core::error::Error as CoreError;
use jamba_core::mamba::{mamba_forward, scan, InnerNorm, MambaShape, MambaWeights};
use jamba_core::model::JambaModel;
use jamba_core::moe::{load_balance_loss, mlp, route_and_combine, MlpWeights, MoeWeights};
use jamba_core::numerics::gradcheck::{check, GradCheckOptions, GradCheckReport};
use jamba_core::numerics::{NumericsError, Rng, Tensor};
use serde::Serialize;

use crate::error::Result;

pub const SCAN_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanTrial {
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub chunk: usize,
    /// Normwise relative difference of outputs and of final states.
    pub rel_diff_y: f64,
    pub rel_diff_h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanCheckReport {
    pub trials: Vec<ScanTrial>,
    pub max_rel_diff: f64,
}

impl ScanCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_diff < SCAN_TOLERANCE
    }
}

/// `trials` random instances with `d_inner, N <= 8`, `L <= 64` and
/// chunk sizes from {1, 2, 4, 16, >= L}, discretized like a real layer.
pub fn scan_check(trials: usize, seed: u64) -> Result<ScanCheckReport> {
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(trials);
    for i in 0..trials {
        let mut rng = root.fork(i as u64);
        let len = 1 + rng.below(64);
        let ch = 1 + rng.below(8);
        let n = 1 + rng.below(8);
        let chunk = match rng.below(5) {
            0 => 1,
            1 => 2,
            2 => 4,
            3 => 16,
            _ => len + rng.below(8),
        };
        let delta = Tensor::uniform(&[len, ch], 1e-3, 1.0, &mut rng);
        let mut a = Tensor::<f64>::randn(&[ch, n], 1.0, &mut rng);
        a.data_mut().iter_mut().for_each(|v| *v = -v.exp());
        let b = Tensor::randn(&[len, n], 1.0, &mut rng);
        let u = Tensor::randn(&[len, ch], 1.0, &mut rng);
        let c = Tensor::randn(&[len, n], 1.0, &mut rng);
        let h0 = Tensor::<f64>::randn(&[ch, n], 1.0, &mut rng);
        let (abar, bx) = scan::discretize(&delta, &a, &b, &u)?;
        let (ys, hs) = scan::sequential(&abar, &bx, &c, &h0)?;
        let (yc, hc) = scan::chunked(&abar, &bx, &c, &h0, chunk)?;
        out.push(ScanTrial {
            len,
            d_inner: ch,
            d_state: n,
            chunk,
            rel_diff_y: scan::rel_diff(&yc, &ys),
            rel_diff_h: scan::rel_diff(&hc, &hs),
        });
    }
    let max_rel_diff = out.iter().map(|t| t.rel_diff_y.max(t.rel_diff_h)).fold(0.0, f64::max);
    Ok(ScanCheckReport { trials: out, max_rel_diff })
}

#[derive(Clone, Debug, Serialize)]
pub struct NamedGradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

impl NamedGradCheck {
    fn new(name: String, r: GradCheckReport) -> Self {
        NamedGradCheck { name, checked: r.checked, max_rel_err: r.max_rel_err, failures: r.failures.len() }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn numerics(e: CoreError) -> NumericsError {
    match e {
        CoreError::Numerics(n) | CoreError::NumericOverflow { source: n, .. } => n,
        other => NumericsError::InvalidArgument { op: "grad-check", detail: other.to_string() },
    }
}

/// Central-difference checks (rel tol 1e-4, abs floor 1e-8, real64) of every
/// layer type and of a whole toy hybrid with MoE and RoPE.
pub fn grad_check(seed: u64) -> Result<Vec<NamedGradCheck>> {
    let opts = GradCheckOptions { max_entries: 24, seed, ..GradCheckOptions::default() };
    let root = Rng::new(seed);
    let mut out = Vec::new();

    for (k, use_inner_norm) in [true, false].into_iter().enumerate() {
        let shape = MambaShape { d_model: 5, d_inner: 6, d_state: 3, dt_rank: 2, conv_kernel: 3, use_inner_norm };
        let mut rng = root.fork(k as u64);
        let mut w = MambaWeights::<Tensor<f64>>::init(&shape, 0.4, &mut rng);
        // larger steps keep the scan away from the identity map
        w.dt_bias.data_mut().iter_mut().for_each(|v| *v += 2.0);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let mut inputs: Vec<Tensor<f64>> = w.named().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        let report = check(&inputs, opts, |tape, v| {
            let n = v.len() - 1;
            let mut it = v[..n].iter().copied();
            let mut next = || it.next().expect("one var per weight");
            let wv = MambaWeights {
                w_in: next(),
                conv_w: next(),
                conv_b: next(),
                w_x_dbc: next(),
                w_dt: next(),
                dt_bias: next(),
                a_log: next(),
                d_skip: next(),
                w_out: next(),
                inner_norm: w.inner_norm.as_ref().map(|_| InnerNorm { dt: next(), b: next(), c: next() }),
            };
            let y = mamba_forward(v[n], &wv, &shape, None).map_err(numerics)?;
            y.mul(tape.constant(probe.clone())?)?.sum()
        })?;
        out.push(NamedGradCheck::new(format!("mamba inner_norm={use_inner_norm}"), report));
    }

    for (k, use_rope) in [false, true].into_iter().enumerate() {
        let shape = AttentionShape { d_model: 6, n_heads: 4, n_kv_heads: 2, head_dim: 2, use_rope };
        let mut rng = root.fork(10 + k as u64);
        let w = AttentionWeights::<Tensor<f64>>::init(&shape, 0.5, &mut rng);
        let x = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let inputs = vec![w.w_q, w.w_k, w.w_v, w.w_o, x];
        for causal in [true, false] {
            let report = check(&inputs, opts, |tape, v| {
                let wv = AttentionWeights { w_q: v[0], w_k: v[1], w_v: v[2], w_o: v[3] };
                let y = if causal { attend(v[4], &wv, &shape, None) } else { attend_unmasked(v[4], &wv, &shape) };
                y.map_err(numerics)?.mul(tape.constant(probe.clone())?)?.sum()
            })?;
            out.push(NamedGradCheck::new(format!("attention rope={use_rope} causal={causal}"), report));
        }
    }

    let mut rng = root.fork(20);
    let m = MlpWeights::<Tensor<f64>>::init(4, 5, 0.5, &mut rng);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let report = check(&[m.w_gate, m.w_up, m.w_down, x], opts, |_, v| {
        mlp(v[3], &MlpWeights { w_gate: v[0], w_up: v[1], w_down: v[2] }).map_err(numerics)?.sum()
    })?;
    out.push(NamedGradCheck::new("mlp".into(), report));

    let moe = MoeWeights::<Tensor<f64>>::init(4, 3, 4, 0.5, &mut rng);
    let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let probe = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let mut inputs = vec![moe.router.clone()];
    for e in &moe.experts {
        inputs.extend([e.w_gate.clone(), e.w_up.clone(), e.w_down.clone()]);
    }
    inputs.push(x);
    for k in [1, 2, 4] {
        let report = check(&inputs, opts, |tape, v| {
            let experts =
                (0..4).map(|e| MlpWeights { w_gate: v[1 + 3 * e], w_up: v[2 + 3 * e], w_down: v[3 + 3 * e] }).collect();
            let w = MoeWeights { router: v[0], experts };
            let out = route_and_combine(v[13], &w, k).map_err(numerics)?;
            let aux = load_balance_loss(&out, 0.5).map_err(numerics)?;
            out.y.mul(tape.constant(probe.clone())?)?.sum()?.add(aux)
        })?;
        out.push(NamedGradCheck::new(format!("moe top_k={k}"), report));
    }

    let cfg = JambaConfig {
        head_dim: 2,
        mamba_d_state: 4,
        mamba_dt_rank: 2,
        mamba_expand: 1,
        mlp_hidden: 6,
        vocab_size: 11,
        use_rope: true,
        moe_every: 2,
        n_experts: 4,
        top_k: 2,
        ..JambaConfig::toy(8, 4, 1, 3)
    };
    let mut model = JambaModel::<f64>::init(&cfg, seed)?;
    // broadband noise so every path carries signal
    let mut rng = root.fork(30);
    model.weights = model.weights.map(|t| {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += 0.25 * rng.normal());
        t
    });
    let tokens: Vec<usize> = (0..10).map(|_| rng.below(cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..10).map(|_| rng.below(cfg.vocab_size)).collect();
    let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
    let inputs: Vec<Tensor<f64>> = model.weights.flat().into_iter().cloned().collect();
    let report = check(&inputs, GradCheckOptions { max_entries: 4, ..opts }, |tape, vars| {
        let w = model.weights.replace(vars);
        let out = model.forward_with(tape, &w, &tokens, 2, None).map_err(numerics)?;
        out.logits.cross_entropy(&targets, &mask)?.add(out.aux_loss)
    })?;
    out.push(NamedGradCheck::new("hybrid end-to-end".into(), report));
    Ok(out)
}
