//! Closed-form costs of a configuration: parameter counts, inference state
//! memory and the longest context that fits a memory budget.
//!
//! Only weights and decoding state are counted. Activation memory and
//! runtime overheads are excluded.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::kv_bytes;
use crate::config::{resolve_schedule, JambaConfig, LayerSchedule, Mixer, MlpKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    /// Parameters touched per token: each MoE layer contributes its router and `top_k` experts.
    pub active: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StateBytes {
    pub kv: u64,
    pub ssm: u64,
    pub conv: u64,
}

impl StateBytes {
    pub fn total(&self) -> u64 {
        self.kv + self.ssm + self.conv
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub index: usize,
    pub mixer: Mixer,
    pub mlp: MlpKind,
    pub params: u64,
    pub active_params: u64,
    /// Bytes of decoding state at the report's context length.
    pub state_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub context_len: u64,
    pub bytes_per_value: u64,
    pub total_params: u64,
    pub active_params: u64,
    pub kv_bytes: u64,
    pub ssm_state_bytes: u64,
    pub conv_state_bytes: u64,
    pub layers: Vec<LayerCost>,
}

fn u(x: usize) -> u64 {
    x as u64
}

fn attention_params(c: &JambaConfig) -> u64 {
    let (d, q, kv) = (u(c.d_model), u(c.n_heads * c.head_dim), u(c.n_kv_heads * c.head_dim));
    d * q + 2 * d * kv + q * d
}

fn mamba_params(c: &JambaConfig) -> u64 {
    let (d, di, n, r, k) = (u(c.d_model), u(c.d_inner()), u(c.mamba_d_state), u(c.mamba_dt_rank), u(c.mamba_conv_kernel));
    let norms = if c.use_inner_mamba_norm { r + 2 * n } else { 0 };
    d * 2 * di + di * k + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d + norms
}

fn mlp_params(c: &JambaConfig) -> u64 {
    3 * u(c.d_model) * u(c.mlp_hidden)
}

fn layer_params(c: &JambaConfig, mixer: Mixer, mlp: MlpKind) -> (u64, u64) {
    let base = 2 * u(c.d_model)
        + match mixer {
            Mixer::Attention => attention_params(c),
            Mixer::Mamba => mamba_params(c),
        };
    match mlp {
        MlpKind::Plain => (base + mlp_params(c), base + mlp_params(c)),
        MlpKind::MoE => {
            let router = u(c.d_model) * u(c.n_experts);
            (base + router + u(c.n_experts) * mlp_params(c), base + router + u(c.top_k) * mlp_params(c))
        }
    }
}

fn schedule(config: &JambaConfig) -> Result<LayerSchedule> {
    config.validate()?;
    Ok(resolve_schedule(config)?)
}

pub fn count_params(config: &JambaConfig) -> Result<ParamCount> {
    let s = schedule(config)?;
    let global = u(config.vocab_size) * u(config.d_model) + u(config.d_model);
    let (mut total, mut active) = (global, global);
    for e in &s.entries {
        let (t, a) = layer_params(config, e.mixer, e.mlp);
        total += t;
        active += a;
    }
    Ok(ParamCount { total, active })
}

fn ssm_per_layer(c: &JambaConfig, bytes: u64) -> (u64, u64) {
    let di = u(c.d_inner());
    (di * u(c.mamba_d_state) * bytes, di * u(c.mamba_conv_kernel - 1) * bytes)
}

/// KV cache grows with `context_len`; SSM and conv state do not.
pub fn state_bytes(config: &JambaConfig, context_len: u64, bytes_per_value: u64) -> Result<StateBytes> {
    let s = schedule(config)?;
    let mamba = u(s.count_mixer(Mixer::Mamba));
    let (ssm, conv) = ssm_per_layer(config, bytes_per_value);
    Ok(StateBytes { kv: kv_bytes(config, context_len, bytes_per_value), ssm: mamba * ssm, conv: mamba * conv })
}

/// Largest context whose weights plus decoding state fit in `budget_bytes`,
/// with every parameter stored at `bytes_per_param`. Returns `u64::MAX` when
/// the state does not grow with context (no attention layers).
pub fn max_context(config: &JambaConfig, budget_bytes: u64, bytes_per_param: u64, bytes_per_value: u64) -> Result<u64> {
    let params = count_params(config)?.total * bytes_per_param;
    let fixed = state_bytes(config, 0, bytes_per_value)?;
    let required = params + fixed.total();
    if budget_bytes < required {
        return Err(Error::BudgetTooSmall { budget: budget_bytes, required });
    }
    let per_token = kv_bytes(config, 1, bytes_per_value);
    if per_token == 0 {
        return Ok(u64::MAX);
    }
    Ok((budget_bytes - required) / per_token)
}

pub fn cost_report(model: &str, config: &JambaConfig, context_len: u64, bytes_per_value: u64) -> Result<CostReport> {
    let s = schedule(config)?;
    let counts = count_params(config)?;
    let state = state_bytes(config, context_len, bytes_per_value)?;
    let kv_layer = 2 * u(config.n_kv_heads) * u(config.head_dim) * context_len * bytes_per_value;
    let (ssm, conv) = ssm_per_layer(config, bytes_per_value);
    let layers = s
        .entries
        .iter()
        .map(|e| {
            let (params, active_params) = layer_params(config, e.mixer, e.mlp);
            let state_bytes = match e.mixer {
                Mixer::Attention => kv_layer,
                Mixer::Mamba => ssm + conv,
            };
            LayerCost { index: e.index, mixer: e.mixer, mlp: e.mlp, params, active_params, state_bytes }
        })
        .collect();
    Ok(CostReport {
        model: model.to_string(),
        context_len,
        bytes_per_value,
        total_params: counts.total,
        active_params: counts.active,
        kv_bytes: state.kv,
        ssm_state_bytes: state.ssm,
        conv_state_bytes: state.conv,
        layers,
    })
}

pub const GIB: f64 = (1u64 << 30) as f64;

fn human_count(n: u64) -> String {
    if n >= 1_000_000_000 {
        format!("{:.2} B", n as f64 / 1e9)
    } else {
        format!("{:.2} M", n as f64 / 1e6)
    }
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }

    /// Aligned plain-text summary followed by the per-layer breakdown.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "model: {}  context: {}  bytes/value: {}", self.model, self.context_len, self.bytes_per_value);
        let rows: [(&str, u64, String); 5] = [
            ("total_params", self.total_params, human_count(self.total_params)),
            ("active_params", self.active_params, human_count(self.active_params)),
            ("kv_cache", self.kv_bytes, format!("{:.2} GiB", self.kv_bytes as f64 / GIB)),
            ("ssm_state", self.ssm_state_bytes, format!("{:.4} GiB", self.ssm_state_bytes as f64 / GIB)),
            ("conv_state", self.conv_state_bytes, format!("{:.4} GiB", self.conv_state_bytes as f64 / GIB)),
        ];
        for (name, raw, human) in rows {
            let _ = writeln!(out, "{name:<14} {raw:>16}  {human:>12}");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>5}  {:<9}  {:<5}  {:>14}  {:>14}  {:>14}", "layer", "mixer", "mlp", "params", "active", "state_bytes");
        for l in &self.layers {
            let mixer = match l.mixer {
                Mixer::Attention => "attention",
                Mixer::Mamba => "mamba",
            };
            let mlp = match l.mlp {
                MlpKind::Plain => "mlp",
                MlpKind::MoE => "moe",
            };
            let _ = writeln!(
                out,
                "{:>5}  {:<9}  {:<5}  {:>14}  {:>14}  {:>14}",
                l.index, mixer, mlp, l.params, l.active_params, l.state_bytes
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;

    fn cfg(name: &str) -> JambaConfig {
        preset(name).unwrap().config
    }

    #[test]
    fn no_moe_means_all_params_active() {
        let c = cfg("llama2-7b-shape");
        let p = count_params(&c).unwrap();
        assert_eq!(p.total, p.active);
        let c = JambaConfig { top_k: 16, ..cfg("jamba-release-shape") };
        let p = count_params(&c).unwrap();
        assert_eq!(p.total, p.active);
        let p = count_params(&cfg("jamba-release-shape")).unwrap();
        assert!(p.active < p.total);
    }

    #[test]
    fn closed_form_matches_instantiated_arrays() {
        use crate::model::{layout, JambaModel};
        let toy = cfg("toy-1m");
        let m = JambaModel::<f32>::init(&toy, 0).unwrap();
        assert_eq!(count_params(&toy).unwrap().total, m.param_count() as u64);
        for name in crate::config::PRESET_NAMES {
            let c = cfg(name);
            let enumerated: u64 = layout(&c).unwrap().flat().iter().map(|s| s.iter().product::<usize>() as u64).sum();
            assert_eq!(count_params(&c).unwrap().total, enumerated, "{name}");
        }
        let no_norm = JambaConfig { use_inner_mamba_norm: false, ..toy };
        let m = JambaModel::<f32>::init(&no_norm, 0).unwrap();
        assert_eq!(count_params(&no_norm).unwrap().total, m.param_count() as u64);
    }

    #[test]
    fn release_shape_lands_near_52b_total_12b_active() {
        let p = count_params(&cfg("jamba-release-shape")).unwrap();
        let (t, a) = (p.total as f64 / 1e9, p.active as f64 / 1e9);
        assert!((t / 52.0 - 1.0).abs() <= 0.15, "{t}");
        assert!((a / 12.0 - 1.0).abs() <= 0.15, "{a}");
    }

    #[test]
    fn kv_table_at_256k_16bit() {
        let ctx = 256 * 1024;
        for (name, gib) in [("jamba-release-shape", 4.0), ("mixtral-8x7b-shape", 32.0), ("llama2-7b-shape", 128.0)] {
            let s = state_bytes(&cfg(name), ctx, 2).unwrap();
            assert_eq!(s.kv as f64 / GIB, gib, "{name}");
        }
    }

    #[test]
    fn one_eighth_kv_of_all_attention_equivalent() {
        let j = cfg("jamba-release-shape");
        let dense = JambaConfig { attn_ratio: 1, mamba_ratio: 0, ..j.clone() };
        let (a, b) = (kv_bytes(&j, 1, 2), kv_bytes(&dense, 1, 2));
        assert_eq!(8 * a, b);
    }

    #[test]
    fn state_is_affine_in_context() {
        let j = cfg("jamba-release-shape");
        let s0 = state_bytes(&j, 0, 2).unwrap();
        assert_eq!(s0.kv, 0);
        assert!(s0.ssm > 0 && s0.conv > 0);
        let slope = 2 * 4 * 8 * 128 * 2;
        for ctx in [1u64, 17, 4096] {
            let s = state_bytes(&j, ctx, 2).unwrap();
            assert_eq!((s.ssm, s.conv), (s0.ssm, s0.conv));
            assert_eq!(s.kv, slope * ctx);
        }
    }

    #[test]
    fn max_context_boundaries() {
        let j = cfg("jamba-release-shape");
        let params = count_params(&j).unwrap().total;
        let ctx = 1000;
        let exact = params + state_bytes(&j, ctx, 2).unwrap().total();
        assert_eq!(max_context(&j, exact, 1, 2).unwrap(), ctx);
        assert_eq!(max_context(&j, exact - 1, 1, 2).unwrap(), ctx - 1);
        assert!(matches!(max_context(&j, params - 1, 1, 2), Err(Error::BudgetTooSmall { .. })));

        let mut last = 0;
        for extra in (0..50).map(|i| i * 7_919_113u64) {
            let m = max_context(&j, exact + extra, 1, 2).unwrap();
            assert!(m >= last);
            last = m;
        }
    }

    #[test]
    fn jamba_fits_twice_mixtral_context_in_80gib() {
        let budget = 80 * (1u64 << 30);
        let j = max_context(&cfg("jamba-release-shape"), budget, 1, 2).unwrap();
        let m = max_context(&cfg("mixtral-8x7b-shape"), budget, 1, 2).unwrap();
        assert!(j >= 2 * m, "{j} vs {m}");
    }

    #[test]
    fn report_renders() {
        let r = cost_report("jamba-release-shape", &cfg("jamba-release-shape"), 262_144, 2).unwrap();
        assert_eq!(r.layers.len(), 32);
        assert_eq!(r.layers.iter().map(|l| l.params).sum::<u64>() + 65536 * 4096 + 4096, r.total_params);
        let text = r.to_text();
        assert!(text.contains("4.00 GiB"), "{text}");
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["kv_bytes"], 4u64 << 30);
    }
}
