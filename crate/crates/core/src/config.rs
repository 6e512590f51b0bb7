//! Architecture configuration, validation and layer scheduling.
//!
//! A model is a stack of `n_blocks` blocks of `n_layers_per_block` layers.
//! Inside every group of `attn_ratio + mamba_ratio` consecutive layers,
//! `attn_ratio` layers use attention as their sequence mixer and the rest
//! use a selective state-space (Mamba) mixer. Every `moe_every`-th layer
//! replaces its MLP with a mixture of experts.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default epsilon for every RMSNorm in the model.
pub const RMS_EPS: f64 = 1e-6;

fn default_alpha() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Every architectural degree of freedom plus the dimensions needed to
/// instantiate or cost a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JambaConfig {
    pub d_model: usize,
    /// Layers per block (`l`).
    pub n_layers_per_block: usize,
    pub n_blocks: usize,
    /// Attention layers per group (`a`).
    pub attn_ratio: usize,
    /// Mamba layers per group (`m`).
    pub mamba_ratio: usize,
    /// MoE period (`e`); 0 disables MoE everywhere.
    pub moe_every: usize,
    /// Phase of the MoE period: layer `i` (1-based) is MoE iff `(i + moe_phase) % moe_every == 0`.
    #[serde(default)]
    pub moe_phase: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub mamba_d_state: usize,
    pub mamba_expand: usize,
    pub mamba_conv_kernel: usize,
    pub mamba_dt_rank: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub use_rope: bool,
    #[serde(default = "default_true")]
    pub use_inner_mamba_norm: bool,
    #[serde(default = "default_alpha")]
    pub load_balance_alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    DimensionMismatch,
    DivisibilityViolation,
    RangeViolation,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::DimensionMismatch => "dimension-mismatch",
            ViolationKind::DivisibilityViolation => "divisibility-violation",
            ViolationKind::RangeViolation => "range-violation",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

fn join(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("malformed config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

impl JambaConfig {
    pub fn n_layers(&self) -> usize {
        self.n_layers_per_block * self.n_blocks
    }

    pub fn d_inner(&self) -> usize {
        self.mamba_expand * self.d_model
    }

    pub fn moe_enabled(&self) -> bool {
        self.moe_every > 0
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        use ViolationKind::*;
        let mut out = Vec::new();
        let mut push = |kind, message: String| out.push(Violation { kind, message });

        let positive = [
            ("d_model", self.d_model),
            ("n_layers_per_block", self.n_layers_per_block),
            ("n_blocks", self.n_blocks),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("mamba_d_state", self.mamba_d_state),
            ("mamba_expand", self.mamba_expand),
            ("mamba_conv_kernel", self.mamba_conv_kernel),
            ("mamba_dt_rank", self.mamba_dt_rank),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                push(RangeViolation, format!("{name} must be positive"));
            }
        }

        let group = self.attn_ratio + self.mamba_ratio;
        if group == 0 {
            push(RangeViolation, "attn_ratio + mamba_ratio must be positive".into());
        } else if !self.n_layers_per_block.is_multiple_of(group) {
            push(
                DivisibilityViolation,
                format!(
                    "attn_ratio + mamba_ratio = {group} does not divide n_layers_per_block = {}",
                    self.n_layers_per_block
                ),
            );
        }

        if self.moe_every > 0 {
            if !self.n_layers_per_block.is_multiple_of(self.moe_every) {
                push(
                    DivisibilityViolation,
                    format!(
                        "moe_every = {} does not divide n_layers_per_block = {}",
                        self.moe_every, self.n_layers_per_block
                    ),
                );
            }
            if self.moe_phase >= self.moe_every {
                push(
                    RangeViolation,
                    format!("moe_phase = {} must be < moe_every = {}", self.moe_phase, self.moe_every),
                );
            }
        } else if self.moe_phase != 0 {
            push(RangeViolation, "moe_phase must be 0 when moe_every = 0".into());
        }

        if self.top_k > self.n_experts {
            push(
                RangeViolation,
                format!("top_k = {} exceeds n_experts = {}", self.top_k, self.n_experts),
            );
        }
        if self.n_kv_heads > 0 && !self.n_heads.is_multiple_of(self.n_kv_heads) {
            push(
                DivisibilityViolation,
                format!(
                    "n_kv_heads = {} does not divide n_heads = {}",
                    self.n_kv_heads, self.n_heads
                ),
            );
        }
        if self.n_heads * self.head_dim != self.d_model {
            push(
                DimensionMismatch,
                format!(
                    "n_heads * head_dim = {} != d_model = {}",
                    self.n_heads * self.head_dim,
                    self.d_model
                ),
            );
        }
        if self.use_rope && !self.head_dim.is_multiple_of(2) {
            push(DimensionMismatch, "head_dim must be even when use_rope is set".into());
        }
        if !(self.load_balance_alpha >= 0.0 && self.load_balance_alpha.is_finite()) {
            push(RangeViolation, "load_balance_alpha must be finite and nonnegative".into());
        }

        if out.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(out))
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: JambaConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A small hybrid shape used throughout tests and demos; not a preset.
    pub fn toy(d_model: usize, n_layers_per_block: usize, attn_ratio: usize, mamba_ratio: usize) -> Self {
        let n_heads = 4.min(d_model).max(1);
        JambaConfig {
            d_model,
            n_layers_per_block,
            n_blocks: 1,
            attn_ratio,
            mamba_ratio,
            moe_every: 0,
            moe_phase: 0,
            n_experts: 1,
            top_k: 1,
            n_heads,
            n_kv_heads: if n_heads % 2 == 0 { n_heads / 2 } else { n_heads },
            head_dim: d_model / n_heads,
            mamba_d_state: 16,
            mamba_expand: 2,
            mamba_conv_kernel: 4,
            mamba_dt_rank: default_dt_rank(d_model),
            mlp_hidden: 2 * d_model,
            vocab_size: 32,
            use_rope: false,
            use_inner_mamba_norm: true,
            load_balance_alpha: 0.01,
        }
    }
}

/// `ceil(d_model / 16)`.
pub fn default_dt_rank(d_model: usize) -> usize {
    d_model.div_ceil(16)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mixer {
    Attention,
    Mamba,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MlpKind {
    Plain,
    MoE,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub index: usize,
    pub mixer: Mixer,
    pub mlp: MlpKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub entries: Vec<LayerPlan>,
}

impl LayerSchedule {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_mixer(&self, mixer: Mixer) -> usize {
        self.entries.iter().filter(|e| e.mixer == mixer).count()
    }

    pub fn count_moe(&self) -> usize {
        self.entries.iter().filter(|e| e.mlp == MlpKind::MoE).count()
    }

    /// Compact form such as `MMMAMMMM`, lower-case letters marking MoE layers.
    pub fn pattern(&self) -> String {
        self.entries
            .iter()
            .map(|e| match (e.mixer, e.mlp) {
                (Mixer::Attention, MlpKind::Plain) => 'A',
                (Mixer::Attention, MlpKind::MoE) => 'a',
                (Mixer::Mamba, MlpKind::Plain) => 'M',
                (Mixer::Mamba, MlpKind::MoE) => 'm',
            })
            .collect()
    }
}

/// 0-based offsets of the attention layers inside one group of
/// `attn + mamba` layers. The group is cut into `attn` near-equal segments
/// and each segment holds one attention layer at its (lower) middle, so a
/// single attention layer sits at offset `mamba / 2`.
pub fn attention_offsets(attn: usize, mamba: usize) -> Vec<usize> {
    let group = attn + mamba;
    (0..attn)
        .map(|j| {
            let start = j * group / attn;
            let end = (j + 1) * group / attn;
            start + (end - start - 1) / 2
        })
        .collect()
}

pub fn resolve_schedule(config: &JambaConfig) -> Result<LayerSchedule, ConfigError> {
    config.validate()?;
    let group = config.attn_ratio + config.mamba_ratio;
    let offsets = attention_offsets(config.attn_ratio, config.mamba_ratio);
    let entries = (0..config.n_layers())
        .map(|index| {
            let mixer = if offsets.contains(&(index % group)) {
                Mixer::Attention
            } else {
                Mixer::Mamba
            };
            let one_based = index + 1;
            let mlp = if config.moe_every > 0 && (one_based + config.moe_phase).is_multiple_of(config.moe_every) {
                MlpKind::MoE
            } else {
                MlpKind::Plain
            };
            LayerPlan { index, mixer, mlp }
        })
        .collect();
    Ok(LayerSchedule { entries })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PresetModel {
    pub name: &'static str,
    pub config: JambaConfig,
    pub notes: &'static str,
}

pub const PRESET_NAMES: &[&str] = &[
    "jamba-release-shape",
    "llama2-7b-shape",
    "mistral-7b-shape",
    "mixtral-8x7b-shape",
    "toy-1m",
    "toy-10m",
];

/// Dense decoder with one attention layer per group and no Mamba layers.
fn attention_only(
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    n_kv_heads: usize,
    mlp_hidden: usize,
    vocab_size: usize,
) -> JambaConfig {
    JambaConfig {
        d_model,
        n_layers_per_block: n_layers,
        n_blocks: 1,
        attn_ratio: 1,
        mamba_ratio: 0,
        moe_every: 0,
        moe_phase: 0,
        n_experts: 1,
        top_k: 1,
        n_heads,
        n_kv_heads,
        head_dim: d_model / n_heads,
        mamba_d_state: 16,
        mamba_expand: 2,
        mamba_conv_kernel: 4,
        mamba_dt_rank: default_dt_rank(d_model),
        mlp_hidden,
        vocab_size,
        use_rope: true,
        use_inner_mamba_norm: false,
        load_balance_alpha: 0.01,
    }
}

pub fn preset(name: &str) -> Result<PresetModel, ConfigError> {
    let p = match name {
        "jamba-release-shape" => PresetModel {
            name: "jamba-release-shape",
            config: JambaConfig {
                d_model: 4096,
                n_layers_per_block: 8,
                n_blocks: 4,
                attn_ratio: 1,
                mamba_ratio: 7,
                moe_every: 2,
                moe_phase: 0,
                n_experts: 16,
                top_k: 2,
                n_heads: 32,
                n_kv_heads: 8,
                head_dim: 128,
                mamba_d_state: 16,
                mamba_expand: 2,
                mamba_conv_kernel: 4,
                mamba_dt_rank: 256,
                mlp_hidden: 14336,
                vocab_size: 65536,
                use_rope: false,
                use_inner_mamba_norm: true,
                load_balance_alpha: 0.01,
            },
            notes: "4 blocks of l=8, a:m=1:7, e=2, n=16, K=2; 8 KV heads of width 128. \
                    d_model=4096, n_heads=32 and mlp_hidden=14336 are assumed (7B-family widths); \
                    vocabulary 64K.",
        },
        "llama2-7b-shape" => PresetModel {
            name: "llama2-7b-shape",
            config: attention_only(4096, 32, 32, 32, 11008, 32000),
            notes: "Llama-2 7B public architecture: 32 layers, 32 heads (no GQA), head_dim 128, \
                    MLP 11008, vocab 32000. Head is tied here, so totals run ~2% under the \
                    published 6.7B.",
        },
        "mistral-7b-shape" => PresetModel {
            name: "mistral-7b-shape",
            config: attention_only(4096, 32, 32, 8, 14336, 32000),
            notes: "Mistral 7B public architecture: 32 layers, 32 query heads, 8 KV heads, \
                    head_dim 128, MLP 14336, vocab 32000.",
        },
        "mixtral-8x7b-shape" => PresetModel {
            name: "mixtral-8x7b-shape",
            config: JambaConfig {
                moe_every: 1,
                n_experts: 8,
                top_k: 2,
                ..attention_only(4096, 32, 32, 8, 14336, 32000)
            },
            notes: "Mixtral 8x7B public architecture: Mistral 7B trunk with an 8-expert top-2 \
                    MoE in every layer.",
        },
        "toy-1m" => PresetModel {
            name: "toy-1m",
            config: JambaConfig {
                d_model: 128,
                n_layers_per_block: 8,
                n_blocks: 1,
                attn_ratio: 1,
                mamba_ratio: 7,
                moe_every: 2,
                moe_phase: 0,
                n_experts: 4,
                top_k: 2,
                n_heads: 4,
                n_kv_heads: 2,
                head_dim: 32,
                mamba_d_state: 16,
                mamba_expand: 2,
                mamba_conv_kernel: 4,
                mamba_dt_rank: 8,
                mlp_hidden: 128,
                vocab_size: 256,
                use_rope: false,
                use_inner_mamba_norm: true,
                load_balance_alpha: 0.01,
            },
            notes: "Desk-scale hybrid, one 8-layer block, roughly one million parameters.",
        },
        "toy-10m" => PresetModel {
            name: "toy-10m",
            config: JambaConfig {
                d_model: 256,
                n_layers_per_block: 8,
                n_blocks: 2,
                attn_ratio: 1,
                mamba_ratio: 7,
                moe_every: 2,
                moe_phase: 0,
                n_experts: 4,
                top_k: 2,
                n_heads: 8,
                n_kv_heads: 2,
                head_dim: 32,
                mamba_d_state: 16,
                mamba_expand: 2,
                mamba_conv_kernel: 4,
                mamba_dt_rank: 16,
                mlp_hidden: 256,
                vocab_size: 256,
                use_rope: false,
                use_inner_mamba_norm: true,
                load_balance_alpha: 0.01,
            },
            notes: "Desk-scale hybrid, two 8-layer blocks, roughly ten million parameters.",
        },
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    };
    Ok(p)
}

/// Resolves either a preset name or a path to a JSON config file.
pub fn load_config(spec: &str) -> Result<JambaConfig, ConfigError> {
    match preset(spec) {
        Ok(p) => Ok(p.config),
        Err(ConfigError::UnknownPreset(_)) if Path::new(spec).exists() => JambaConfig::from_json_file(spec),
        Err(e) => Err(e),
    }
}
