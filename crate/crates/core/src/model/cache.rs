use super::JambaModel;
use crate::attention::KVCacheLayer;
use crate::config::Mixer;
use crate::error::{Error, Result};
use crate::mamba::{MambaShape, MambaStateLayer};
use crate::numerics::Real;

/// Per-layer decoding state: growing keys/values for attention layers,
/// fixed-size recurrent state for Mamba layers.
#[derive(Clone, Debug, PartialEq)]
pub enum CacheSlot<T> {
    Attention(KVCacheLayer<T>),
    Mamba(MambaStateLayer<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridCache<T> {
    pub(crate) slots: Vec<CacheSlot<T>>,
    pub(crate) position: usize,
}

impl<T: Real> HybridCache<T> {
    pub fn new(model: &JambaModel<T>) -> Self {
        let cfg = model.config();
        let mshape = MambaShape::from_config(cfg);
        let slots = model
            .schedule()
            .entries
            .iter()
            .map(|e| match e.mixer {
                Mixer::Attention => CacheSlot::Attention(KVCacheLayer::new(cfg.n_kv_heads, cfg.head_dim)),
                Mixer::Mamba => CacheSlot::Mamba(MambaStateLayer::new(&mshape)),
            })
            .collect();
        HybridCache { slots, position: 0 }
    }

    /// Tokens consumed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn slots(&self) -> &[CacheSlot<T>] {
        &self.slots
    }

    /// Fails unless every slot has the kind and dimensions the model expects.
    pub fn check(&self, model: &JambaModel<T>) -> Result<()> {
        let entries = &model.schedule().entries;
        if entries.len() != self.slots.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, model has {}",
                self.slots.len(),
                entries.len()
            )));
        }
        let fresh = HybridCache::new(model);
        for (i, (have, want)) in self.slots.iter().zip(&fresh.slots).enumerate() {
            let ok = match (have, want) {
                (CacheSlot::Attention(a), CacheSlot::Attention(b)) => {
                    a.n_kv_heads() == b.n_kv_heads() && a.head_dim() == b.head_dim() && a.cached_len() == self.position
                }
                (CacheSlot::Mamba(a), CacheSlot::Mamba(b)) => {
                    a.ssm.shape() == b.ssm.shape()
                        && a.conv_window.shape() == b.conv_window.shape()
                        && a.seen == self.position
                }
                _ => false,
            };
            if !ok {
                return Err(Error::CacheMismatch(format!("layer {i} does not match the model schedule")));
            }
        }
        Ok(())
    }

    /// Bytes of state held, at `bytes_per_value` per element.
    pub fn bytes(&self, bytes_per_value: usize) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                CacheSlot::Attention(kv) => kv.bytes(bytes_per_value),
                CacheSlot::Mamba(m) => (m.ssm.numel() + m.conv_window.numel()) * bytes_per_value,
            })
            .sum()
    }
}
