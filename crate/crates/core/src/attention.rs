//! Causal grouped-query self-attention with an append-only KV cache.
//!
//! No positional signal is injected unless `use_rope` is set; without it the
//! layer is permutation-covariant and order information has to come from
//! elsewhere in the stack.

use crate::config::{JambaConfig, Mixer};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor, Var};

pub const ROPE_BASE: f64 = 10000.0;

/// Projection weights, no biases. `W` is a tensor, a parameter index or a tape variable.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<W> {
    /// `[d_model, n_heads * head_dim]`
    pub w_q: W,
    /// `[d_model, n_kv_heads * head_dim]`
    pub w_k: W,
    /// `[d_model, n_kv_heads * head_dim]`
    pub w_v: W,
    /// `[n_heads * head_dim, d_model]`
    pub w_o: W,
}

impl<W> AttentionWeights<W> {
    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> AttentionWeights<U> {
        AttentionWeights { w_q: f(&self.w_q), w_k: f(&self.w_k), w_v: f(&self.w_v), w_o: f(&self.w_o) }
    }

    pub fn named(&self) -> [(&'static str, &W); 4] {
        [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v), ("w_o", &self.w_o)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub use_rope: bool,
}

impl AttentionShape {
    pub fn from_config(cfg: &JambaConfig) -> Self {
        AttentionShape {
            d_model: cfg.d_model,
            n_heads: cfg.n_heads,
            n_kv_heads: cfg.n_kv_heads,
            head_dim: cfg.head_dim,
            use_rope: cfg.use_rope,
        }
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn weight_shapes(&self) -> AttentionWeights<Vec<usize>> {
        AttentionWeights {
            w_q: vec![self.d_model, self.q_width()],
            w_k: vec![self.d_model, self.kv_width()],
            w_v: vec![self.d_model, self.kv_width()],
            w_o: vec![self.q_width(), self.d_model],
        }
    }
}

impl<T: Real> AttentionWeights<Tensor<T>> {
    pub fn init(shape: &AttentionShape, std: f64, rng: &mut Rng) -> Self {
        shape.weight_shapes().map(|s| Tensor::randn(s, std, rng))
    }
}

/// Keys and values of every past token for one attention layer of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCacheLayer<T> {
    n_kv_heads: usize,
    head_dim: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Real> KVCacheLayer<T> {
    pub fn new(n_kv_heads: usize, head_dim: usize) -> Self {
        KVCacheLayer { n_kv_heads, head_dim, keys: Vec::new(), values: Vec::new() }
    }

    pub fn cached_len(&self) -> usize {
        self.keys.len() / (self.n_kv_heads * self.head_dim)
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// `[cached_len, n_kv_heads, head_dim]`
    pub fn keys(&self) -> Tensor<T> {
        Tensor::new(&[self.cached_len(), self.n_kv_heads, self.head_dim], self.keys.clone()).expect("consistent")
    }

    /// `[cached_len, n_kv_heads, head_dim]`
    pub fn values(&self) -> Tensor<T> {
        Tensor::new(&[self.cached_len(), self.n_kv_heads, self.head_dim], self.values.clone()).expect("consistent")
    }

    fn as_batch(&self, data: &[T]) -> Tensor<T> {
        let width = self.n_kv_heads * self.head_dim;
        Tensor::new(&[1, data.len() / width, width], data.to_vec()).expect("consistent")
    }

    fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) {
        self.keys.extend_from_slice(k.data());
        self.values.extend_from_slice(v.data());
    }

    /// Bytes held by keys and values at `bytes_per_value` each.
    pub fn bytes(&self, bytes_per_value: usize) -> usize {
        (self.keys.len() + self.values.len()) * bytes_per_value
    }
}

/// Output of [`attend_detailed`]: the layer output and the fused attention
/// node, whose saved probabilities can be read back from the tape.
pub struct AttentionOutput<'t, T: Real> {
    pub out: Var<'t, T>,
    pub core: Var<'t, T>,
}

/// Causal self-attention over `x: [batch, seq, d_model]`.
///
/// With a cache (batch must be 1) the new keys and values are appended and
/// queries are placed after the cached positions.
pub fn attend<'t, T: Real>(
    x: Var<'t, T>,
    w: &AttentionWeights<Var<'t, T>>,
    shape: &AttentionShape,
    cache: Option<&mut KVCacheLayer<T>>,
) -> Result<Var<'t, T>> {
    Ok(attend_detailed(x, w, shape, cache)?.out)
}

pub fn attend_detailed<'t, T: Real>(
    x: Var<'t, T>,
    w: &AttentionWeights<Var<'t, T>>,
    shape: &AttentionShape,
    cache: Option<&mut KVCacheLayer<T>>,
) -> Result<AttentionOutput<'t, T>> {
    let xs = x.shape();
    if xs.len() != 3 || xs[2] != shape.d_model {
        return Err(Error::ShapeMismatch(format!("attention input {xs:?}, d_model {}", shape.d_model)));
    }
    let batch = xs[0];
    let tape = x.tape();
    let mut q = x.matmul(w.w_q)?;
    let mut k = x.matmul(w.w_k)?;
    let v = x.matmul(w.w_v)?;

    let offset = cache.as_ref().map_or(0, |c| c.cached_len());
    if shape.use_rope {
        q = q.rope(shape.n_heads, shape.head_dim, offset, ROPE_BASE)?;
        k = k.rope(shape.n_kv_heads, shape.head_dim, offset, ROPE_BASE)?;
    }

    let core = match cache {
        None => q.attention(k, v, shape.n_heads, shape.n_kv_heads)?,
        Some(cache) => {
            if batch != 1 {
                return Err(Error::CacheBatch(batch));
            }
            if cache.n_kv_heads != shape.n_kv_heads || cache.head_dim != shape.head_dim {
                return Err(Error::CacheMismatch(format!(
                    "kv cache holds {}x{} heads, layer has {}x{}",
                    cache.n_kv_heads, cache.head_dim, shape.n_kv_heads, shape.head_dim
                )));
            }
            let (k_all, v_all) = if cache.cached_len() == 0 {
                (k, v)
            } else {
                let pk = tape.constant(cache.as_batch(&cache.keys))?;
                let pv = tape.constant(cache.as_batch(&cache.values))?;
                (pk.concat_seq(k)?, pv.concat_seq(v)?)
            };
            let core = q.attention(k_all, v_all, shape.n_heads, shape.n_kv_heads)?;
            cache.append(&k.value(), &v.value());
            core
        }
    };
    let out = core.matmul(w.w_o)?;
    Ok(AttentionOutput { out, core })
}

/// The same layer with the causal mask removed, so every position sees
/// every other. Used to isolate the absence of positional signal from the
/// ordering the mask itself imposes.
pub fn attend_unmasked<'t, T: Real>(
    x: Var<'t, T>,
    w: &AttentionWeights<Var<'t, T>>,
    shape: &AttentionShape,
) -> Result<Var<'t, T>> {
    let xs = x.shape();
    if xs.len() != 3 || xs[2] != shape.d_model {
        return Err(Error::ShapeMismatch(format!("attention input {xs:?}, d_model {}", shape.d_model)));
    }
    let mut q = x.matmul(w.w_q)?;
    let mut k = x.matmul(w.w_k)?;
    let v = x.matmul(w.w_v)?;
    if shape.use_rope {
        q = q.rope(shape.n_heads, shape.head_dim, 0, ROPE_BASE)?;
        k = k.rope(shape.n_kv_heads, shape.head_dim, 0, ROPE_BASE)?;
    }
    Ok(q.attention_masked(k, v, shape.n_heads, shape.n_kv_heads, false)?.matmul(w.w_o)?)
}

/// Bytes of KV cache for `context_len` tokens:
/// `2 · attention layers · n_kv_heads · head_dim · context_len · bytes_per_value`.
pub fn kv_bytes(config: &JambaConfig, context_len: u64, bytes_per_value: u64) -> u64 {
    let attn_layers = match crate::config::resolve_schedule(config) {
        Ok(s) => s.count_mixer(Mixer::Attention),
        Err(_) => config.n_layers() * config.attn_ratio / (config.attn_ratio + config.mamba_ratio).max(1),
    } as u64;
    2 * attn_layers * config.n_kv_heads as u64 * config.head_dim as u64 * context_len * bytes_per_value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::numerics::Tape;

    fn shape(n_heads: usize, n_kv_heads: usize, head_dim: usize, use_rope: bool) -> AttentionShape {
        AttentionShape { d_model: 8, n_heads, n_kv_heads, head_dim, use_rope }
    }

    fn bind<'t>(tape: &'t Tape<f64>, w: &AttentionWeights<Tensor<f64>>) -> AttentionWeights<Var<'t, f64>> {
        w.map(|t| tape.constant(t.clone()).unwrap())
    }

    /// Textbook multi-head attention, one head at a time, no sharing.
    fn reference_mha(x: &Tensor<f64>, w: &AttentionWeights<Tensor<f64>>, heads: usize, hd: usize) -> Vec<f64> {
        let (s, d) = (x.shape()[1], x.shape()[2]);
        let proj = |m: &Tensor<f64>| crate::numerics::matmul(x, m).unwrap();
        let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
        let width = heads * hd;
        let mut ctx = vec![0.0; s * width];
        for h in 0..heads {
            for i in 0..s {
                let mut scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..hd).map(|e| q.data()[i * width + h * hd + e] * k.data()[j * width + h * hd + e]).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter_mut().map(|v| {
                    *v = (*v - m).exp();
                    *v
                }).sum();
                for (j, p) in scores.iter().enumerate() {
                    for e in 0..hd {
                        ctx[i * width + h * hd + e] += p / z * v.data()[j * width + h * hd + e];
                    }
                }
            }
        }
        let ctx = Tensor::new(&[1, s, width], ctx).unwrap();
        let _ = d;
        crate::numerics::matmul(&ctx, &w.w_o).unwrap().into_data()
    }

    #[test]
    fn single_token_attends_to_itself_only() {
        let mut rng = Rng::new(1);
        let sh = shape(2, 1, 4, false);
        let w = AttentionWeights::<Tensor<f64>>::init(&sh, 0.5, &mut rng);
        let x = Tensor::randn(&[1, 1, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let wv = bind(&tape, &w);
        let xv = tape.constant(x.clone()).unwrap();
        let out = attend_detailed(xv, &wv, &sh, None).unwrap();
        let (_, probs) = tape.attention_probs(out.core).unwrap();
        assert!(probs.iter().all(|&p| p == 1.0));
        // with weight 1 the context is exactly the value row, replicated per group
        let v = crate::numerics::matmul(&x, &w.w_v).unwrap();
        let ctx: Vec<f64> = [v.data(), v.data()].concat();
        let expect = crate::numerics::matmul(&Tensor::new(&[1, 1, 8], ctx).unwrap(), &w.w_o).unwrap();
        assert_eq!(out.out.value().data(), expect.data());
    }

    #[test]
    fn gqa_with_equal_heads_matches_reference_mha() {
        let mut rng = Rng::new(2);
        let sh = shape(2, 2, 4, false);
        let w = AttentionWeights::<Tensor<f64>>::init(&sh, 0.5, &mut rng);
        let x = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let out = attend(tape.constant(x.clone()).unwrap(), &bind(&tape, &w), &sh, None).unwrap();
        let reference = reference_mha(&x, &w, 2, 4);
        for (a, b) in out.value().data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn cached_decode_matches_full_sequence() {
        for use_rope in [false, true] {
            let mut rng = Rng::new(3);
            let sh = shape(4, 2, 2, use_rope);
            let w = AttentionWeights::<Tensor<f64>>::init(&sh, 0.5, &mut rng);
            let x = Tensor::randn(&[1, 12, 8], 1.0, &mut rng);
            let full = {
                let tape = Tape::new();
                attend(tape.constant(x.clone()).unwrap(), &bind(&tape, &w), &sh, None).unwrap().value().as_ref().clone()
            };
            let mut cache = KVCacheLayer::new(2, 2);
            let mut max_diff: f64 = 0.0;
            for t in 0..12 {
                let tape = Tape::new();
                let xt = Tensor::new(&[1, 1, 8], x.data()[t * 8..(t + 1) * 8].to_vec()).unwrap();
                let y = attend(tape.constant(xt).unwrap(), &bind(&tape, &w), &sh, Some(&mut cache)).unwrap();
                for (a, b) in y.value().data().iter().zip(&full.data()[t * 8..(t + 1) * 8]) {
                    max_diff = max_diff.max((a - b).abs());
                }
            }
            assert_eq!(cache.cached_len(), 12);
            assert!(max_diff < 1e-10, "rope={use_rope}: {max_diff}");
        }
    }

    #[test]
    fn cache_requires_batch_one() {
        let mut rng = Rng::new(4);
        let sh = shape(2, 1, 4, false);
        let w = AttentionWeights::<Tensor<f64>>::init(&sh, 0.5, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 8], 1.0, &mut rng)).unwrap();
        let mut cache = KVCacheLayer::new(1, 4);
        assert!(matches!(attend(x, &bind(&tape, &w), &sh, Some(&mut cache)), Err(Error::CacheBatch(2))));
    }

    #[test]
    fn causality_is_bitwise() {
        let mut rng = Rng::new(5);
        let sh = shape(2, 1, 4, true);
        let w = AttentionWeights::<Tensor<f64>>::init(&sh, 0.5, &mut rng);
        let x = Tensor::randn(&[1, 8, 8], 1.0, &mut rng);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[5 * 8..] {
            *v += 3.0;
        }
        let run = |x: &Tensor<f64>| {
            let tape = Tape::new();
            attend(tape.constant(x.clone()).unwrap(), &bind(&tape, &w), &sh, None).unwrap().value().as_ref().clone()
        };
        let (a, b) = (run(&x), run(&x2));
        assert_eq!(a.data()[..5 * 8], b.data()[..5 * 8]);
        assert_ne!(a.data()[5 * 8..], b.data()[5 * 8..]);
    }

    #[test]
    fn kv_bytes_table_rows() {
        let jamba = preset("jamba-release-shape").unwrap().config;
        assert_eq!(kv_bytes(&jamba, 262_144, 2), 2 * 4 * 8 * 128 * 262_144 * 2);
        assert_eq!(kv_bytes(&jamba, 262_144, 2), 4 << 30);
        let mixtral = preset("mixtral-8x7b-shape").unwrap().config;
        assert_eq!(kv_bytes(&mixtral, 262_144, 2), 32 << 30);
        assert_eq!(kv_bytes(&mixtral, 0, 2), 0);
    }
}
