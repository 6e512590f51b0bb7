//! Full decoder: token embedding, scheduled layers, final norm and a head
//! tied to the embedding.
//!
//! Each layer is `x += mixer(rmsnorm(x)); x += ffn(rmsnorm(x))`, where the
//! mixer is attention or Mamba and the ffn is a plain MLP or an MoE.

mod cache;
pub mod checkpoint;

use crate::attention::{self, AttentionShape, AttentionWeights};
use crate::config::{resolve_schedule, JambaConfig, LayerSchedule, Mixer, MlpKind, RMS_EPS};
use crate::error::{Error, Result};
use crate::mamba::{self, MambaShape, MambaWeights};
use crate::moe::{self, MlpWeights, MoeWeights, RoutingRecord};
use crate::numerics::{NumericsError, Real, Rng, Tape, Tensor, Var};

pub use cache::{CacheSlot, HybridCache};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub enum MixerWeights<W> {
    Attention(AttentionWeights<W>),
    Mamba(MambaWeights<W>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnWeights<W> {
    Plain(MlpWeights<W>),
    MoE(MoeWeights<W>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<W> {
    pub norm_mixer: W,
    pub mixer: MixerWeights<W>,
    pub norm_ffn: W,
    pub ffn: FfnWeights<W>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<W> {
    /// `[vocab_size, d_model]`, also the output projection
    pub embed: W,
    pub final_norm: W,
    pub layers: Vec<LayerWeights<W>>,
}

impl<W> ModelWeights<W> {
    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> ModelWeights<U> {
        let embed = f(&self.embed);
        let final_norm = f(&self.final_norm);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                norm_mixer: f(&l.norm_mixer),
                mixer: match &l.mixer {
                    MixerWeights::Attention(a) => MixerWeights::Attention(a.map(&mut f)),
                    MixerWeights::Mamba(m) => MixerWeights::Mamba(m.map(&mut f)),
                },
                norm_ffn: f(&l.norm_ffn),
                ffn: match &l.ffn {
                    FfnWeights::Plain(m) => FfnWeights::Plain(m.map(&mut f)),
                    FfnWeights::MoE(m) => FfnWeights::MoE(m.map(&mut f)),
                },
            })
            .collect();
        ModelWeights { embed, final_norm, layers }
    }

    /// Every array with a stable dotted name, in storage order.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("final_norm".to_string(), &self.final_norm)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm_mixer"), &l.norm_mixer));
            match &l.mixer {
                MixerWeights::Attention(a) => {
                    out.extend(a.named().into_iter().map(|(n, w)| (format!("layers.{i}.attn.{n}"), w)))
                }
                MixerWeights::Mamba(m) => {
                    out.extend(m.named().into_iter().map(|(n, w)| (format!("layers.{i}.mamba.{n}"), w)))
                }
            }
            out.push((format!("layers.{i}.norm_ffn"), &l.norm_ffn));
            match &l.ffn {
                FfnWeights::Plain(m) => {
                    out.extend(m.named().into_iter().map(|(n, w)| (format!("layers.{i}.mlp.{n}"), w)))
                }
                FfnWeights::MoE(m) => {
                    out.push((format!("layers.{i}.moe.router"), &m.router));
                    for (e, ex) in m.experts.iter().enumerate() {
                        out.extend(ex.named().into_iter().map(|(n, w)| (format!("layers.{i}.moe.experts.{e}.{n}"), w)));
                    }
                }
            }
        }
        out
    }

    pub fn flat(&self) -> Vec<&W> {
        self.named().into_iter().map(|(_, w)| w).collect()
    }

    /// Rebuilds a structure of the same layout from values in [`Self::named`] order.
    pub fn replace<U: Clone>(&self, values: &[U]) -> ModelWeights<U> {
        let mut it = values.iter();
        let shaped = self.map(|_| it.next().expect("enough values").clone());
        debug_assert!(it.next().is_none());
        shaped
    }
}

/// Array shapes of a model built from `config`.
pub fn weight_shapes(config: &JambaConfig, schedule: &LayerSchedule) -> ModelWeights<Vec<usize>> {
    let d = config.d_model;
    let layers = schedule
        .entries
        .iter()
        .map(|e| LayerWeights {
            norm_mixer: vec![d],
            mixer: match e.mixer {
                Mixer::Attention => MixerWeights::Attention(AttentionShape::from_config(config).weight_shapes()),
                Mixer::Mamba => MixerWeights::Mamba(MambaShape::from_config(config).weight_shapes()),
            },
            norm_ffn: vec![d],
            ffn: match e.mlp {
                MlpKind::Plain => FfnWeights::Plain(MlpWeights::shapes(d, config.mlp_hidden)),
                MlpKind::MoE => FfnWeights::MoE(MoeWeights::shapes(d, config.mlp_hidden, config.n_experts)),
            },
        })
        .collect();
    ModelWeights { embed: vec![config.vocab_size, d], final_norm: vec![d], layers }
}

/// Validated array layout of a model built from `config`.
pub fn layout(config: &JambaConfig) -> Result<ModelWeights<Vec<usize>>> {
    config.validate()?;
    Ok(weight_shapes(config, &resolve_schedule(config)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct JambaModel<T> {
    config: JambaConfig,
    schedule: LayerSchedule,
    pub weights: ModelWeights<Tensor<T>>,
}

/// Everything a forward pass exposes besides the logits.
pub struct ForwardOutput<'t, T: Real> {
    /// `[batch, seq, vocab]`
    pub logits: Var<'t, T>,
    /// Sum of load-balance losses over MoE layers; a zero constant without any.
    pub aux_loss: Var<'t, T>,
    pub routing: Vec<(usize, RoutingRecord)>,
    /// Fused attention nodes by layer, for reading probabilities off the tape.
    pub attention: Vec<(usize, Var<'t, T>)>,
    /// Largest |activation| of the residual stream after each layer.
    pub residual_max_abs: Vec<f64>,
    /// Largest pre-norm |value| on Mamba's Δ/B/C streams, by layer.
    pub mamba_stream_max_abs: Vec<(usize, f64)>,
}

impl<T: Real> JambaModel<T> {
    /// Deterministic initialization: normal(0, 0.02) projections and
    /// embedding, unit norm gains, Mamba-specific initializers.
    pub fn init(config: &JambaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = resolve_schedule(config)?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let embed = Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng);
        let layers = schedule
            .entries
            .iter()
            .map(|e| {
                let mut lrng = rng.fork(e.index as u64);
                LayerWeights {
                    norm_mixer: Tensor::full(&[d], T::one()),
                    mixer: match e.mixer {
                        Mixer::Attention => MixerWeights::Attention(AttentionWeights::init(
                            &AttentionShape::from_config(config),
                            INIT_STD,
                            &mut lrng,
                        )),
                        Mixer::Mamba => MixerWeights::Mamba(MambaWeights::init(
                            &MambaShape::from_config(config),
                            INIT_STD,
                            &mut lrng,
                        )),
                    },
                    norm_ffn: Tensor::full(&[d], T::one()),
                    ffn: match e.mlp {
                        MlpKind::Plain => FfnWeights::Plain(MlpWeights::init(d, config.mlp_hidden, INIT_STD, &mut lrng)),
                        MlpKind::MoE => FfnWeights::MoE(MoeWeights::init(
                            d,
                            config.mlp_hidden,
                            config.n_experts,
                            INIT_STD,
                            &mut lrng,
                        )),
                    },
                }
            })
            .collect();
        Ok(JambaModel {
            config: config.clone(),
            schedule,
            weights: ModelWeights { embed, final_norm: Tensor::full(&[d], T::one()), layers },
        })
    }

    /// Wraps existing weights after checking every shape against `config`.
    pub fn from_weights(config: &JambaConfig, weights: ModelWeights<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let schedule = resolve_schedule(config)?;
        let expected = weight_shapes(config, &schedule);
        let ok = expected.layers.len() == weights.layers.len() && {
            let (a, b) = (expected.named(), weights.named());
            a.len() == b.len() && a.iter().zip(&b).all(|((na, s), (nb, t))| na == nb && s.as_slice() == t.shape())
        };
        if !ok {
            return Err(Error::ShapeMismatch("weights do not match the configured layout".into()));
        }
        Ok(JambaModel { config: config.clone(), schedule, weights })
    }

    pub fn config(&self) -> &JambaConfig {
        &self.config
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn param_count(&self) -> usize {
        self.weights.flat().iter().map(|t| t.numel()).sum()
    }

    /// Weights as constants on `tape`.
    pub fn bind_constants<'t>(&self, tape: &'t Tape<T>) -> Result<ModelWeights<Var<'t, T>>> {
        let vars = self.weights.flat().into_iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>, _>>()?;
        Ok(self.weights.replace(&vars))
    }

    /// Weights as trainable leaves on `tape`.
    pub fn bind_params<'t>(&self, tape: &'t Tape<T>) -> Result<ModelWeights<Var<'t, T>>> {
        let vars = self.weights.flat().into_iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
        Ok(self.weights.replace(&vars))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(Error::VocabOverflow { token, vocab }),
            None => Ok(()),
        }
    }

    /// Forward over `tokens` laid out `[batch, seq]` row-major, with weights
    /// already bound to `x`'s tape. A cache (batch 1) is read and advanced.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape<T>,
        w: &ModelWeights<Var<'t, T>>,
        tokens: &[usize],
        batch: usize,
        mut cache: Option<&mut HybridCache<T>>,
    ) -> Result<ForwardOutput<'t, T>> {
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::ShapeMismatch(format!("{} tokens in {batch} rows", tokens.len())));
        }
        self.check_tokens(tokens)?;
        if let Some(c) = cache.as_deref() {
            c.check(self)?;
        }
        let seq = tokens.len() / batch;
        let mut x = w.embed.embedding(tokens, &[batch, seq])?;
        let mut aux: Option<Var<'t, T>> = None;
        let mut out_routing = Vec::new();
        let mut out_attn = Vec::new();
        let mut residual = Vec::with_capacity(w.layers.len());
        let mut streams = Vec::new();
        let attn_shape = AttentionShape::from_config(&self.config);
        let mamba_shape = MambaShape::from_config(&self.config);

        for (i, lw) in w.layers.iter().enumerate() {
            let mut slot = cache.as_deref_mut().map(|c| &mut c.slots[i]);
            let mut layer = |x: Var<'t, T>| -> Result<_> {
                let h = x.rmsnorm(lw.norm_mixer, RMS_EPS)?;
                let mut core = None;
                let mut stream = None;
                let mixed = match (&lw.mixer, slot.as_deref_mut()) {
                    (MixerWeights::Attention(a), s) => {
                        let kv = match s {
                            Some(CacheSlot::Attention(kv)) => Some(kv),
                            None => None,
                            Some(_) => return Err(Error::CacheMismatch(format!("layer {i} slot kind"))),
                        };
                        let o = attention::attend_detailed(h, a, &attn_shape, kv)?;
                        core = Some(o.core);
                        o.out
                    }
                    (MixerWeights::Mamba(m), s) => {
                        let st = match s {
                            Some(CacheSlot::Mamba(st)) => Some(st),
                            None => None,
                            Some(_) => return Err(Error::CacheMismatch(format!("layer {i} slot kind"))),
                        };
                        let tr = mamba::mamba_forward_traced(h, m, &mamba_shape, st)?;
                        stream = Some(tr.pre_norm_max_abs);
                        tr.out
                    }
                };
                let x = x.add(mixed)?;
                let h = x.rmsnorm(lw.norm_ffn, RMS_EPS)?;
                let (f, routed) = match &lw.ffn {
                    FfnWeights::Plain(m) => (moe::mlp(h, m)?, None),
                    FfnWeights::MoE(m) => {
                        let o = moe::route_and_combine(h, m, self.config.top_k)?;
                        let lb = moe::load_balance_loss(&o, self.config.load_balance_alpha)?;
                        (o.y, Some((lb, o.record)))
                    }
                };
                Ok((x.add(f)?, core, stream, routed))
            };
            let (next, core, stream, routed) = layer(x).map_err(|e| overflow_at(i, e))?;
            x = next;
            residual.push(x.value().max_abs());
            if let Some(c) = core {
                out_attn.push((i, c));
            }
            if let Some(s) = stream {
                streams.push((i, s));
            }
            if let Some((lb, record)) = routed {
                aux = Some(match aux {
                    Some(a) => a.add(lb)?,
                    None => lb,
                });
                out_routing.push((i, record));
            }
        }
        let n_layers = w.layers.len();
        let logits = x
            .rmsnorm(w.final_norm, RMS_EPS)
            .and_then(|h| h.matmul_nt(w.embed))
            .map_err(|e| overflow_at(n_layers, e.into()))?;
        if let Some(c) = cache {
            c.position += seq;
        }
        let aux_loss = match aux {
            Some(a) => a,
            None => tape.constant(Tensor::scalar(T::zero()))?,
        };
        Ok(ForwardOutput {
            logits,
            aux_loss,
            routing: out_routing,
            attention: out_attn,
            residual_max_abs: residual,
            mamba_stream_max_abs: streams,
        })
    }

    /// Logits `[batch, seq, vocab]` and the auxiliary loss for a batch of
    /// sequences, without gradients.
    pub fn forward_train(&self, tokens: &[usize], batch: usize) -> Result<(Tensor<T>, f64)> {
        let tape = Tape::new();
        let w = self.bind_constants(&tape)?;
        let out = self.forward_with(&tape, &w, tokens, batch, None)?;
        let aux = out.aux_loss.value().item().f64();
        Ok((out.logits.value().as_ref().clone(), aux))
    }

    /// Feeds `tokens` through the cache and returns logits `[len, vocab]`.
    pub fn forward_cached(&self, cache: &mut HybridCache<T>, tokens: &[usize]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let w = self.bind_constants(&tape)?;
        let out = self.forward_with(&tape, &w, tokens, 1, Some(cache))?;
        let v = self.config.vocab_size;
        Ok(out.logits.value().as_ref().clone().reshape(&[tokens.len(), v])?)
    }

    /// One token of incremental decoding; returns `[vocab]` logits.
    pub fn decode_step(&self, cache: &mut HybridCache<T>, token: usize) -> Result<Tensor<T>> {
        let v = self.config.vocab_size;
        Ok(self.forward_cached(cache, &[token])?.reshape(&[v])?)
    }

    pub fn new_cache(&self) -> HybridCache<T> {
        HybridCache::new(self)
    }
}

fn overflow_at(layer: usize, e: Error) -> Error {
    match e {
        Error::Numerics(source @ NumericsError::NonFinite { .. }) => Error::NumericOverflow { layer, source },
        other => other,
    }
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
