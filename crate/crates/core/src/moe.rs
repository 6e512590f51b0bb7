//! SwiGLU feed-forward blocks and top-k routed mixtures of them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<W> {
    /// `[d_model, hidden]`
    pub w_gate: W,
    /// `[d_model, hidden]`
    pub w_up: W,
    /// `[hidden, d_model]`
    pub w_down: W,
}

impl<W> MlpWeights<W> {
    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> MlpWeights<U> {
        MlpWeights { w_gate: f(&self.w_gate), w_up: f(&self.w_up), w_down: f(&self.w_down) }
    }

    pub fn named(&self) -> [(&'static str, &W); 3] {
        [("w_gate", &self.w_gate), ("w_up", &self.w_up), ("w_down", &self.w_down)]
    }
}

impl MlpWeights<Vec<usize>> {
    pub fn shapes(d_model: usize, hidden: usize) -> Self {
        MlpWeights { w_gate: vec![d_model, hidden], w_up: vec![d_model, hidden], w_down: vec![hidden, d_model] }
    }
}

impl<T: Real> MlpWeights<Tensor<T>> {
    pub fn init(d_model: usize, hidden: usize, std: f64, rng: &mut Rng) -> Self {
        MlpWeights::shapes(d_model, hidden).map(|s| Tensor::randn(s, std, rng))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeWeights<W> {
    /// `[d_model, n_experts]`
    pub router: W,
    pub experts: Vec<MlpWeights<W>>,
}

impl<W> MoeWeights<W> {
    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> MoeWeights<U> {
        MoeWeights { router: f(&self.router), experts: self.experts.iter().map(|e| e.map(&mut f)).collect() }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

impl MoeWeights<Vec<usize>> {
    pub fn shapes(d_model: usize, hidden: usize, n_experts: usize) -> Self {
        MoeWeights {
            router: vec![d_model, n_experts],
            experts: (0..n_experts).map(|_| MlpWeights::shapes(d_model, hidden)).collect(),
        }
    }
}

impl<T: Real> MoeWeights<Tensor<T>> {
    pub fn init(d_model: usize, hidden: usize, n_experts: usize, std: f64, rng: &mut Rng) -> Self {
        MoeWeights::shapes(d_model, hidden, n_experts).map(|s| Tensor::randn(s, std, rng))
    }
}

/// `W_down (silu(x W_gate) ⊙ x W_up)` over the last axis.
pub fn mlp<'t, T: Real>(x: Var<'t, T>, w: &MlpWeights<Var<'t, T>>) -> Result<Var<'t, T>> {
    let g = x.matmul(w.w_gate)?.silu()?;
    let u = x.matmul(w.w_up)?;
    Ok(g.mul(u)?.matmul(w.w_down)?)
}

/// Routing decisions for one MoE layer over a batch of tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoutingRecord {
    /// Selected experts per token, highest gate first.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized gate weights aligned with `selected`.
    pub weights: Vec<Vec<f64>>,
    /// Fraction of the `tokens * top_k` assignments each expert received.
    pub load: Vec<f64>,
    /// Router softmax probability of each expert, averaged over tokens.
    pub mean_probs: Vec<f64>,
}

pub struct MoeOutput<'t, T: Real> {
    pub y: Var<'t, T>,
    pub record: RoutingRecord,
    /// Differentiable version of `record.mean_probs`, shape `[n_experts]`.
    pub mean_probs: Var<'t, T>,
}

/// Routes each token to its `top_k` highest-scoring experts and sums their
/// outputs weighted by the softmax of the selected logits.
pub fn route_and_combine<'t, T: Real>(
    x: Var<'t, T>,
    w: &MoeWeights<Var<'t, T>>,
    top_k: usize,
) -> Result<MoeOutput<'t, T>> {
    let shape = x.shape();
    let d = *shape.last().ok_or_else(|| Error::ShapeMismatch("moe input is a scalar".into()))?;
    let n = w.n_experts();
    if top_k == 0 || top_k > n {
        return Err(Error::ShapeMismatch(format!("top_k = {top_k} with {n} experts")));
    }
    let tokens = shape.iter().product::<usize>() / d.max(1);
    let flat = x.reshape(&[tokens, d])?;

    let logits = flat.matmul(w.router)?;
    let probs = logits.softmax()?;
    let (gates, selected) = logits.top_k_gate(top_k)?;

    let mut y: Option<Var<'t, T>> = None;
    let mut counts = vec![0usize; n];
    for (e, expert) in w.experts.iter().enumerate() {
        let idx: Vec<usize> = (0..tokens).filter(|&t| selected[t].contains(&e)).collect();
        counts[e] = idx.len();
        if idx.is_empty() {
            continue;
        }
        let pairs: Vec<(usize, usize)> = idx.iter().map(|&t| (t, e)).collect();
        let out = mlp(flat.gather_rows(&idx)?, expert)?.scale_rows(gates.select(&pairs)?)?;
        let spread = out.scatter_rows(&idx, tokens)?;
        y = Some(match y {
            Some(acc) => acc.add(spread)?,
            None => spread,
        });
    }
    let y = y.expect("at least one expert receives tokens").reshape(&shape)?;

    let mean_probs = probs.sum_rows()?.scale(1.0 / tokens as f64)?;
    let gv = gates.value();
    let record = RoutingRecord {
        weights: selected.iter().enumerate().map(|(t, sel)| sel.iter().map(|&e| gv.data()[t * n + e].f64()).collect()).collect(),
        load: counts.iter().map(|&c| c as f64 / (tokens * top_k) as f64).collect(),
        mean_probs: mean_probs.value().to_f64_vec(),
        selected,
    };
    Ok(MoeOutput { y, record, mean_probs })
}

/// `alpha * n * sum_i f_i * P_i` with `f` the hard load fractions (held
/// constant) and `P` the mean router probabilities (differentiable).
pub fn load_balance_loss<'t, T: Real>(out: &MoeOutput<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    let n = out.record.load.len();
    let f = out.mean_probs.tape().constant(Tensor::from_f64(&[n], &out.record.load)?)?;
    Ok(out.mean_probs.mul(f)?.sum()?.scale(alpha * n as f64)?)
}
