//! Selective state-space mixer.
//!
//! Per token: `(x̃, z) = split(W_in x)`, `u = silu(conv(x̃))`,
//! `(δ, B, C) = split(W_xdbc u)` (each optionally RMS-normalized),
//! `Δ = softplus(W_dt δ + dt_bias)`, `Ā = exp(Δ ⊙ A)`,
//! `h_t = Ā ⊙ h_{t-1} + (Δ ⊙ u) ⊗ B`, `y = h·C + D ⊙ u`,
//! `out = W_out (y ⊙ silu(z))`, with `A = -exp(A_log) < 0`.

use crate::config::{JambaConfig, RMS_EPS};
use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct InnerNorm<W> {
    /// gain on the Δ stream, `[dt_rank]`
    pub dt: W,
    /// gain on the B stream, `[d_state]`
    pub b: W,
    /// gain on the C stream, `[d_state]`
    pub c: W,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaWeights<W> {
    /// `[d_model, 2 * d_inner]`, x half then gate half
    pub w_in: W,
    /// depthwise kernel `[d_inner, conv_kernel]`
    pub conv_w: W,
    pub conv_b: W,
    /// `[d_inner, dt_rank + 2 * d_state]`
    pub w_x_dbc: W,
    /// `[dt_rank, d_inner]`
    pub w_dt: W,
    pub dt_bias: W,
    /// `[d_inner, d_state]`
    pub a_log: W,
    pub d_skip: W,
    /// `[d_inner, d_model]`
    pub w_out: W,
    pub inner_norm: Option<InnerNorm<W>>,
}

impl<W> MambaWeights<W> {
    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> MambaWeights<U> {
        MambaWeights {
            w_in: f(&self.w_in),
            conv_w: f(&self.conv_w),
            conv_b: f(&self.conv_b),
            w_x_dbc: f(&self.w_x_dbc),
            w_dt: f(&self.w_dt),
            dt_bias: f(&self.dt_bias),
            a_log: f(&self.a_log),
            d_skip: f(&self.d_skip),
            w_out: f(&self.w_out),
            inner_norm: self.inner_norm.as_ref().map(|n| InnerNorm { dt: f(&n.dt), b: f(&n.b), c: f(&n.c) }),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &W)> {
        let mut v = vec![
            ("w_in", &self.w_in),
            ("conv_w", &self.conv_w),
            ("conv_b", &self.conv_b),
            ("w_x_dbc", &self.w_x_dbc),
            ("w_dt", &self.w_dt),
            ("dt_bias", &self.dt_bias),
            ("a_log", &self.a_log),
            ("d_skip", &self.d_skip),
            ("w_out", &self.w_out),
        ];
        if let Some(n) = &self.inner_norm {
            v.extend([("norm_dt", &n.dt), ("norm_b", &n.b), ("norm_c", &n.c)]);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MambaShape {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_kernel: usize,
    pub use_inner_norm: bool,
}

impl MambaShape {
    pub fn from_config(cfg: &JambaConfig) -> Self {
        MambaShape {
            d_model: cfg.d_model,
            d_inner: cfg.d_inner(),
            d_state: cfg.mamba_d_state,
            dt_rank: cfg.mamba_dt_rank,
            conv_kernel: cfg.mamba_conv_kernel,
            use_inner_norm: cfg.use_inner_mamba_norm,
        }
    }

    pub fn weight_shapes(&self) -> MambaWeights<Vec<usize>> {
        let (d, di, n, r, k) = (self.d_model, self.d_inner, self.d_state, self.dt_rank, self.conv_kernel);
        MambaWeights {
            w_in: vec![d, 2 * di],
            conv_w: vec![di, k],
            conv_b: vec![di],
            w_x_dbc: vec![di, r + 2 * n],
            w_dt: vec![r, di],
            dt_bias: vec![di],
            a_log: vec![di, n],
            d_skip: vec![di],
            w_out: vec![di, d],
            inner_norm: self.use_inner_norm.then(|| InnerNorm { dt: vec![r], b: vec![n], c: vec![n] }),
        }
    }
}

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

impl<T: Real> MambaWeights<Tensor<T>> {
    /// Projections ~ N(0, std); `A` rows are `-(1..=N)`; `D = 1`; `dt_bias`
    /// places `softplus(dt_bias)` log-uniformly in `[DT_MIN, DT_MAX]`;
    /// conv taps ~ U(±1/sqrt(K)); norm gains 1.
    pub fn init(shape: &MambaShape, std: f64, rng: &mut Rng) -> Self {
        let s = shape.weight_shapes();
        let (di, n, k) = (shape.d_inner, shape.d_state, shape.conv_kernel);
        let bound = 1.0 / (k as f64).sqrt();
        let dt_bias: Vec<f64> = (0..di)
            .map(|_| {
                let dt = (DT_MIN.ln() + rng.uniform() * (DT_MAX.ln() - DT_MIN.ln())).exp();
                // inverse of softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let a_log: Vec<f64> = (0..di).flat_map(|_| (1..=n).map(|j| (j as f64).ln())).collect();
        MambaWeights {
            w_in: Tensor::randn(&s.w_in, std, rng),
            conv_w: Tensor::uniform(&s.conv_w, -bound, bound, rng),
            conv_b: Tensor::zeros(&s.conv_b),
            w_x_dbc: Tensor::randn(&s.w_x_dbc, std, rng),
            w_dt: Tensor::randn(&s.w_dt, std, rng),
            dt_bias: Tensor::from_f64(&s.dt_bias, &dt_bias).expect("shape"),
            a_log: Tensor::from_f64(&s.a_log, &a_log).expect("shape"),
            d_skip: Tensor::full(&s.d_skip, T::one()),
            w_out: Tensor::randn(&s.w_out, std, rng),
            inner_norm: s.inner_norm.map(|g| InnerNorm {
                dt: Tensor::full(&g.dt, T::one()),
                b: Tensor::full(&g.b, T::one()),
                c: Tensor::full(&g.c, T::one()),
            }),
        }
    }
}

/// Recurrent state of one Mamba layer for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaStateLayer<T> {
    /// `[1, d_inner, d_state]`
    pub ssm: Tensor<T>,
    /// last `conv_kernel - 1` pre-convolution inputs, `[1, conv_kernel - 1, d_inner]`
    pub conv_window: Tensor<T>,
    pub seen: usize,
}

impl<T: Real> MambaStateLayer<T> {
    pub fn new(shape: &MambaShape) -> Self {
        MambaStateLayer {
            ssm: Tensor::zeros(&[1, shape.d_inner, shape.d_state]),
            conv_window: Tensor::zeros(&[1, shape.conv_kernel - 1, shape.d_inner]),
            seen: 0,
        }
    }

    fn matches(&self, shape: &MambaShape) -> bool {
        self.ssm.shape() == [1, shape.d_inner, shape.d_state]
            && self.conv_window.shape() == [1, shape.conv_kernel - 1, shape.d_inner]
    }
}

/// Intermediate streams exposed for inspection.
pub struct MambaTrace<'t, T: Real> {
    pub out: Var<'t, T>,
    /// Δ stream before `W_dt`, after the optional norm
    pub delta_raw: Var<'t, T>,
    pub b: Var<'t, T>,
    pub c: Var<'t, T>,
    /// Largest |value| on the Δ/B/C streams before normalization.
    pub pre_norm_max_abs: f64,
}

pub fn mamba_forward<'t, T: Real>(
    x: Var<'t, T>,
    w: &MambaWeights<Var<'t, T>>,
    shape: &MambaShape,
    state: Option<&mut MambaStateLayer<T>>,
) -> Result<Var<'t, T>> {
    Ok(mamba_forward_traced(x, w, shape, state)?.out)
}

pub fn mamba_forward_traced<'t, T: Real>(
    x: Var<'t, T>,
    w: &MambaWeights<Var<'t, T>>,
    shape: &MambaShape,
    state: Option<&mut MambaStateLayer<T>>,
) -> Result<MambaTrace<'t, T>> {
    let xs = x.shape();
    if xs.len() != 3 || xs[2] != shape.d_model {
        return Err(Error::ShapeMismatch(format!("mamba input {xs:?}, d_model {}", shape.d_model)));
    }
    if w.inner_norm.is_some() != shape.use_inner_norm {
        return Err(Error::ShapeMismatch("inner-norm weights do not match use_inner_norm".into()));
    }
    let (batch, len) = (xs[0], xs[1]);
    let (di, n, r) = (shape.d_inner, shape.d_state, shape.dt_rank);
    if let Some(st) = &state {
        if batch != 1 {
            return Err(Error::CacheBatch(batch));
        }
        if !st.matches(shape) {
            return Err(Error::CacheMismatch("mamba state dimensions differ from layer".into()));
        }
    }

    let xz = x.matmul(w.w_in)?;
    let x_in = xz.slice_last(0, di)?;
    let gate = xz.slice_last(di, di)?;
    let u = x_in.causal_conv(w.conv_w, w.conv_b, state.as_ref().map(|s| &s.conv_window))?.silu()?;

    let dbc = u.matmul(w.w_x_dbc)?;
    let pre_norm_max_abs = dbc.value().max_abs();
    let mut delta_raw = dbc.slice_last(0, r)?;
    let mut b = dbc.slice_last(r, n)?;
    let mut c = dbc.slice_last(r + n, n)?;
    if let Some(g) = &w.inner_norm {
        delta_raw = delta_raw.rmsnorm(g.dt, RMS_EPS)?;
        b = b.rmsnorm(g.b, RMS_EPS)?;
        c = c.rmsnorm(g.c, RMS_EPS)?;
    }
    let delta = delta_raw.matmul(w.w_dt)?.add(w.dt_bias)?.softplus()?;
    let a = w.a_log.exp()?.scale(-1.0)?;
    let (y, h_final) = u.selective_scan(delta, a, b, c, state.as_ref().map(|s| &s.ssm))?;
    let y = y.add(u.mul(w.d_skip)?)?;
    let out = y.mul(gate.silu()?)?.matmul(w.w_out)?;

    if let Some(st) = state {
        st.conv_window = next_conv_window(&st.conv_window, &x_in.value(), shape.conv_kernel);
        st.ssm = h_final;
        st.seen += len;
    }
    Ok(MambaTrace { out, delta_raw, b, c, pre_norm_max_abs })
}

/// Last `k - 1` rows of `prev ++ new` for batch 1.
fn next_conv_window<T: Real>(prev: &Tensor<T>, new: &Tensor<T>, k: usize) -> Tensor<T> {
    let di = new.last_dim();
    let keep = k - 1;
    let mut rows: Vec<T> = prev.data().to_vec();
    rows.extend_from_slice(new.data());
    let total = rows.len() / di;
    let tail = rows[(total - keep) * di..].to_vec();
    Tensor::new(&[1, keep, di], tail).expect("window shape")
}

/// Gradient-free scans over precomputed per-token operators.
///
/// Shapes: `abar, bx: [L, C, N]`, `c: [L, N]`, `h0: [C, N]`;
/// outputs `y: [L, C]` and the final state `[C, N]`.
pub mod scan {
    use crate::error::{Error, Result};
    use crate::numerics::{Real, Tensor};

    fn dims<T: Real>(abar: &Tensor<T>, bx: &Tensor<T>, c: &Tensor<T>, h0: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let s = abar.shape();
        let ok = s.len() == 3
            && bx.shape() == s
            && c.shape() == [s[0], s[2]]
            && h0.shape() == [s[1], s[2]];
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "scan operands abar {s:?}, bx {:?}, c {:?}, h0 {:?}",
                bx.shape(),
                c.shape(),
                h0.shape()
            )));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn readout<T: Real>(h: &[T], c: &[T], n: usize, out: &mut [T]) {
        for (o, hrow) in out.iter_mut().zip(h.chunks_exact(n)) {
            *o = hrow.iter().zip(c).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }

    /// `h_t = abar_t ⊙ h_{t-1} + bx_t`, `y_t = h_t · c_t`, one token at a time.
    pub fn sequential<T: Real>(
        abar: &Tensor<T>,
        bx: &Tensor<T>,
        c: &Tensor<T>,
        h0: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (len, ch, n) = dims(abar, bx, c, h0)?;
        let step = ch * n;
        let mut h = h0.data().to_vec();
        let mut y = vec![T::zero(); len * ch];
        for t in 0..len {
            let (a, b) = (&abar.data()[t * step..][..step], &bx.data()[t * step..][..step]);
            for i in 0..step {
                h[i] = a[i] * h[i] + b[i];
            }
            readout(&h, &c.data()[t * n..][..n], n, &mut y[t * ch..][..ch]);
        }
        Ok((Tensor::new(&[len, ch], y)?, Tensor::new(&[ch, n], h)?))
    }

    /// Same recurrence, split into chunks of `chunk` tokens. Each chunk first
    /// runs from a zero state while accumulating the prefix product of
    /// `abar`; the carried-in state is then added back as
    /// `h_t = local_t + prefix_t ⊙ h_in`. The per-chunk pass has no
    /// cross-chunk dependency.
    pub fn chunked<T: Real>(
        abar: &Tensor<T>,
        bx: &Tensor<T>,
        c: &Tensor<T>,
        h0: &Tensor<T>,
        chunk: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        if chunk == 0 {
            return Err(Error::ShapeMismatch("chunk must be at least 1".into()));
        }
        let (len, ch, n) = dims(abar, bx, c, h0)?;
        let step = ch * n;
        let (a, b) = (abar.data(), bx.data());

        let mut local = vec![T::zero(); len * step];
        let mut prefix = vec![T::zero(); len * step];
        for start in (0..len).step_by(chunk) {
            let end = (start + chunk).min(len);
            local[start * step..(start + 1) * step].copy_from_slice(&b[start * step..(start + 1) * step]);
            prefix[start * step..(start + 1) * step].copy_from_slice(&a[start * step..(start + 1) * step]);
            for t in start + 1..end {
                let (done, rest) = local.split_at_mut(t * step);
                let (pdone, prest) = prefix.split_at_mut(t * step);
                let (lp, pp) = (&done[(t - 1) * step..], &pdone[(t - 1) * step..]);
                for i in 0..step {
                    let at = a[t * step + i];
                    rest[i] = at * lp[i] + b[t * step + i];
                    prest[i] = at * pp[i];
                }
            }
        }

        let mut carry = h0.data().to_vec();
        let mut y = vec![T::zero(); len * ch];
        let mut h = vec![T::zero(); step];
        for start in (0..len).step_by(chunk) {
            let end = (start + chunk).min(len);
            for t in start..end {
                let (l, p) = (&local[t * step..][..step], &prefix[t * step..][..step]);
                for i in 0..step {
                    h[i] = l[i] + p[i] * carry[i];
                }
                readout(&h, &c.data()[t * n..][..n], n, &mut y[t * ch..][..ch]);
            }
            carry.copy_from_slice(&h);
        }
        Ok((Tensor::new(&[len, ch], y)?, Tensor::new(&[ch, n], carry)?))
    }

    /// `abar = exp(delta ⊙ a)`, `bx = (delta ⊙ u) ⊗ b` from
    /// `delta, u: [L, C]`, `a: [C, N]`, `b: [L, N]`.
    pub fn discretize<T: Real>(
        delta: &Tensor<T>,
        a: &Tensor<T>,
        b: &Tensor<T>,
        u: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let (len, ch) = (delta.shape()[0], delta.shape()[1]);
        let n = a.shape()[1];
        if u.shape() != delta.shape() || a.shape() != [ch, n] || b.shape() != [len, n] {
            return Err(Error::ShapeMismatch("discretize operands".into()));
        }
        let mut abar = Vec::with_capacity(len * ch * n);
        let mut bx = Vec::with_capacity(len * ch * n);
        for t in 0..len {
            for d in 0..ch {
                let dl = delta.data()[t * ch + d];
                let du = dl * u.data()[t * ch + d];
                for s in 0..n {
                    abar.push((dl * a.data()[d * n + s]).exp());
                    bx.push(du * b.data()[t * n + s]);
                }
            }
        }
        Ok((Tensor::new(&[len, ch, n], abar)?, Tensor::new(&[len, ch, n], bx)?))
    }

    /// `max |x - reference| / max |reference|`
    pub fn rel_diff<T: Real>(x: &Tensor<T>, reference: &Tensor<T>) -> f64 {
        let scale = reference.max_abs();
        if scale == 0.0 {
            x.max_abs()
        } else {
            x.max_abs_diff(reference) / scale
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn small() -> MambaShape {
        MambaShape { d_model: 6, d_inner: 8, d_state: 4, dt_rank: 2, conv_kernel: 4, use_inner_norm: true }
    }

    fn weights(shape: &MambaShape, seed: u64) -> MambaWeights<Tensor<f64>> {
        let mut rng = Rng::new(seed);
        let mut w = MambaWeights::init(shape, 0.3, &mut rng);
        w.conv_b = Tensor::randn(&[shape.d_inner], 0.1, &mut rng);
        w
    }

    fn bind<'t>(tape: &'t Tape<f64>, w: &MambaWeights<Tensor<f64>>) -> MambaWeights<Var<'t, f64>> {
        w.map(|t| tape.constant(t.clone()).unwrap())
    }

    fn run(x: &Tensor<f64>, w: &MambaWeights<Tensor<f64>>, shape: &MambaShape) -> Tensor<f64> {
        let tape = Tape::new();
        let y = mamba_forward(tape.constant(x.clone()).unwrap(), &bind(&tape, w), shape, None).unwrap();
        y.value().as_ref().clone()
    }

    #[test]
    fn a_is_strictly_negative_at_init() {
        let w = weights(&small(), 1);
        assert!(w.a_log.data().iter().all(|v| -v.exp() < 0.0));
        let dt: Vec<f64> = w.dt_bias.data().iter().map(|&b| (1.0 + b.exp()).ln()).collect();
        assert!(dt.iter().all(|&d| (DT_MIN * 0.999..=DT_MAX * 1.001).contains(&d)), "{dt:?}");
    }

    #[test]
    fn single_step_from_zero_state() {
        let shape = small();
        let w = weights(&shape, 2);
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[1, 1, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let wv = bind(&tape, &w);
        let tr = mamba_forward_traced(tape.constant(x.clone()).unwrap(), &wv, &shape, None).unwrap();
        // rebuild y_1 = (Δ⊙u)⊗B · C + D⊙u from the traced streams
        let delta = tr.delta_raw.matmul(wv.w_dt).unwrap().add(wv.dt_bias).unwrap().softplus().unwrap().value();
        let (b, c) = (tr.b.value(), tr.c.value());
        let xz = crate::numerics::matmul(&x, &w.w_in).unwrap();
        let x_in = Tensor::new(&[1, 1, 8], xz.data()[..8].to_vec()).unwrap();
        let mut conv = w.conv_b.clone();
        for d in 0..8 {
            conv.data_mut()[d] += w.conv_w.data()[d * 4 + 3] * x_in.data()[d];
        }
        let u = crate::numerics::silu(&conv);
        let gate = crate::numerics::silu(&Tensor::new(&[8], xz.data()[8..].to_vec()).unwrap());
        let mut yz = vec![0.0; 8];
        for d in 0..8 {
            let du = delta.data()[d] * u.data()[d];
            let hc: f64 = (0..4).map(|s| du * b.data()[s] * c.data()[s]).sum();
            yz[d] = (hc + w.d_skip.data()[d] * u.data()[d]) * gate.data()[d];
        }
        let expect = crate::numerics::matmul(&Tensor::new(&[1, 8], yz).unwrap(), &w.w_out).unwrap();
        let got = tr.out.value();
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-14, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_c_leaves_only_skip_path() {
        let shape = MambaShape { use_inner_norm: false, ..small() };
        let mut w = weights(&shape, 4);
        let (r, n) = (shape.dt_rank, shape.d_state);
        for row in w.w_x_dbc.data_mut().chunks_exact_mut(r + 2 * n) {
            row[r + n..].iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[1, 5, 6], 1.0, &mut rng);
        let got = run(&x, &w, &shape);

        let xz = crate::numerics::matmul(&x, &w.w_in).unwrap();
        let mut expect_in = Vec::new();
        for t in 0..5 {
            for d in 0..8 {
                let mut acc = w.conv_b.data()[d];
                for j in 0..4 {
                    let s = t + j;
                    if s >= 3 {
                        acc += w.conv_w.data()[d * 4 + j] * xz.data()[(s - 3) * 16 + d];
                    }
                }
                let u = acc / (1.0 + (-acc).exp());
                let z = xz.data()[t * 16 + 8 + d];
                expect_in.push(w.d_skip.data()[d] * u * z / (1.0 + (-z).exp()));
            }
        }
        let expect = crate::numerics::matmul(&Tensor::new(&[5, 8], expect_in).unwrap(), &w.w_out).unwrap();
        for (a, e) in got.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    #[test]
    fn stateful_decode_matches_full_sequence() {
        for use_inner_norm in [true, false] {
            let shape = MambaShape { use_inner_norm, ..small() };
            let w = weights(&shape, 6);
            let mut rng = Rng::new(7);
            let x = Tensor::randn(&[1, 9, 6], 1.0, &mut rng);
            let full = run(&x, &w, &shape);
            let mut state = MambaStateLayer::new(&shape);
            let mut max_diff: f64 = 0.0;
            // mix chunk sizes: 2 tokens, then 1 at a time
            let mut t = 0;
            while t < 9 {
                let step = if t == 0 { 2 } else { 1 };
                let xt = Tensor::new(&[1, step, 6], x.data()[t * 6..(t + step) * 6].to_vec()).unwrap();
                let tape = Tape::new();
                let y = mamba_forward(tape.constant(xt).unwrap(), &bind(&tape, &w), &shape, Some(&mut state)).unwrap();
                max_diff = max_diff.max(y.value().max_abs_diff(&full.slice_leading(0, 1).reshape(&[9, 6]).unwrap().slice_leading(t, step).reshape(&[1, step, 6]).unwrap()));
                t += step;
            }
            assert_eq!(state.seen, 9);
            assert!(max_diff < 1e-10, "{max_diff}");
        }
    }

    #[test]
    fn causal_under_future_perturbation() {
        let shape = small();
        let w = weights(&shape, 8);
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[1, 7, 6], 1.0, &mut rng);
        let mut x2 = x.clone();
        x2.data_mut()[4 * 6..].iter_mut().for_each(|v| *v *= -2.0);
        let (a, b) = (run(&x, &w, &shape), run(&x2, &w, &shape));
        assert_eq!(a.data()[..4 * 6], b.data()[..4 * 6]);
        assert_ne!(a.data()[4 * 6..], b.data()[4 * 6..]);
    }

    #[test]
    fn inner_norm_pins_stream_rms_regardless_of_input_scale() {
        let shape = small();
        let w = weights(&shape, 10);
        let mut rng = Rng::new(11);
        let x = Tensor::randn(&[2, 5, 6], 1000.0, &mut rng);
        let tape = Tape::new();
        let tr = mamba_forward_traced(tape.constant(x).unwrap(), &bind(&tape, &w), &shape, None).unwrap();
        assert!(tr.pre_norm_max_abs > 1.0);
        for stream in [tr.delta_raw, tr.b, tr.c] {
            let v = stream.value();
            for row in v.data().chunks_exact(v.last_dim()) {
                let rms = (row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64).sqrt();
                assert!((rms - 1.0).abs() < 1e-6, "{rms}");
            }
        }
    }

    fn random_scan_case(rng: &mut Rng, len: usize, ch: usize, n: usize) -> [Tensor<f64>; 4] {
        let abar = Tensor::uniform(&[len, ch, n], 0.05, 0.999, rng);
        let bx = Tensor::randn(&[len, ch, n], 1.0, rng);
        let c = Tensor::randn(&[len, n], 1.0, rng);
        let h0 = Tensor::randn(&[ch, n], 1.0, rng);
        [abar, bx, c, h0]
    }

    #[test]
    fn chunk_of_one_is_bitwise_sequential() {
        let mut rng = Rng::new(12);
        let [abar, bx, c, h0] = random_scan_case(&mut rng, 13, 4, 3);
        let (ys, hs) = scan::sequential(&abar, &bx, &c, &h0).unwrap();
        let (yc, hc) = scan::chunked(&abar, &bx, &c, &h0, 1).unwrap();
        assert!(ys.bitwise_eq(&yc) && hs.bitwise_eq(&hc));
    }

    #[test]
    fn chunked_matches_sequential() {
        let mut rng = Rng::new(13);
        let [abar, bx, c, h0] = random_scan_case(&mut rng, 13, 4, 3);
        let (ys, hs) = scan::sequential(&abar, &bx, &c, &h0).unwrap();
        for chunk in [4, 13, 50] {
            let (yc, hc) = scan::chunked(&abar, &bx, &c, &h0, chunk).unwrap();
            assert!(scan::rel_diff(&yc, &ys) < 1e-12);
            assert!(scan::rel_diff(&hc, &hs) < 1e-12);
        }
        assert!(scan::chunked(&abar, &bx, &c, &h0, 0).is_err());
    }

    #[test]
    fn model_scan_agrees_with_discretized_scan() {
        let mut rng = Rng::new(14);
        let (len, ch, n) = (6, 3, 4);
        let u = Tensor::randn(&[1, len, ch], 1.0, &mut rng);
        let delta = Tensor::uniform(&[1, len, ch], 0.01, 0.5, &mut rng);
        let a = Tensor::uniform(&[ch, n], -3.0, -0.5, &mut rng);
        let b = Tensor::randn(&[1, len, n], 1.0, &mut rng);
        let c = Tensor::randn(&[1, len, n], 1.0, &mut rng);
        let tape = Tape::new();
        let k = |t: &Tensor<f64>| tape.constant(t.clone()).unwrap();
        let (y, h) = k(&u).selective_scan(k(&delta), k(&a), k(&b), k(&c), None).unwrap();
        let flat = |t: &Tensor<f64>, s: &[usize]| t.clone().reshape(s).unwrap();
        let (abar, bx) = scan::discretize(&flat(&delta, &[len, ch]), &a, &flat(&b, &[len, n]), &flat(&u, &[len, ch])).unwrap();
        let (ys, hs) = scan::sequential(&abar, &bx, &flat(&c, &[len, n]), &Tensor::zeros(&[ch, n])).unwrap();
        assert!(y.value().as_ref().clone().reshape(&[len, ch]).unwrap().max_abs_diff(&ys) < 1e-13);
        assert!(h.reshape(&[ch, n]).unwrap().max_abs_diff(&hs) < 1e-13);
    }
}
