use jamba_core::attention::{attend, attend_unmasked, AttentionShape, AttentionWeights};
use jamba_core::mamba::{mamba_forward, scan, MambaShape, MambaWeights};
use jamba_core::moe::{load_balance_loss, mlp, route_and_combine, MlpWeights, MoeWeights};
use jamba_core::numerics::gradcheck::{check, GradCheckOptions};
use jamba_core::numerics::{NumericsError, Rng, Tape, Tensor};
use proptest::prelude::*;

fn core_err(e: jamba_core::error::Error) -> NumericsError {
    match e {
        jamba_core::error::Error::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

fn scan_case(seed: u64, len: usize, ch: usize, n: usize) -> [Tensor<f64>; 4] {
    let mut rng = Rng::new(seed);
    [
        Tensor::uniform(&[len, ch, n], 0.0, 1.0, &mut rng),
        Tensor::randn(&[len, ch, n], 1.0, &mut rng),
        Tensor::randn(&[len, n], 1.0, &mut rng),
        Tensor::randn(&[ch, n], 1.0, &mut rng),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_scan_tracks_sequential(seed in any::<u64>(), len in 1usize..=64, ch in 1usize..=8, n in 1usize..=8, chunk in prop::sample::select(vec![1usize, 2, 4, 16, 64])) {
        let [abar, bx, c, h0] = scan_case(seed, len, ch, n);
        let (ys, hs) = scan::sequential(&abar, &bx, &c, &h0).unwrap();
        let (yc, hc) = scan::chunked(&abar, &bx, &c, &h0, chunk).unwrap();
        prop_assert!(scan::rel_diff(&yc, &ys) < 1e-10);
        prop_assert!(scan::rel_diff(&hc, &hs) < 1e-10);
    }

    #[test]
    fn long_scans_stay_bounded(seed in any::<u64>(), ch in 1usize..=4, n in 1usize..=4) {
        // A < 0 and Δ > 0 give abar in (0, 1): the state is a contraction
        // plus bounded input, so |h| stays below max|bx| / (1 - max abar).
        let len = 10_000;
        let mut rng = Rng::new(seed);
        let a = Tensor::uniform(&[ch, n], -2.0, -0.1, &mut rng);
        let delta = Tensor::uniform(&[len, ch], 1e-3, 0.1, &mut rng);
        let b = Tensor::uniform(&[len, n], -1.0, 1.0, &mut rng);
        let u = Tensor::uniform(&[len, ch], -1.0, 1.0, &mut rng);
        let c = Tensor::uniform(&[len, n], -1.0, 1.0, &mut rng);
        let (abar, bx) = scan::discretize(&delta, &a, &b, &u).unwrap();
        let amax = abar.data().iter().cloned().fold(0.0, f64::max);
        prop_assert!(amax < 1.0);
        let bound = bx.max_abs() / (1.0 - amax) + 1e-9;
        let (y, h) = scan::sequential(&abar, &bx, &c, &Tensor::zeros(&[ch, n])).unwrap();
        prop_assert!(y.all_finite() && h.all_finite());
        prop_assert!(h.max_abs() <= bound);
        prop_assert!(y.max_abs() <= bound * n as f64);
    }

    #[test]
    fn causal_attention_last_row_ignores_prefix_order(seed in any::<u64>(), len in 2usize..8) {
        // the last row sees every token whatever the order of those before it
        let shape = AttentionShape { d_model: 8, n_heads: 4, n_kv_heads: 2, head_dim: 2, use_rope: false };
        let mut rng = Rng::new(seed);
        let w = AttentionWeights::<Tensor<f64>>::init(&shape, 0.5, &mut rng);
        let x = Tensor::randn(&[1, len, 8], 1.0, &mut rng);
        let mut order: Vec<usize> = (0..len - 1).collect();
        rng.shuffle(&mut order);
        order.push(len - 1);
        let mut px = Vec::new();
        for &r in &order {
            px.extend_from_slice(&x.data()[r * 8..(r + 1) * 8]);
        }
        let px = Tensor::new(&[1, len, 8], px).unwrap();
        let run = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let wv = w.map(|t| tape.constant(t.clone()).unwrap());
            attend(tape.constant(x.clone()).unwrap(), &wv, &shape, None).unwrap().value().as_ref().clone()
        };
        let (a, b) = (run(&x), run(&px));
        let last = (len - 1) * 8;
        let diff = a.data()[last..].iter().zip(&b.data()[last..]).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-10);
    }

    #[test]
    fn unmasked_attention_without_rope_permutes_with_its_input(seed in any::<u64>(), len in 2usize..=8) {
        let shape = AttentionShape { d_model: 8, n_heads: 4, n_kv_heads: 2, head_dim: 2, use_rope: false };
        let mut rng = Rng::new(seed);
        let w = AttentionWeights::<Tensor<f64>>::init(&shape, 0.5, &mut rng);
        let x = Tensor::randn(&[1, len, 8], 1.0, &mut rng);
        let mut order: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut order);
        let permute = |t: &Tensor<f64>| {
            let mut out = Vec::new();
            for &r in &order {
                out.extend_from_slice(&t.data()[r * 8..(r + 1) * 8]);
            }
            Tensor::new(&[1, len, 8], out).unwrap()
        };
        let run = |x: &Tensor<f64>| {
            let tape = Tape::new();
            let wv = w.map(|t| tape.constant(t.clone()).unwrap());
            attend_unmasked(tape.constant(x.clone()).unwrap(), &wv, &shape).unwrap().value().as_ref().clone()
        };
        prop_assert!(run(&permute(&x)).max_abs_diff(&permute(&run(&x))) < 1e-10);
    }

    #[test]
    fn routing_is_per_token(seed in any::<u64>(), tokens in 2usize..10, k in 1usize..=4) {
        let mut rng = Rng::new(seed);
        let w = MoeWeights::<Tensor<f64>>::init(6, 4, 4, 0.5, &mut rng);
        let x = Tensor::randn(&[tokens, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let wv = w.map(|t| tape.constant(t.clone()).unwrap());
        let all = route_and_combine(tape.constant(x.clone()).unwrap(), &wv, k).unwrap();
        for t in 0..tokens {
            let alone = route_and_combine(tape.constant(x.slice_leading(t, 1)).unwrap(), &wv, k).unwrap();
            prop_assert_eq!(&alone.record.selected[0], &all.record.selected[t]);
            prop_assert!(alone.y.value().max_abs_diff(&all.y.value().slice_leading(t, 1)) < 1e-12);
            let s: f64 = all.record.weights[t].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!((all.record.load.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn scan_reference_on_hand_example() {
    // one channel, one state: h = 0.5 h + 1, y = 2 h
    let abar = Tensor::new(&[3, 1, 1], vec![0.5; 3]).unwrap();
    let bx = Tensor::new(&[3, 1, 1], vec![1.0; 3]).unwrap();
    let c = Tensor::new(&[3, 1], vec![2.0; 3]).unwrap();
    let h0 = Tensor::zeros(&[1, 1]);
    let (y, h) = scan::chunked(&abar, &bx, &c, &h0, 2).unwrap();
    assert_eq!(y.data(), &[2.0, 3.0, 3.5]);
    assert_eq!(h.data(), &[1.75]);
}

fn opts() -> GradCheckOptions {
    GradCheckOptions { max_entries: 24, ..GradCheckOptions::default() }
}

#[test]
fn mamba_layer_gradients() {
    for use_inner_norm in [true, false] {
        let shape = MambaShape { d_model: 5, d_inner: 6, d_state: 3, dt_rank: 2, conv_kernel: 3, use_inner_norm };
        let mut rng = Rng::new(1);
        let mut w = MambaWeights::<Tensor<f64>>::init(&shape, 0.4, &mut rng);
        w.dt_bias.data_mut().iter_mut().for_each(|v| *v += 2.0);
        let x = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
        let mut inputs: Vec<Tensor<f64>> = w.named().into_iter().map(|(_, t)| t.clone()).collect();
        inputs.push(x);
        let report = check(&inputs, opts(), |tape, v| {
            let n = v.len() - 1;
            let mut it = v[..n].iter().copied();
            let mut next = || it.next().unwrap();
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
                inner_norm: w.inner_norm.as_ref().map(|_| jamba_core::mamba::InnerNorm { dt: next(), b: next(), c: next() }),
            };
            let y = mamba_forward(v[n], &wv, &shape, None).map_err(core_err)?;
            y.mul(tape.constant(probe.clone())?)?.sum()
        })
        .unwrap();
        assert!(report.passed(), "inner_norm={use_inner_norm}: {:?}", report.failures);
    }
}

#[test]
fn attention_layer_gradients() {
    for use_rope in [false, true] {
        let shape = AttentionShape { d_model: 6, n_heads: 4, n_kv_heads: 2, head_dim: 2, use_rope };
        let mut rng = Rng::new(2);
        let w = AttentionWeights::<Tensor<f64>>::init(&shape, 0.5, &mut rng);
        let x = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 4, 6], 1.0, &mut rng);
        let inputs = vec![w.w_q, w.w_k, w.w_v, w.w_o, x];
        for causal in [true, false] {
            let report = check(&inputs, opts(), |tape, v| {
                let wv = AttentionWeights { w_q: v[0], w_k: v[1], w_v: v[2], w_o: v[3] };
                let y = if causal { attend(v[4], &wv, &shape, None) } else { attend_unmasked(v[4], &wv, &shape) };
                y.map_err(core_err)?.mul(tape.constant(probe.clone())?)?.sum()
            })
            .unwrap();
            assert!(report.passed(), "rope={use_rope} causal={causal}: {:?}", report.failures);
        }
    }
}

#[test]
fn mlp_and_moe_gradients() {
    let mut rng = Rng::new(3);
    let m = MlpWeights::<Tensor<f64>>::init(4, 5, 0.5, &mut rng);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let report = check(&[m.w_gate, m.w_up, m.w_down, x.clone()], opts(), |_, v| {
        mlp(v[3], &MlpWeights { w_gate: v[0], w_up: v[1], w_down: v[2] }).map_err(core_err)?.sum()
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.failures);

    let moe = MoeWeights::<Tensor<f64>>::init(4, 3, 4, 0.5, &mut rng);
    let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let probe = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let mut inputs = vec![moe.router.clone()];
    for e in &moe.experts {
        inputs.extend([e.w_gate.clone(), e.w_up.clone(), e.w_down.clone()]);
    }
    inputs.push(x);
    for k in [1, 2, 4] {
        let report = check(&inputs, opts(), |tape, v| {
            let experts = (0..4).map(|e| MlpWeights { w_gate: v[1 + 3 * e], w_up: v[2 + 3 * e], w_down: v[3 + 3 * e] }).collect();
            let w = MoeWeights { router: v[0], experts };
            let out = route_and_combine(v[13], &w, k).map_err(core_err)?;
            let aux = load_balance_loss(&out, 0.5).map_err(core_err)?;
            out.y.mul(tape.constant(probe.clone())?)?.sum()?.add(aux)
        })
        .unwrap();
        assert!(report.passed(), "k={k}: {:?}", report.failures);
    }
}

#[test]
fn zero_input_gives_zero_mlp_output() {
    let mut rng = Rng::new(4);
    let m = MlpWeights::<Tensor<f64>>::init(4, 5, 0.5, &mut rng);
    let tape = Tape::new();
    let wv = m.map(|t| tape.constant(t.clone()).unwrap());
    let y = mlp(tape.constant(Tensor::zeros(&[2, 4])).unwrap(), &wv).unwrap();
    assert_eq!(y.value().max_abs(), 0.0);
}
