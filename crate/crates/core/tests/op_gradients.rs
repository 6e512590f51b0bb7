//! Every differentiable tape op against central finite differences (f64).

use jamba_core::numerics::gradcheck::{check, GradCheckOptions};
use jamba_core::numerics::{NumericsError, Rng, Tape, Tensor, Var};

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum against a fixed random tensor, so every output entry matters.
fn probe<'t>(x: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, NumericsError> {
    let w = Tensor::randn(&x.shape(), 1.0, &mut Rng::new(seed));
    let w = x.tape().constant(w)?;
    x.mul(w)?.sum()
}

fn assert_grads<F>(inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, NumericsError>,
{
    let report = check(inputs, GradCheckOptions::default(), f).unwrap();
    assert!(report.passed(), "{:?}", report.failures);
    assert!(report.checked > 0);
}

#[test]
fn linear_case_gradient_is_input() {
    let mut rng = Rng::new(1);
    let x = randn(&[5], &mut rng);
    let w = randn(&[5], &mut rng);
    let tape = Tape::new();
    let wv = tape.param(w).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let loss = wv.mul(xv).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(wv), x);
    assert_eq!(g.wrt(xv), Tensor::zeros(&[5]));
}

#[test]
fn constant_loss_gives_zero_grads() {
    let tape = Tape::<f64>::new();
    let w = tape.param(Tensor::full(&[3], 2.0)).unwrap();
    let c = tape.constant(Tensor::full(&[3], 1.0)).unwrap();
    let loss = c.sum().unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(w), Tensor::zeros(&[3]));
}

#[test]
fn non_scalar_loss_rejected() {
    let tape = Tape::<f64>::new();
    let w = tape.param(Tensor::full(&[3], 2.0)).unwrap();
    assert!(matches!(tape.backward(w), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn non_finite_leaf_rejected() {
    let tape = Tape::<f64>::new();
    assert!(matches!(
        tape.param(Tensor::full(&[1], f64::NAN)),
        Err(NumericsError::NonFinite { .. })
    ));
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(2);
    let inputs = [randn(&[3, 4], &mut rng), randn(&[4], &mut rng), randn(&[3, 4], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let a = v[0].add(v[1])?.mul(v[2])?;
        let b = a.silu()?.add(v[0].softplus()?)?.add(v[2].scale(0.3)?.exp()?)?;
        let c = b.mul(v[1])?;
        probe(c, 9)
    });
}

#[test]
fn matmuls() {
    let mut rng = Rng::new(3);
    let inputs = [randn(&[2, 3, 5], &mut rng), randn(&[5, 4], &mut rng), randn(&[6, 4], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let y = v[0].matmul(v[1])?.matmul_nt(v[2])?;
        probe(y, 4)
    });
}

#[test]
fn softmax_and_rmsnorm() {
    let mut rng = Rng::new(5);
    let inputs = [randn(&[3, 6], &mut rng), randn(&[6], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let y = v[0].rmsnorm(v[1], 1e-6)?.softmax()?;
        probe(y, 6)
    });
}

#[test]
fn slicing_concat_reshape_embedding() {
    let mut rng = Rng::new(6);
    let inputs = [randn(&[2, 3, 6], &mut rng), randn(&[2, 2, 4], &mut rng), randn(&[7, 4], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let s = v[0].slice_last(1, 4)?;
        let c = v[1].concat_seq(s)?;
        let e = v[2].embedding(&[3, 0, 3, 6, 1, 2, 2, 5, 4, 0], &[2, 5])?;
        let y = c.add(e)?.reshape(&[10, 4])?;
        probe(y, 7)
    });
}

#[test]
fn attention_with_gqa_and_offset() {
    let mut rng = Rng::new(7);
    // 4 query heads over 2 kv heads, head_dim 3; 2 queries against 5 keys
    let inputs = [randn(&[2, 2, 12], &mut rng), randn(&[2, 5, 6], &mut rng), randn(&[2, 5, 6], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let y = v[0].attention(v[1], v[2], 4, 2)?;
        probe(y, 8)
    });
}

#[test]
fn rope_gradient() {
    let mut rng = Rng::new(8);
    let inputs = [randn(&[2, 3, 8], &mut rng)];
    assert_grads(&inputs, |_, v| probe(v[0].rope(2, 4, 5, 10000.0)?, 9));
}

#[test]
fn causal_conv_gradient() {
    let mut rng = Rng::new(9);
    let prefix = randn(&[2, 3, 5], &mut rng);
    let inputs = [randn(&[2, 6, 5], &mut rng), randn(&[5, 4], &mut rng), randn(&[5], &mut rng)];
    assert_grads(&inputs, |_, v| probe(v[0].causal_conv(v[1], v[2], None)?, 10));
    assert_grads(&inputs, |_, v| probe(v[0].causal_conv(v[1], v[2], Some(&prefix))?, 11));
}

#[test]
fn selective_scan_gradient() {
    let mut rng = Rng::new(10);
    let h0 = randn(&[2, 3, 4], &mut rng);
    let delta = Tensor::uniform(&[2, 5, 3], 0.05, 0.5, &mut rng);
    let a = Tensor::uniform(&[3, 4], -2.0, -0.2, &mut rng);
    let inputs = [randn(&[2, 5, 3], &mut rng), delta, a, randn(&[2, 5, 4], &mut rng), randn(&[2, 5, 4], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let (y, _) = v[0].selective_scan(v[1], v[2], v[3], v[4], None)?;
        probe(y, 12)
    });
    assert_grads(&inputs, |_, v| {
        let (y, _) = v[0].selective_scan(v[1], v[2], v[3], v[4], Some(&h0))?;
        probe(y, 13)
    });
}

#[test]
fn routing_ops_gradient() {
    let mut rng = Rng::new(11);
    let inputs = [randn(&[6, 4], &mut rng), randn(&[6, 3], &mut rng), randn(&[4], &mut rng)];
    assert_grads(&inputs, |_, v| {
        let (gates, sel) = v[0].top_k_gate(2)?;
        let rows: Vec<usize> = (0..6).filter(|r| sel[*r].contains(&1)).collect();
        let pairs: Vec<(usize, usize)> = rows.iter().map(|&r| (r, 1)).collect();
        let x = v[1].gather_rows(&rows)?;
        let w = gates.select(&pairs)?;
        let y = x.scale_rows(w)?.scatter_rows(&rows, 6)?;
        let p = v[0].softmax()?.sum_rows()?.mul(v[2])?;
        probe(y, 14)?.add(p.sum()?)
    });
}

#[test]
fn cross_entropy_gradient() {
    let mut rng = Rng::new(12);
    let inputs = [randn(&[2, 3, 5], &mut rng)];
    let targets = [0, 4, 2, 1, 1, 3];
    let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 0.5];
    assert_grads(&inputs, |_, v| v[0].cross_entropy(&targets, &mask));
}

#[test]
fn masked_rows_get_exactly_zero_gradient() {
    let mut rng = Rng::new(13);
    let tape = Tape::new();
    let logits = tape.param(randn(&[4, 5], &mut rng)).unwrap();
    let loss = logits.cross_entropy(&[0, 1, 2, 3], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let g = tape.backward(loss).unwrap().wrt(logits);
    assert!(g.data()[5..10].iter().all(|&v| v == 0.0));
    assert!(g.data()[15..20].iter().all(|&v| v == 0.0));
    assert!(g.data()[0..5].iter().any(|&v| v != 0.0));
}
