use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    out
}

fn eval1(x: Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let out = f(&mut tape, v);
    tape.value(out).clone()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::eye(2));
    let b = tape.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), [5.0, 6.0, 7.0, 8.0]);
    let a = tape.constant(t(&[&[1.0, 2.0]]));
    let b = tape.constant(t(&[&[3.0], &[4.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), [11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(3, 4, 2), (1, 7, 5), (9, 3, 8)] {
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, [2, 3]);
            assert_eq!(rhs, [2, 3]);
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn softplus_examples() {
    let out = eval1(Tensor::new(vec![3], vec![0.0, 50.0, -3.0]).unwrap(), |tp, v| tp.softplus(v));
    assert!((out.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((out.data()[1] - 50.0).abs() < 1e-9);
    assert!((out.data()[2] - (1.0 + (-3.0f64).exp()).ln()).abs() < 1e-12);
    let extreme = eval1(Tensor::new(vec![2], vec![-800.0, 800.0]).unwrap(), |tp, v| tp.softplus(v));
    assert!(extreme.is_finite());
    assert!(extreme.data()[0] >= 0.0);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 5]));
    for g in 0..5 {
        let l = tape.softmax_cross_entropy(uniform, &[g]).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-15);
    }
    let sharp = tape.constant(t(&[&[10.0, -10.0]]));
    let l = tape.softmax_cross_entropy(sharp, &[0]).unwrap();
    let oracle = (-20f64).exp().ln_1p();
    assert!((tape.value(l).item() - oracle).abs() < 1e-22);
    assert!((tape.value(l).item() - 2.06e-9).abs() < 1e-11);

    let both = tape.constant(t(&[&[1.0, 2.0, 0.5], &[-1.0, 0.0, 3.0]]));
    let l = tape.softmax_cross_entropy(both, &[2, 0]).unwrap();
    let single = |row: &[f64], g: usize| {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        z.ln() - row[g]
    };
    let expect = 0.5 * (single(&[1.0, 2.0, 0.5], 2) + single(&[-1.0, 0.0, 3.0], 0));
    assert!((tape.value(l).item() - expect).abs() < 1e-14);
    assert!(matches!(tape.softmax_cross_entropy(both, &[0, 3]), Err(Error::Label(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, 1.0]]));
    let l = tape.softmax_cross_entropy(x, &[1, 2]).unwrap();
    tape.backward(l).unwrap();
    let p = eval1(tape.value(x).clone(), |tp, v| tp.softmax_rows(v));
    let g = tape.grad(x).unwrap();
    for (i, gold) in [1usize, 2].into_iter().enumerate() {
        for j in 0..3 {
            let onehot = if j == gold { 1.0 } else { 0.0 };
            assert!((g.at(i, j) - (p.at(i, j) - onehot) / 2.0).abs() < 1e-15);
        }
    }
}

#[test]
fn layer_norm_examples() {
    let ln = |x: Tensor| {
        let d = x.cols();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[d]));
        let b = tape.constant(Tensor::zeros(&[d]));
        let out = tape.layer_norm(v, g, b).unwrap();
        tape.value(out).clone()
    };
    assert!(ln(t(&[&[4.0, 4.0, 4.0]])).data().iter().all(|&v| v == 0.0));
    let two = ln(t(&[&[1.0, -1.0]]));
    assert!((two.data()[0] - 1.0).abs() < 1e-4);
    assert!((two.data()[1] + 1.0).abs() < 1e-4);
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((two.data()[0] - expect).abs() < 1e-15);

    let mut r = rng(4);
    let x = Tensor::randn(&[5, 16], 3.0, &mut r);
    let y = ln(x.clone());
    for i in 0..5 {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        for j in 0..16 {
            let naive = (row[j] - mean) / (var + 1e-5).sqrt();
            assert!((y.at(i, j) - naive).abs() < 1e-10);
        }
        let out_mean = y.row(i).iter().sum::<f64>() / 16.0;
        let out_var = y.row(i).iter().map(|v| (v - out_mean).powi(2)).sum::<f64>() / 16.0;
        assert!(out_mean.abs() < 1e-12);
        assert!((out_var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn softmax_matches_naive_and_sums_to_one() {
    let mut r = rng(5);
    let x = Tensor::randn(&[6, 9], 5.0, &mut r);
    let y = eval1(x.clone(), |tp, v| tp.softmax_rows(v));
    for i in 0..6 {
        let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
        for j in 0..9 {
            assert!((y.at(i, j) - x.at(i, j).exp() / z).abs() < 1e-10);
        }
        assert!((y.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let big = eval1(t(&[&[1000.0, 999.0, -1000.0]]), |tp, v| tp.softmax_rows(v));
    assert!(big.is_finite());
}

#[test]
fn backward_simple_functions() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::full(&[2, 3], 0.7));
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 1.0));

    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().item(), 6.0);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().item(), 12.0, "repeated backward accumulates");
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
}

#[test]
fn grad_check_linear_and_softplus_chain() {
    let mut r = rng(6);
    let w = Tensor::randn(&[3, 4], 1.0, &mut r);
    let x = Tensor::randn(&[2, 3], 1.0, &mut r);
    let wts: Vec<f64> = (0..8).map(|i| 0.3 + i as f64 * 0.1).collect();
    let linear = grad_check(
        |tp, p| {
            let y = tp.matmul(p[1], p[0])?;
            tp.weighted_sum(y, wts.clone())
        },
        &[w.clone(), x.clone()],
        1e-5,
    )
    .unwrap();
    assert!(linear.max_rel_error < 1e-9, "{linear:?}");
    let chain = grad_check(
        |tp, p| {
            let y = tp.matmul(p[1], p[0])?;
            let y = tp.softplus(y);
            let y = tp.softplus(y);
            tp.weighted_sum(y, wts.clone())
        },
        &[w, x],
        1e-5,
    )
    .unwrap();
    assert!(chain.max_rel_error < 1e-6, "{chain:?}");
}

#[test]
fn attention_rows_are_distributions_and_padding_is_inert() {
    let mut r = rng(7);
    let x = Tensor::randn(&[7, 4], 1.0, &mut r);
    let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
    let valid = [true, true, true, true, true, true, false];
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let att = tape.attention(v, v, v, &segs, 2, &valid).unwrap();
    for (s, seg) in segs.iter().enumerate() {
        for h in 0..2 {
            let p = tape.attention_probs(att, s, h).unwrap();
            for row in p.chunks(seg.len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
            if s == 1 {
                assert!(p.chunks(4).all(|row| row[3] == 0.0));
            }
        }
    }
    let mut x2 = x.clone();
    x2.data_mut()[6 * 4..].iter_mut().for_each(|v| *v = 99.0);
    let mut tape2 = Tape::new();
    let v2 = tape2.constant(x2);
    let att2 = tape2.attention(v2, v2, v2, &segs, 2, &valid).unwrap();
    assert_eq!(tape.value(att).data()[..6 * 4], tape2.value(att2).data()[..6 * 4]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(8);
        let a = Tensor::randn(&[5, 6], 1.0, &mut r);
        let b = Tensor::randn(&[6, 6], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a), tape.constant(b));
        let y = tape.matmul(va, vb).unwrap();
        let y = tape.gelu(y);
        let y = tape.softmax_rows(y);
        tape.value(y).clone()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn tensor_shape_invariant() {
    assert!(matches!(Tensor::new(vec![2, 3], vec![0.0; 5]), Err(Error::Shape { .. })));
}

const N_OPS: usize = 17;

/// Builds a random scalar function around op `which` and its parameters.
fn random_case(which: usize, seed: u64) -> (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> crate::error::Result<Var>>) {
    let mut r = rng(seed);
    let rows = r.random_range(1..=4);
    let cols = 2 * r.random_range(1..=4);
    let mut rand_t = |s: &[usize]| Tensor::randn(s, 1.0, &mut r);
    let base = rand_t(&[rows, cols]);
    let mut r2 = rng(seed ^ 0x5eed);
    let weights: Vec<f64> = (0..64 * 64).map(|_| r2.random_range(0.5..1.5) * if r2.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let ws = move |n: usize| weights[..n].to_vec();
    let reduce = move |tp: &mut Tape, y: Var| {
        let n = tp.value(y).len();
        tp.weighted_sum(y, ws(n))
    };
    let mask: Vec<bool> = (0..rows).map(|_| r2.random_bool(0.5)).collect();
    let gold: Vec<usize> = (0..rows).map(|_| r2.random_range(0..cols)).collect();
    let ids: Vec<usize> = (0..5).map(|_| r2.random_range(0..rows)).collect();
    let konst = Tensor::randn(&[rows, cols], 1.0, &mut r2);
    let heads = if cols % 4 == 0 { 2 } else { 1 };
    let split = r2.random_range(1..=rows);
    let mut valid: Vec<bool> = (0..rows).map(|_| r2.random_bool(0.8)).collect();
    valid[0] = true;
    let beta = r2.random_range(0.0..=1.0);
    let k = r2.random_range(1..=4);
    match which {
        0 => {
            let other = Tensor::randn(&[cols, k], 1.0, &mut r2);
            (vec![base, other], Box::new(move |tp, p| { let y = tp.matmul(p[0], p[1])?; reduce(tp, y) }))
        }
        1 => (vec![base.clone(), konst], Box::new(move |tp, p| { let y = tp.add(p[0], p[1])?; let y = tp.mul(y, y)?; reduce(tp, y) })),
        2 => {
            let bias = Tensor::randn(&[cols], 1.0, &mut r2);
            (vec![base, bias], Box::new(move |tp, p| { let y = tp.add_row(p[0], p[1])?; let y = tp.gelu(y); reduce(tp, y) }))
        }
        3 => (vec![base, konst], Box::new(move |tp, p| { let y = tp.mul(p[0], p[1])?; reduce(tp, y) })),
        4 => (vec![base], Box::new(move |tp, p| { let y = tp.mul_const(p[0], &konst)?; let y = tp.scale(y, -1.7); let y = tp.softplus(y); reduce(tp, y) })),
        5 => (vec![base], Box::new(move |tp, p| { let y = tp.softplus(p[0]); let s = tp.sum(y); let z = tp.mul(s, s)?; Ok(z) })),
        6 => (vec![base], Box::new(move |tp, p| { let y = tp.gelu(p[0]); reduce(tp, y) })),
        7 => (vec![base], Box::new(move |tp, p| { let y = tp.softmax_rows(p[0]); reduce(tp, y) })),
        8 => {
            let g = Tensor::randn(&[cols], 1.0, &mut r2);
            let b = Tensor::randn(&[cols], 1.0, &mut r2);
            (vec![base, g, b], Box::new(move |tp, p| { let y = tp.layer_norm(p[0], p[1], p[2])?; reduce(tp, y) }))
        }
        9 => (vec![base], Box::new(move |tp, p| tp.softmax_cross_entropy(p[0], &gold))),
        10 => (vec![base], Box::new(move |tp, p| { let y = tp.embedding(p[0], &ids)?; let y = tp.gelu(y); reduce(tp, y) })),
        11 => (vec![base], Box::new(move |tp, p| { let y = tp.gather_rows(p[0], &ids)?; let y = tp.softplus(y); reduce(tp, y) })),
        12 => {
            let other = Tensor::randn(&[rows, k], 1.0, &mut r2);
            (vec![base, other], Box::new(move |tp, p| { let y = tp.concat_cols(p[0], p[1])?; let y = tp.gelu(y); reduce(tp, y) }))
        }
        13 => {
            let wk = Tensor::randn(&[cols, cols], 0.5, &mut r2);
            let segs = if split < rows {
                vec![Segment { start: 0, len: split }, Segment { start: split, len: rows - split }]
            } else {
                vec![Segment { start: 0, len: rows }]
            };
            (vec![base, wk], Box::new(move |tp, p| {
                let k = tp.matmul(p[0], p[1])?;
                let v = tp.gelu(p[0]);
                let y = tp.attention(p[0], k, v, &segs, heads, &valid)?;
                reduce(tp, y)
            }))
        }
        14 => (vec![base, konst], Box::new(move |tp, p| { let y = tp.blend(p[0], p[1], &mask, beta)?; let y = tp.gelu(y); reduce(tp, y) })),
        15 => {
            let raw = Tensor::randn(&[rows, cols], 1.0, &mut r2);
            (vec![base, raw], Box::new(move |tp, p| { let s = tp.softplus(p[1]); let y = tp.kl_standard_normal(p[0], s)?; reduce(tp, y) }))
        }
        _ => (vec![base], Box::new(move |tp, p| { let y = tp.scale(p[0], 0.3); let y = tp.softmax_rows(y); let y = tp.mul(y, y)?; let s = tp.sum(y); Ok(s) })),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(170))]

    #[test]
    fn every_op_passes_grad_check(which in 0..N_OPS, seed in any::<u64>()) {
        let (params, f) = random_case(which, seed);
        let report = grad_check(f, &params, 1e-5).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "op {} seed {}: {:?}", which, seed, report);
    }

    #[test]
    fn matmul_matches_naive_loops(m in 1usize..8, k in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
