use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tristage_core::gradcheck::grad_check;
use tristage_core::kernels::{self, Exec};
use tristage_core::{Graph, ParamStore, Tensor};

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn random(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_equals_triple_loop(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut r, &[m, k], 3.0);
        let b = random(&mut r, &[k, n], 3.0);
        let mut g = Graph::new();
        let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
        let c = g.matmul(va, vb).unwrap();
        let want = triple_loop(a.data(), b.data(), m, k, n);
        for (x, y) in g.value(c).data().iter().zip(&want) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 5), 1..6),
        shift in -50.0f64..50.0,
    ) {
        let t = Tensor::from_rows(&rows).unwrap();
        let shifted = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect::<Vec<_>>()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.input(t), g.input(shifted));
        let (sa, sb) = (g.softmax_rows(a).unwrap(), g.softmax_rows(b).unwrap());
        let (sa, sb) = (g.value(sa).clone(), g.value(sb).clone());
        for i in 0..rows.len() {
            let s: f64 = sa.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(sa.row(i).iter().all(|&p| p >= 0.0));
        }
        prop_assert!(sa.max_abs_diff(&sb) < 1e-12);
    }

    #[test]
    fn backward_does_not_touch_forward_values(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.insert("w", random(&mut r, &[4, 3], 1.0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(random(&mut r, &[2, 4], 1.0));
        let pw = g.param(&store, w);
        let y = g.matmul(x, pw).unwrap();
        let y = g.gelu(y);
        let s = g.softmax_rows(y).unwrap();
        let l = g.cross_entropy(s, &[0, 2], &[true, true]).unwrap();
        let before: Vec<Tensor> = [x, pw, y, s, l].iter().map(|&v| g.value(v).clone()).collect();
        g.backward(l).unwrap();
        g.backward(l).unwrap();
        for (v, b) in [x, pw, y, s, l].iter().zip(&before) {
            prop_assert_eq!(g.value(*v), b);
        }
    }
}

#[test]
fn parallel_kernels_match_sequential_bitwise() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (m, k, n) = (96, 70, 130);
    let a: Vec<f64> = (0..m * k).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| r.gen_range(-1.0..1.0)).collect();
    assert_eq!(
        kernels::matmul(Exec::Sequential, &a, &b, m, k, n),
        kernels::matmul(Exec::Auto, &a, &b, m, k, n)
    );
}

/// Every differentiable primitive at d ≤ 8, checked one at a time.
#[test]
fn each_primitive_passes_grad_check() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let a = store.insert("a", random(&mut r, &[3, 8], 1.0)).unwrap();
    let b = store.insert("b", random(&mut r, &[8, 5], 1.0)).unwrap();
    let c = store.insert("c", random(&mut r, &[3, 5], 1.0)).unwrap();
    let gain = store.insert("gain", random(&mut r, &[8], 1.5)).unwrap();
    let table = store.insert("table", random(&mut r, &[4, 2], 1.0)).unwrap();
    let emb = store.insert("emb", random(&mut r, &[6, 8], 1.0)).unwrap();
    let weights = random(&mut r, &[3, 5], 1.0);

    type Case = Box<dyn Fn(&mut Graph, &ParamStore) -> tristage_core::Result<tristage_core::Var>>;
    let w = weights.clone();
    let weighted = move |g: &mut Graph, v: tristage_core::Var| {
        let wv = g.input(w.clone());
        let m = g.mul(v, wv)?;
        Ok(g.sum(m))
    };
    let cases: Vec<(&str, Case)> = vec![
        ("matmul", Box::new({
            let f = weighted.clone();
            move |g, s| {
                let (x, y) = (g.param(s, a), g.param(s, b));
                let z = g.matmul(x, y)?;
                f(g, z)
            }
        })),
        ("add+mul+scale", Box::new({
            let f = weighted.clone();
            move |g, s| {
                let (x, y) = (g.param(s, c), g.param(s, c));
                let z = g.mul(x, y)?;
                let z = g.add(z, x)?;
                let z = g.scale(z, -0.7);
                f(g, z)
            }
        })),
        ("gelu", Box::new({
            let f = weighted.clone();
            move |g, s| {
                let x = g.param(s, c);
                let z = g.gelu(x);
                f(g, z)
            }
        })),
        ("softmax", Box::new({
            let f = weighted.clone();
            move |g, s| {
                let x = g.param(s, c);
                let z = g.softmax_rows(x)?;
                f(g, z)
            }
        })),
        ("rmsnorm grouped", Box::new(move |g, s| {
            let (x, gn) = (g.param(s, a), g.param(s, gain));
            let z = g.rmsnorm(x, gn, 4, 1e-6)?;
            let wv = g.input(Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64 * 0.37).sin()).collect())?);
            let m = g.mul(z, wv)?;
            Ok(g.sum(m))
        })),
        ("slice+select", Box::new(move |g, s| {
            let x = g.param(s, a);
            let z = g.slice_cols(x, 2, 5)?;
            let z = g.select_rows(z, vec![2, 0, 2])?;
            let z = g.gelu(z);
            Ok(g.sum(z))
        })),
        ("gather_sum", Box::new(move |g, s| {
            let e = g.param(s, emb);
            let t = g.param(s, a);
            let z = g.gather_sum(vec![e, t], vec![vec![(0, 1), (1, 2)], vec![(0, 5)], vec![(1, 0), (0, 1)]])?;
            let z = g.gelu(z);
            Ok(g.sum(z))
        })),
        ("cross_entropy", Box::new(move |g, s| {
            let x = g.param(s, c);
            g.cross_entropy(x, &[4, 0, 2], &[true, false, true])
        })),
        ("attention with bias", Box::new(move |g, s| {
            let x = g.param(s, emb);
            let q = g.slice_cols(x, 0, 4)?;
            let k = g.slice_cols(x, 4, 4)?;
            let v = g.scale(x, 0.5);
            let v = g.slice_cols(v, 2, 4)?;
            let tb = g.param(s, table);
            let bias = g.relpos_bias(tb, vec![0, 1, 2, 3, 3, 3])?;
            let z = g.causal_attention(q, k, v, bias, 2)?;
            let z = g.gelu(z);
            Ok(g.sum(z))
        })),
    ];
    for (name, f) in &cases {
        let report = grad_check(&store, 1e-5, f).unwrap();
        assert!(report.max_rel_error < 1e-4, "{name}: {report:?}");
    }
}
