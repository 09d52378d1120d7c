use proptest::prelude::*;

use seed_core::autograd::{Graph, Var};
use seed_core::error::Result;
use seed_core::gradcheck::grad_check;
use seed_core::params::ParamStore;
use seed_core::rng::Rng;
use seed_core::tensor::Tensor;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-5;

fn store(seed: u64, shapes: &[(&str, [usize; 2])]) -> ParamStore<f64> {
    let mut rng = Rng::new(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, Tensor::from_fn(shape, |_| rng.normal()));
    }
    s
}

/// Random fixed weights turn any output into a scalar with non-trivial gradients.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.normal()));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn assert_passes<F>(s: &ParamStore<f64>, f: F) -> std::result::Result<(), TestCaseError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let r = grad_check(s, f, STEP, TOLERANCE, 32).unwrap();
    prop_assert!(r.pass, "max relative error {:e}: {:?}", r.max_rel_error, r.per_param);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention(seed in any::<u64>(), batch in 1usize..3, n in 1usize..5, heads in 1usize..3, causal in any::<bool>()) {
        let d = 2 * heads;
        let s = store(seed, &[("q", [batch * n, d]), ("k", [batch * n, d]), ("v", [batch * n, d])]);
        let allowed: Vec<bool> = (0..n * n).map(|i| !causal || i % n <= i / n).collect();
        assert_passes(&s, |g, s| {
            let (q, k, v) = (g.param(s, "q")?, g.param(s, "k")?, g.param(s, "v")?);
            let a = g.attention(q, k, v, batch, heads, &allowed)?;
            project(g, a, seed)
        })?;
    }

    #[test]
    fn layer_norm_and_gelu(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..7) {
        let s = store(seed, &[("x", [rows, cols]), ("g", [1, cols]), ("b", [1, cols])]);
        assert_passes(&s, |g, s| {
            let (x, gm, bt) = (g.param(s, "x")?, g.param(s, "g")?, g.param(s, "b")?);
            let y = g.layer_norm(x, Some(gm), Some(bt), 1e-5)?;
            let z = g.gelu(y);
            project(g, z, seed)
        })?;
    }

    #[test]
    fn weighted_cross_entropy(seed in any::<u64>(), rows in 1usize..5, classes in 2usize..6) {
        let s = store(seed, &[("logits", [rows, classes])]);
        let targets: Vec<usize> = (0..rows).map(|i| (i * 7 + seed as usize) % classes).collect();
        let weights: Vec<f64> = (0..rows).map(|i| if i % 2 == 0 { 1.0 } else { 0.5 }).collect();
        assert_passes(&s, |g, s| {
            let l = g.param(s, "logits")?;
            g.cross_entropy(l, &targets, Some(&weights))
        })?;
    }

    #[test]
    fn cosine_and_mse(seed in any::<u64>(), rows in 1usize..4, cols in 1usize..6) {
        let s = store(seed, &[("a", [rows, cols]), ("b", [rows, cols])]);
        assert_passes(&s, |g, s| {
            let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
            let c = g.cosine_rows(a, b)?;
            let m = g.mse(a, b)?;
            let cs = project(g, c, seed)?;
            g.add(cs, m)
        })?;
    }

    #[test]
    fn row_gather_and_scatter(seed in any::<u64>(), rows in 2usize..6, cols in 1usize..4) {
        let s = store(seed, &[("table", [rows, cols]), ("base", [rows + 2, cols])]);
        let ids: Vec<usize> = (0..rows + 1).map(|i| (i * 3 + 1) % rows).collect();
        assert_passes(&s, |g, s| {
            let (t, b) = (g.param(s, "table")?, g.param(s, "base")?);
            let e = g.embedding(t, &ids)?;
            let picked = g.select_rows(e, &[0, rows])?;
            let merged = g.merge_rows(b, picked, &[1, rows + 1])?;
            let soft = g.softmax_rows(merged);
            project(g, soft, seed)
        })?;
    }

    #[test]
    fn matmul_chain(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let s = store(seed, &[("a", [m, k]), ("b", [k, n]), ("c", [m, n])]);
        assert_passes(&s, |g, s| {
            let (a, b, c) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "c")?);
            let ab = g.matmul(a, b)?;
            let nt = g.matmul_nt(ab, c)?;
            let small = g.scale(nt, 0.1);
            let t = g.tanh(small);
            project(g, t, seed)
        })?;
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_rows(&[vec![0.3, -0.2]]).unwrap());
    let q = g.straight_through(x, Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
    let w = g.constant(Tensor::from_rows(&[vec![2.0, -3.0]]).unwrap());
    let y = g.mul(q, w).unwrap();
    let loss = g.sum(y);
    assert_eq!(g.value(q).data(), &[1.0, 0.0]);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get_or_zero(x).data(), &[2.0, -3.0]);
}

#[test]
fn detached_branch_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_rows(&[vec![1.5]]).unwrap());
    let d = g.detach(x);
    let y = g.mul(d, x).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get_or_zero(x).data(), &[1.5]);
}
