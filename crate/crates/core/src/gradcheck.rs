//! Central-difference verification of analytic gradients (64-bit).

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Result, SeedError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, ParamCheck>,
    pub pass: bool,
}

/// Magnitude below which a gradient entry counts as zero (finite-difference round-off).
pub const ROUND_OFF: f64 = 1e-9;

/// Relative error with a `max(|a|, |n|, 1e-8)` denominator; zero when both sides are below `ROUND_OFF`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale <= ROUND_OFF {
        return 0.0;
    }
    (analytic - numeric).abs() / scale.max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of every trainable parameter; parameters the loss never touches get zeros.
pub fn analytic_gradients<F>(store: &ParamStore<f64>, f: &F) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    let mut map = g.param_grads(&grads);
    for (name, p) in store.iter() {
        if !p.frozen && !map.contains_key(name) {
            map.insert(name.to_string(), Tensor::zeros(p.value.shape()));
        }
    }
    Ok(map)
}

/// Element indices probed per parameter: all of them up to `limit`, else an even stride.
fn probe_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|i| i * n / limit).collect()
    }
}

pub fn numeric_gradients<F>(
    store: &ParamStore<f64>,
    f: &F,
    step: f64,
    limit: usize,
) -> Result<BTreeMap<String, BTreeMap<usize, f64>>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut probe = store.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = store.iter().filter(|(_, p)| !p.frozen).map(|(k, _)| k.to_string()).collect();
    for name in names {
        let n = store.get(&name)?.numel();
        let mut entries = BTreeMap::new();
        for i in probe_indices(n, limit) {
            let orig = store.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = evaluate(&probe, f)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = evaluate(&probe, f)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            entries.insert(i, (plus - minus) / (2.0 * step));
        }
        out.insert(name, entries);
    }
    Ok(out)
}

pub fn compare(
    analytic: &BTreeMap<String, Tensor<f64>>,
    numeric: &BTreeMap<String, BTreeMap<usize, f64>>,
    tolerance: f64,
) -> GradCheckReport {
    let mut per_param = BTreeMap::new();
    let mut worst = 0.0f64;
    for (name, entries) in numeric {
        let a = analytic.get(name);
        let mut max_rel = 0.0f64;
        for (&i, &nv) in entries {
            let av = a.map_or(0.0, |t| t.data()[i]);
            max_rel = max_rel.max(relative_error(av, nv));
        }
        worst = worst.max(max_rel);
        per_param.insert(
            name.clone(),
            ParamCheck { max_rel_error: max_rel, checked: entries.len(), pass: max_rel <= tolerance },
        );
    }
    GradCheckReport { max_rel_error: worst, pass: per_param.values().all(|p| p.pass), per_param }
}

/// Compares analytic and central-difference gradients of the scalar built by `f`.
///
/// At most `limit` elements of each parameter are probed. The check is refused
/// if two evaluations at the same point disagree.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, step: f64, tolerance: f64, limit: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let a = evaluate(store, &f)?;
    let b = evaluate(store, &f)?;
    if a.to_bits() != b.to_bits() {
        return Err(SeedError::NonDeterministic(format!("{a} != {b}")));
    }
    let analytic = analytic_gradients(store, &f)?;
    let numeric = numeric_gradients(store, &f, step, limit)?;
    Ok(compare(&analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use std::cell::Cell;

    fn random_store(rng: &mut Rng, shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, shape) in shapes {
            s.insert(*name, Tensor::from_fn(shape, |_| rng.normal()));
        }
        s
    }

    #[test]
    fn layer_norm_passes() {
        let mut rng = Rng::new(7);
        let store = random_store(&mut rng, &[("x", &[1, 8]), ("g", &[8]), ("b", &[8]), ("w", &[1, 8])]);
        let r = grad_check(
            &store,
            |g, s| {
                let x = g.param(s, "x")?;
                let (gm, bt, w) = (g.param(s, "g")?, g.param(s, "b")?, g.param(s, "w")?);
                let y = g.layer_norm(x, Some(gm), Some(bt), 1e-6)?;
                let t = g.tanh(y);
                let p = g.mul(t, w)?;
                Ok(g.sum(p))
            },
            1e-5,
            1e-6,
            64,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn round_off_on_zero_gradient_agrees() {
        assert_eq!(relative_error(0.0, 8.9e-11), 0.0);
        assert!(relative_error(0.0, 1e-6) > 0.99);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn doubled_analytic_gradient_fails() {
        let mut rng = Rng::new(3);
        let store = random_store(&mut rng, &[("x", &[2, 3])]);
        let f = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
            let x = g.param(s, "x")?;
            let t = g.tanh(x);
            Ok(g.sum(t))
        };
        let mut analytic = analytic_gradients(&store, &f).unwrap();
        for t in analytic.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let numeric = numeric_gradients(&store, &f, 1e-5, 64).unwrap();
        let r = compare(&analytic, &numeric, 1e-5);
        assert!(!r.pass);
        assert!((r.max_rel_error - 0.5).abs() < 1e-3 || (r.max_rel_error - 1.0).abs() < 1e-3, "{}", r.max_rel_error);
    }

    #[test]
    fn nondeterministic_operation_is_refused() {
        let mut rng = Rng::new(3);
        let store = random_store(&mut rng, &[("x", &[1, 2])]);
        let calls = Cell::new(0.0);
        let err = grad_check(
            &store,
            |g, s| {
                calls.set(calls.get() + 1.0);
                let x = g.param(s, "x")?;
                let sum = g.sum(x);
                Ok(g.scale(sum, calls.get()))
            },
            1e-5,
            1e-5,
            8,
        )
        .unwrap_err();
        assert!(matches!(err, SeedError::NonDeterministic(_)));
    }
}
