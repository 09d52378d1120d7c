//! Symmetric InfoNCE over a batch of paired embeddings.

use crate::autograd::{Graph, Var};
use crate::error::{input_err, Result};
use crate::tensor::Real;

/// Mean of the row-wise and column-wise cross-entropies of a square logit
/// matrix whose diagonal holds the positive pairs.
pub fn info_nce_from_logits<T: Real>(g: &mut Graph<T>, logits: Var, logits_t: Var) -> Result<Var> {
    let b = g.value(logits).rows();
    if b == 0 || g.value(logits).cols() != b {
        return Err(input_err("contrastive_loss", format!("need a non-empty square matrix, got {:?}", g.shape(logits))));
    }
    let targets: Vec<usize> = (0..b).collect();
    let a = g.cross_entropy(logits, &targets, None)?;
    let c = g.cross_entropy(logits_t, &targets, None)?;
    let s = g.add(a, c)?;
    Ok(g.scale(s, 0.5))
}

/// Contrastive loss between `a` and `b` (`[B, d]`, paired by row).
///
/// Rows are L2-normalized, cosine similarities are multiplied by the scalar
/// `inv_tau` (1/τ), and the loss is the symmetric InfoNCE. `B = 1` gives 0.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var, inv_tau: Var) -> Result<Var> {
    if g.value(a).rows() == 0 || g.shape(a) != g.shape(b) {
        return Err(input_err("contrastive_loss", format!("paired batches {:?} and {:?}", g.shape(a), g.shape(b))));
    }
    let an = g.l2_normalize_rows(a);
    let bn = g.l2_normalize_rows(b);
    let sim = g.matmul_nt(an, bn)?;
    let sim_t = g.matmul_nt(bn, an)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let logits_t = g.mul_scalar(sim_t, inv_tau)?;
    info_nce_from_logits(g, logits, logits_t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn loss_of_similarity(sim: Vec<f64>, b: usize) -> f64 {
        let mut g = Graph::<f64>::new();
        let s = Tensor::new(vec![b, b], sim).unwrap();
        let mut t = Tensor::zeros(&[b, b]);
        for i in 0..b {
            for j in 0..b {
                t.data_mut()[j * b + i] = s.data()[i * b + j];
            }
        }
        let (s, t) = (g.constant(s), g.constant(t));
        let l = info_nce_from_logits(&mut g, s, t).unwrap();
        g.value(l).item()
    }

    #[test]
    fn separated_pair_closed_form() {
        let l = loss_of_similarity(vec![10.0, -10.0, -10.0, 10.0], 2);
        let expected = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-15, "{l} vs {expected}");
    }

    #[test]
    fn uniform_similarity_gives_log_b() {
        let l = loss_of_similarity(vec![0.3; 16], 4);
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 3], vec![-1.0, 0.5, 0.0]).unwrap());
        let s = g.constant(Tensor::scalar(14.0));
        let l = contrastive_loss(&mut g, a, b, s).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[0, 3]));
        let s = g.constant(Tensor::scalar(1.0));
        assert!(contrastive_loss(&mut g, a, a, s).is_err());
    }
}
