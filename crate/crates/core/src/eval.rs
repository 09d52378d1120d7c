//! Evaluation protocols: retrieval recall, inverse-render semantic
//! consistency, and caption attribute accuracy.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::data::{render_scene, SceneSpec, COLOR_WORDS, COL_WORDS, NUM_SPECS, ROW_WORDS, SHAPE_WORDS, SIZE_WORDS};
use crate::error::{input_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
    /// Mean over both directions and every k.
    pub mean: f64,
}

/// Rank of column `truth` in `row` under descending order, ties to the lower index.
fn rank_of(row: impl Iterator<Item = f64> + Clone, truth: usize) -> usize {
    let t = row.clone().nth(truth).unwrap_or(f64::NAN);
    row.enumerate().filter(|&(j, v)| v > t || (v == t && j < truth)).count()
}

/// Recall@k over a row-major `n × n` similarity matrix whose diagonal holds the true pairs.
pub fn recall_at_k(sim: &[f64], n: usize, ks: &[usize]) -> Result<RetrievalReport> {
    if n == 0 || sim.len() != n * n {
        return Err(input_err("recall_at_k", format!("{} similarities for n = {n}", sim.len())));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(input_err("recall_at_k", format!("k = {k} outside 1..={n}")));
    }
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(sim[i * n..(i + 1) * n].iter().copied(), i)).collect();
    let t2i: Vec<usize> = (0..n).map(|j| rank_of((0..n).map(|i| sim[i * n + j]), j)).collect();
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    let image_to_text: Vec<f64> = ks.iter().map(|&k| frac(&i2t, k)).collect();
    let text_to_image: Vec<f64> = ks.iter().map(|&k| frac(&t2i, k)).collect();
    let mean = (image_to_text.iter().sum::<f64>() + text_to_image.iter().sum::<f64>()) / (2 * ks.len()).max(1) as f64;
    Ok(RetrievalReport { ks: ks.to_vec(), image_to_text, text_to_image, mean })
}

fn canonical_renders() -> &'static [Tensor<f32>] {
    static RENDERS: OnceLock<Vec<Tensor<f32>>> = OnceLock::new();
    RENDERS.get_or_init(|| SceneSpec::all().map(|s| render_scene(&s)).collect())
}

/// Closest canonical render by pixel MSE; ties go to the smallest spec.
pub fn inverse_render(image: &Tensor<f32>) -> SceneSpec {
    let mut best = (f64::INFINITY, 0);
    for (i, r) in canonical_renders().iter().enumerate() {
        let d: f64 = r.data().iter().zip(image.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    SceneSpec::from_index(best.1.min(NUM_SPECS - 1)).expect("in range")
}

/// Which of shape, color, cell, size agree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeHits {
    pub shape: bool,
    pub color: bool,
    pub cell: bool,
    pub size: bool,
}

impl AttributeHits {
    pub fn compare(pred: &SceneSpec, truth: &SceneSpec) -> Self {
        Self {
            shape: pred.shape == truth.shape,
            color: pred.color == truth.color,
            cell: pred.cell == truth.cell,
            size: pred.size == truth.size,
        }
    }

    pub fn count(&self) -> usize {
        [self.shape, self.color, self.cell, self.size].iter().filter(|&&b| b).count()
    }

    pub fn score(&self) -> f64 {
        self.count() as f64 / 4.0
    }
}

/// Fraction of matching attributes between `inverse_render(image)` and `truth`.
pub fn semantic_consistency(image: &Tensor<f32>, truth: &SceneSpec) -> f64 {
    AttributeHits::compare(&inverse_render(image), truth).score()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Accuracy of shape, color, cell, size in that order.
    pub per_attribute: [f64; 4],
}

impl ConsistencyReport {
    pub fn from_hits(hits: &[AttributeHits]) -> Self {
        let n = hits.len().max(1) as f64;
        let scores: Vec<f64> = hits.iter().map(AttributeHits::score).collect();
        let acc = |f: fn(&AttributeHits) -> bool| hits.iter().filter(|h| f(h)).count() as f64 / n;
        Self {
            mean: scores.iter().sum::<f64>() / n,
            scores,
            per_attribute: [acc(|h| h.shape), acc(|h| h.color), acc(|h| h.cell), acc(|h| h.size)],
        }
    }
}

fn slot(words: &[&str], options: &[&str]) -> Option<usize> {
    words.iter().find_map(|w| options.iter().position(|o| o == w))
}

/// Parses the attribute slots of a caption and compares each with `truth`;
/// a slot that cannot be found counts as a miss.
pub fn caption_attribute_accuracy(caption: &str, truth: &SceneSpec) -> AttributeHits {
    let lower = caption.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    let cell = match (slot(&words, &ROW_WORDS), slot(&words, &COL_WORDS)) {
        (Some(r), Some(c)) => Some(r * 3 + c),
        _ => None,
    };
    AttributeHits {
        shape: slot(&words, &SHAPE_WORDS) == Some(truth.shape as usize),
        color: slot(&words, &COLOR_WORDS) == Some(truth.color as usize),
        cell: cell == Some(truth.cell as usize),
        size: slot(&words, &SIZE_WORDS) == Some(truth.size as usize),
    }
}
