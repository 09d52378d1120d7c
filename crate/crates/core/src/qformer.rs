//! Causal Q-Former: learnable queries that see only earlier queries and the
//! full set of image features, emitting a left-to-right embedding sequence.

use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::backbones::FrozenBundle;
use crate::checkpoint;
use crate::config::{Config, QFormerConfig};
use crate::contrastive::contrastive_loss;
use crate::data::ImageSample;
use crate::error::{config_err, input_err, Result};
use crate::eval::recall_at_k;
use crate::nn::{init_stack, layer_norm, linear, transformer_stack, AttentionMask, MaskKind, StackConfig};
use crate::params::{Adam, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::train::{distinct_batches, EpochRecord};

pub const LOG_SCALE: &str = "qformer.log_scale";

fn stack(cfg: &QFormerConfig, d_v: usize) -> StackConfig {
    StackConfig::new(cfg.depth, cfg.width, cfg.heads, Some(d_v))
}

/// Parameters: queries `[N_q, d]`, the causal stack, a final norm, the
/// projection `d → d_c`, and the log inverse temperature.
pub fn init_qformer(cfg: &QFormerConfig, d_v: usize, d_c: usize, rng: &mut Rng) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    s.init_normal("qformer.queries", &[cfg.queries, cfg.width], 1.0, rng);
    init_stack(&mut s, "qformer", &stack(cfg, d_v), rng)?;
    s.init_layer_norm("qformer.ln_f", cfg.width);
    s.init_linear("qformer.proj", cfg.width, d_c, 1.0, rng);
    s.insert(LOG_SCALE, Tensor::scalar((1.0 / cfg.tau_init).ln() as f32));
    Ok(s)
}

/// Causal embeddings `[B·n, d]` using the first `n ≤ N_q` queries.
pub fn qformer_forward_prefix<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &QFormerConfig,
    feats: Var,
    batch: usize,
    n: usize,
) -> Result<Var> {
    if n == 0 || n > cfg.queries {
        return Err(config_err("causal_qformer_forward", format!("{n} queries of {}", cfg.queries)));
    }
    let d_v = s.get("qformer.layers.0.xattn.k.w").map(|w| w.rows()).unwrap_or(g.value(feats).cols());
    if g.value(feats).cols() != d_v || batch == 0 || !g.value(feats).rows().is_multiple_of(batch) {
        return Err(input_err(
            "causal_qformer_forward",
            format!("image features {:?} for batch {batch}, expected width {d_v}", g.shape(feats)),
        ));
    }
    let q = g.param(s, "qformer.queries")?;
    let q = if n == cfg.queries { q } else { g.select_rows(q, &(0..n).collect::<Vec<_>>())? };
    let q = g.repeat_rows(q, batch);
    let mask = AttentionMask::build(n, n, MaskKind::Causal)?;
    let h = transformer_stack(g, s, "qformer", &stack(cfg, d_v), q, batch, &mask, Some(feats), None)?;
    layer_norm(g, s, "qformer.ln_f", h)
}

pub fn qformer_forward<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &QFormerConfig, feats: Var, batch: usize) -> Result<Var> {
    qformer_forward_prefix(g, s, cfg, feats, batch, cfg.queries)
}

/// Projects the last causal embedding of each sample into the contrastive space, `[B, d_c]`.
pub fn final_embedding<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &QFormerConfig, emb: Var) -> Result<Var> {
    let batch = g.value(emb).rows() / cfg.queries;
    let last: Vec<usize> = (0..batch).map(|b| b * cfg.queries + cfg.queries - 1).collect();
    let x = g.select_rows(emb, &last)?;
    linear(g, s, "qformer.proj", x)
}

/// `1/τ` as a graph scalar.
pub fn inverse_temperature<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>) -> Result<Var> {
    let ls = g.param(s, LOG_SCALE)?;
    Ok(g.exp(ls))
}

/// Stage-I loss on precomputed image features and caption vectors.
pub fn stage1_loss<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &QFormerConfig,
    feats: Tensor<T>,
    text: Tensor<T>,
) -> Result<Var> {
    let batch = text.rows();
    let f = g.constant(feats);
    let emb = qformer_forward(g, s, cfg, f, batch)?;
    let z = final_embedding(g, s, cfg, emb)?;
    let t = g.constant(text);
    let inv_tau = inverse_temperature(g, s)?;
    contrastive_loss(g, z, t, inv_tau)
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub params: ParamStore<f32>,
    pub cfg: QFormerConfig,
}

impl QFormer {
    pub fn tau(&self) -> f64 {
        1.0 / (self.params.get(LOG_SCALE).map(|t| t.item() as f64).unwrap_or(0.0)).exp()
    }

    /// Causal embeddings `[B·N_q, d]` from ViT features `[B·T_v, d_v]`.
    pub fn embed_features(&self, feats: &Tensor<f32>, batch: usize) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let f = g.constant(feats.clone());
        let e = qformer_forward(&mut g, &self.params, &self.cfg, f, batch)?;
        Ok(g.value(e).clone())
    }

    /// Contrastive vectors `[B, d_c]` of the final causal embedding.
    pub fn final_vectors(&self, embeddings: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let e = g.constant(embeddings.clone());
        let z = final_embedding(&mut g, &self.params, &self.cfg, e)?;
        let z = g.l2_normalize_rows(z);
        Ok(g.value(z).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)
    }

    pub fn load(path: &Path, cfg: &Config) -> Result<Self> {
        let mut params = checkpoint::load(path, "qformer.*")?;
        params.freeze_all();
        Ok(Self { params, cfg: cfg.qformer.clone() })
    }
}

/// Causal embeddings of many images, processed in chunks.
pub fn embed_images(bundle: &FrozenBundle, qf: &QFormer, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut rows = Vec::new();
    for chunk in images.chunks(64) {
        let feats = bundle.vit_encode_batch(chunk)?;
        rows.extend(qf.embed_features(&feats, chunk.len())?.into_data());
    }
    Tensor::new(vec![images.len() * qf.cfg.queries, qf.cfg.width], rows)
}

/// Image→text and text→image R@1 of final causal embeddings against caption vectors.
pub fn heldout_r1(bundle: &FrozenBundle, qf: &QFormer, heldout: &[ImageSample]) -> Result<f64> {
    let images: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
    let emb = embed_images(bundle, qf, &images)?;
    let z = qf.final_vectors(&emb)?;
    let caps: Vec<Vec<usize>> = heldout.iter().map(|s| s.caption_ids.clone()).collect();
    let t = bundle.text_encode_batch(&caps)?;
    let n = heldout.len();
    let sim = crate::tensor::matmul_nt(z.data(), t.data(), n, z.cols(), n);
    let sim: Vec<f64> = sim.iter().map(|&v| v as f64).collect();
    let rep = recall_at_k(&sim, n, &[1])?;
    Ok((rep.image_to_text[0] + rep.text_to_image[0]) / 2.0)
}

fn clamp_temperature(store: &mut ParamStore<f32>, cfg: &QFormerConfig) -> Result<()> {
    let (lo, hi) = ((1.0 / cfg.tau_max).ln() as f32, (1.0 / cfg.tau_min).ln() as f32);
    let t = store.get_mut(LOG_SCALE)?;
    t.data_mut()[0] = t.data()[0].clamp(lo, hi);
    Ok(())
}

/// Trains the Q-Former against frozen caption vectors; the backbones are untouched.
pub fn train_stage1(
    train: &[ImageSample],
    heldout: &[ImageSample],
    bundle: &FrozenBundle,
    cfg: &Config,
    rng: &mut Rng,
) -> Result<(QFormer, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(input_err("train_stage1", "empty dataset"));
    }
    let qcfg = &cfg.qformer;
    let d_v = cfg.vit.width;
    let mut store = init_qformer(qcfg, d_v, cfg.text.embed_dim, rng)?;
    let tv = bundle.vit_tokens();
    let images: Vec<&Tensor<f32>> = train.iter().map(|s| &s.image).collect();
    let mut feats = Vec::with_capacity(train.len());
    for chunk in images.chunks(64) {
        let f = bundle.vit_encode_batch(chunk)?;
        feats.extend(f.data().chunks(tv * d_v).map(<[f32]>::to_vec));
    }
    let caps: Vec<Vec<usize>> = train.iter().map(|s| s.caption_ids.clone()).collect();
    let text = bundle.text_encode_batch(&caps)?;
    let dc = text.cols();
    let keys: Vec<usize> = train.iter().map(|s| s.spec.index()).collect();
    let o = &cfg.train.stage1;
    let mut opt = Adam::new(o.lr).with_clip(o.clip_norm);
    let mut trace = Vec::new();
    for epoch in 0..o.epochs {
        let batches = distinct_batches(&keys, o.batch_size, rng);
        let mut total = 0.0;
        for batch in &batches {
            let f: Vec<f32> = batch.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let t: Vec<f32> = batch.iter().flat_map(|&i| text.row(i).iter().copied()).collect();
            let mut g = Graph::new();
            let loss = stage1_loss(
                &mut g,
                &store,
                qcfg,
                Tensor::new(vec![batch.len() * tv, d_v], f)?,
                Tensor::new(vec![batch.len(), dc], t)?,
            )?;
            total += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            opt.step(&mut store, &g.param_grads(&grads))?;
            clamp_temperature(&mut store, qcfg)?;
        }
        let qf = QFormer { params: store.clone(), cfg: qcfg.clone() };
        let r1 = if heldout.is_empty() { None } else { Some(heldout_r1(bundle, &qf, heldout)?) };
        trace.push(EpochRecord::log("stage1", epoch, total / batches.len() as f64, r1));
    }
    store.freeze_all();
    Ok((QFormer { params: store, cfg: qcfg.clone() }, trace))
}
