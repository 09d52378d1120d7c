//! Vector quantization of causal embeddings: the codebook with EMA updates,
//! the code decoder, the dual-reconstruction losses and stage-II training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::FrozenBundle;
use crate::checkpoint;
use crate::config::{Config, RevqInput, VqConfig, VqMetric};
use crate::data::ImageSample;
use crate::error::{config_err, input_err, Result, SeedError};
use crate::nn::{init_stack, layer_norm, linear, transformer_stack, AttentionMask, MaskKind, StackConfig};
use crate::params::{Adam, ParamStore};
use crate::qformer::{embed_images, qformer_forward, QFormer};
use crate::revq::{init_revq, reverse_qformer_forward};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::train::{cosine_lr, shuffled_batches, EpochRecord};

/// Smoothing added to EMA cluster sizes before dividing.
pub const EMA_EPS: f64 = 1e-5;

/// A fixed-length sequence of codebook indices for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub indices: Vec<usize>,
}

impl CodeSequence {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Space-separated ids.
    pub fn to_text(&self) -> String {
        self.indices.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let indices = text
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| input_err("parse_codes", format!("not a code id: {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { indices })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor<f32>,
    ema_size: Vec<f32>,
    ema_sum: Tensor<f32>,
    pub metric: VqMetric,
}

/// Entries re-seeded by the last EMA update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmaStats {
    pub reseeded: Vec<usize>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum()
}

fn neg_cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    -dot / (na * nb).max(1e-12)
}

impl Codebook {
    /// Entries `[K, d]` with unit EMA sizes consistent with the entries.
    pub fn new(entries: Tensor<f32>, metric: VqMetric) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() < 2 || !entries.is_finite() {
            return Err(config_err("codebook", format!("need ≥ 2 finite entries, got {:?}", entries.shape())));
        }
        let k = entries.rows();
        let ema_sum = entries.map(|v| (v as f64 * (1.0 + EMA_EPS)) as f32);
        Ok(Self { entries, ema_size: vec![1.0; k], ema_sum, metric })
    }

    /// Codebook initialized from `k` distinct rows of `vectors`.
    pub fn from_samples(vectors: &Tensor<f32>, k: usize, metric: VqMetric, rng: &mut Rng) -> Result<Self> {
        if vectors.rows() < k {
            return Err(input_err("codebook", format!("{} vectors cannot seed {k} entries", vectors.rows())));
        }
        let picks = rng.permutation(vectors.rows());
        let rows: Vec<Vec<f32>> = picks[..k].iter().map(|&i| vectors.row(i).to_vec()).collect();
        Self::new(Tensor::from_rows(&rows)?, metric)
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Tensor<f32> {
        &self.entries
    }

    pub fn ema_sizes(&self) -> &[f32] {
        &self.ema_size
    }

    pub fn entry(&self, k: usize) -> Result<&[f32]> {
        if k >= self.size() {
            return Err(input_err("codebook", format!("code {k} outside codebook of {}", self.size())));
        }
        Ok(self.entries.row(k))
    }

    /// Nearest entry; ties go to the smallest index.
    pub fn quantize(&self, v: &[f32]) -> Result<(usize, &[f32])> {
        if v.len() != self.dim() {
            return Err(input_err("quantize", format!("vector of width {} for codebook width {}", v.len(), self.dim())));
        }
        if v.iter().any(|x| x.is_nan()) {
            return Err(input_err("quantize", "NaN in input vector"));
        }
        let mut best = (f64::INFINITY, 0);
        for k in 0..self.size() {
            let d = match self.metric {
                VqMetric::L2 => sq_dist(v, self.entries.row(k)),
                VqMetric::Cosine => neg_cosine(v, self.entries.row(k)),
            };
            if d < best.0 {
                best = (d, k);
            }
        }
        Ok((best.1, self.entries.row(best.1)))
    }

    /// Index of the nearest entry for every row.
    pub fn quantize_rows(&self, vectors: &Tensor<f32>) -> Result<Vec<usize>> {
        (0..vectors.rows()).map(|i| self.quantize(vectors.row(i)).map(|(k, _)| k)).collect()
    }

    /// Entries for the given indices, stacked `[n, d]`.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &k in indices {
            out.extend_from_slice(self.entry(k)?);
        }
        Tensor::new(vec![indices.len(), self.dim()], out)
    }

    pub fn lookup_all(&self, seqs: &[CodeSequence]) -> Result<Tensor<f32>> {
        let idx: Vec<usize> = seqs.iter().flat_map(|s| s.indices.iter().copied()).collect();
        self.gather(&idx)
    }

    /// One EMA step from `vectors` (`[n, d]`) assigned to `assignments`.
    ///
    /// Entries whose share of the EMA mass drops below `dead_threshold` are
    /// re-seeded from random batch vectors.
    pub fn ema_update(
        &mut self,
        vectors: &Tensor<f32>,
        assignments: &[usize],
        decay: f64,
        dead_threshold: f64,
        rng: &mut Rng,
    ) -> Result<EmaStats> {
        let (k, d) = (self.size(), self.dim());
        if !(0.0..=1.0).contains(&decay) {
            return Err(config_err("ema_update", format!("decay {decay} outside [0, 1]")));
        }
        if vectors.rows() != assignments.len() || (vectors.rows() > 0 && vectors.cols() != d) {
            return Err(input_err("ema_update", "vectors and assignments disagree"));
        }
        if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
            return Err(input_err("ema_update", format!("assignment {bad} outside codebook of {k}")));
        }
        let mut counts = vec![0f64; k];
        let mut sums = vec![0f64; k * d];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1.0;
            for (s, &v) in sums[a * d..(a + 1) * d].iter_mut().zip(vectors.row(i)) {
                *s += v as f64;
            }
        }
        let ema_sum = self.ema_sum.data_mut();
        let entries = self.entries.data_mut();
        for c in 0..k {
            let n = decay * self.ema_size[c] as f64 + (1.0 - decay) * counts[c];
            self.ema_size[c] = n as f32;
            for j in 0..d {
                let m = decay * ema_sum[c * d + j] as f64 + (1.0 - decay) * sums[c * d + j];
                ema_sum[c * d + j] = m as f32;
                entries[c * d + j] = (m / (n + EMA_EPS)) as f32;
            }
        }
        let mut stats = EmaStats::default();
        let total: f64 = self.ema_size.iter().map(|&n| n as f64).sum();
        if vectors.rows() == 0 || total <= 0.0 {
            return Ok(stats);
        }
        let fresh = total / k as f64;
        for c in 0..k {
            if (self.ema_size[c] as f64) / total < dead_threshold {
                let src = vectors.row(rng.below(vectors.rows())).to_vec();
                self.ema_size[c] = fresh as f32;
                for j in 0..d {
                    entries[c * d + j] = src[j];
                    ema_sum[c * d + j] = (src[j] as f64 * (fresh + EMA_EPS)) as f32;
                }
                stats.reseeded.push(c);
            }
        }
        Ok(stats)
    }

    pub fn to_params(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert_frozen("codebook.entries", self.entries.clone());
        s.insert_frozen("codebook.ema_size", Tensor::new(vec![self.size()], self.ema_size.clone()).expect("shape"));
        s.insert_frozen("codebook.ema_sum", self.ema_sum.clone());
        s
    }

    pub fn from_params(s: &ParamStore<f32>, metric: VqMetric) -> Result<Self> {
        let missing = |_| SeedError::MissingCheckpoint("codebook.*".into());
        let entries = s.get("codebook.entries").map_err(missing)?.clone();
        let ema_size = s.get("codebook.ema_size").map_err(missing)?.data().to_vec();
        let ema_sum = s.get("codebook.ema_sum").map_err(missing)?.clone();
        if ema_size.len() != entries.rows() || ema_sum.shape() != entries.shape() || !entries.is_finite() {
            return Err(input_err("codebook", "inconsistent codebook tensors"));
        }
        Ok(Self { entries, ema_size, ema_sum, metric })
    }

    pub fn digest(&self) -> String {
        self.to_params().digest()
    }
}

/// Usage statistics of a set of code sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub usage: Vec<usize>,
    /// `exp` of the entropy of the usage distribution.
    pub perplexity: f64,
    pub dead: usize,
}

pub fn codebook_stats(seqs: &[CodeSequence], k: usize) -> Result<CodebookStats> {
    let total: usize = seqs.iter().map(CodeSequence::len).sum();
    if total == 0 {
        return Err(input_err("codebook_stats", "no codes"));
    }
    let mut usage = vec![0usize; k];
    for &c in seqs.iter().flat_map(|s| &s.indices) {
        *usage.get_mut(c).ok_or_else(|| input_err("codebook_stats", format!("code {c} outside codebook of {k}")))? += 1;
    }
    let entropy: f64 = usage
        .iter()
        .filter(|&&u| u > 0)
        .map(|&u| {
            let p = u as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    let dead = usage.iter().filter(|&&u| u == 0).count();
    Ok(CodebookStats { usage, perplexity: entropy.exp(), dead })
}

/// Shapes shared by the code decoder and the reverse Q-Former.
#[derive(Clone, Debug, PartialEq)]
pub struct VqDims {
    pub queries: usize,
    pub width: usize,
    pub gen_tokens: usize,
    pub gen_width: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub revq_depth: usize,
    pub revq_heads: usize,
    pub revq_input: RevqInput,
}

impl VqDims {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            queries: cfg.qformer.queries,
            width: cfg.qformer.width,
            gen_tokens: cfg.generation.tokens,
            gen_width: cfg.generation.width,
            decoder_depth: cfg.vq.decoder_depth,
            decoder_heads: cfg.vq.decoder_heads,
            revq_depth: cfg.vq.revq_depth,
            revq_heads: cfg.vq.revq_heads,
            revq_input: cfg.vq.revq_input,
        }
    }

    fn decoder_stack(&self) -> StackConfig {
        StackConfig::new(self.decoder_depth, self.width, self.decoder_heads, None)
    }
}

/// Code decoder and reverse Q-Former parameters.
pub fn init_stage2_params(dims: &VqDims, rng: &mut Rng) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    s.init_normal("code_dec.pos", &[dims.queries, dims.width], 0.1, rng);
    init_stack(&mut s, "code_dec", &dims.decoder_stack(), rng)?;
    s.init_layer_norm("code_dec.ln_f", dims.width);
    s.init_linear("code_dec.out", dims.width, dims.width, 1.0, rng);
    init_revq(&mut s, dims, rng)?;
    Ok(s)
}

/// Reconstructed causal embeddings `[B·N_q, d]` from code entries `[B·N_q, d]`.
pub fn reconstruct_forward<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, dims: &VqDims, entries: Var, batch: usize) -> Result<Var> {
    let (rows, width) = (g.value(entries).rows(), g.value(entries).cols());
    if width != dims.width || batch == 0 || rows != batch * dims.queries {
        return Err(input_err("reconstruct_embeddings", format!("entries [{rows},{width}] for batch {batch}")));
    }
    let pos = g.param(s, "code_dec.pos")?;
    let pos = g.repeat_rows(pos, batch);
    let x = g.add(entries, pos)?;
    let mask = AttentionMask::build(dims.queries, dims.queries, MaskKind::Full)?;
    let h = transformer_stack(g, s, "code_dec", &dims.decoder_stack(), x, batch, &mask, None, None)?;
    let h = layer_norm(g, s, "code_dec.ln_f", h)?;
    linear(g, s, "code_dec.out", h)
}

pub fn reconstruct_embeddings(
    codes: &CodeSequence,
    codebook: &Codebook,
    params: &ParamStore<f32>,
    dims: &VqDims,
) -> Result<Tensor<f32>> {
    reconstruct_batch(std::slice::from_ref(codes), codebook, params, dims)
}

pub fn reconstruct_batch(seqs: &[CodeSequence], codebook: &Codebook, params: &ParamStore<f32>, dims: &VqDims) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let e = g.constant(codebook.lookup_all(seqs)?);
    let r = reconstruct_forward(&mut g, params, dims, e, seqs.len())?;
    Ok(g.value(r).clone())
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Vars {
    pub rec_cos: Var,
    pub gen_mse: Var,
    pub commit: Var,
    pub total: Var,
}

/// The three stage-II terms from already computed pieces.
///
/// `rec_cos = 1 − mean cosine(decoded, sg(rec_target))`, `gen_mse` is the
/// element mean squared error, and `commit = mean_i ‖v_i − sg(e_i)‖²` for the
/// pre-quantization embeddings `v`.
pub fn dual_reconstruction_losses<T: Real>(
    g: &mut Graph<T>,
    decoded: Var,
    rec_target: Var,
    generated: Var,
    gen_target: Var,
    causal: Var,
    entries: Var,
) -> Result<(Var, Var, Var)> {
    let target = g.detach(rec_target);
    let cos = g.cosine_rows(decoded, target)?;
    let mean_cos = g.mean(cos);
    let neg = g.scale(mean_cos, -1.0);
    let one = g.constant(Tensor::scalar(T::one()));
    let rec_cos = g.add(one, neg)?;
    let gen_mse = g.mse(generated, gen_target)?;
    let sg = g.detach(entries);
    let d = g.value(causal).cols() as f64;
    let m = g.mse(causal, sg)?;
    let commit = g.scale(m, d);
    Ok((rec_cos, gen_mse, commit))
}

/// Stage-II objective on causal embeddings `causal` (`[B·N_q, d]`).
///
/// Quantization is by the entries in `quantized`; gradients pass it
/// straight through to `causal`. The code decoder reconstructs
/// `rec_target`, or `causal` itself when none is given.
#[allow(clippy::too_many_arguments)]
pub fn stage2_losses<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    dims: &VqDims,
    vq: &VqConfig,
    causal: Var,
    quantized: Tensor<T>,
    gen_target: Tensor<T>,
    rec_target: Option<Var>,
    batch: usize,
) -> Result<Stage2Vars> {
    let entries = g.constant(quantized.clone());
    let q = g.straight_through(causal, quantized)?;
    let decoded = reconstruct_forward(g, s, dims, q, batch)?;
    let side = match dims.revq_input {
        RevqInput::Entries => q,
        RevqInput::Reconstructed => decoded,
    };
    let generated = reverse_qformer_forward(g, s, dims, side, batch)?;
    let target = g.constant(gen_target);
    let rt = rec_target.unwrap_or(causal);
    let (rec_cos, gen_mse, commit) = dual_reconstruction_losses(g, decoded, rt, generated, target, causal, entries)?;
    let gw = g.scale(gen_mse, vq.lambda_gen);
    let cw = g.scale(commit, vq.commitment);
    let t = g.add(rec_cos, gw)?;
    let total = g.add(t, cw)?;
    Ok(Stage2Vars { rec_cos, gen_mse, commit, total })
}

/// Everything stage II produces.
#[derive(Clone, Debug)]
pub struct VqModel {
    pub codebook: Codebook,
    /// `code_dec.*` and `revq.*`.
    pub params: ParamStore<f32>,
    pub dims: VqDims,
}

impl VqModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.params.clone();
        s.merge(self.codebook.to_params());
        checkpoint::save(path, &s)
    }

    pub fn load(path: &Path, cfg: &Config) -> Result<Self> {
        let mut s = checkpoint::load(path, "codebook.*")?;
        s.freeze_all();
        let codebook = Codebook::from_params(&s, cfg.vq.metric)?;
        let mut params = s.subset("code_dec.");
        params.merge(s.subset("revq."));
        Ok(Self { codebook, params, dims: VqDims::from_config(cfg) })
    }
}

/// Image → ViT features → causal embeddings → per-position nearest codes.
pub fn tokenize(image: &Tensor<f32>, bundle: &FrozenBundle, qf: &QFormer, codebook: &Codebook) -> Result<CodeSequence> {
    Ok(tokenize_batch(&[image], bundle, qf, codebook)?.remove(0))
}

pub fn tokenize_batch(images: &[&Tensor<f32>], bundle: &FrozenBundle, qf: &QFormer, codebook: &Codebook) -> Result<Vec<CodeSequence>> {
    let emb = embed_images(bundle, qf, images)?;
    let idx = codebook.quantize_rows(&emb)?;
    Ok(idx.chunks(qf.cfg.queries).map(|c| CodeSequence::new(c.to_vec())).collect())
}

/// Held-out diagnostics of a trained tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub mean_cosine: f64,
    pub gen_mse: f64,
    pub perplexity: f64,
}

/// `encoder` produces the codes; reconstructions are scored against the
/// embeddings of `reference` (the stage-I Q-Former).
pub fn evaluate_stage2(
    samples: &[ImageSample],
    bundle: &FrozenBundle,
    encoder: &QFormer,
    reference: &QFormer,
    model: &VqModel,
) -> Result<Stage2Report> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let codes_from = embed_images(bundle, encoder, &images)?;
    let emb = embed_images(bundle, reference, &images)?;
    let idx = model.codebook.quantize_rows(&codes_from)?;
    let seqs: Vec<CodeSequence> = idx.chunks(model.dims.queries).map(|c| CodeSequence::new(c.to_vec())).collect();
    let rec = reconstruct_batch(&seqs, &model.codebook, &model.params, &model.dims)?;
    let cos: f64 = (0..rec.rows()).map(|i| crate::autograd::cosine(rec.row(i), emb.row(i)) as f64).sum::<f64>() / rec.rows() as f64;
    let gen = crate::revq::generation_embeddings(&seqs, &model.codebook, &model.params, &model.dims)?;
    let caps: Vec<Vec<usize>> = samples.iter().map(|s| s.caption_ids.clone()).collect();
    let target = bundle.gen_text_encode_batch(&caps)?;
    let gen_mse = gen.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum::<f64>() / gen.numel() as f64;
    let perplexity = codebook_stats(&seqs, model.codebook.size())?.perplexity;
    Ok(Stage2Report { mean_cosine: cos, gen_mse, perplexity })
}

/// Trains the codebook (EMA), code decoder and reverse Q-Former.
///
/// The Q-Former stays frozen unless `vq.tune_qformer` is set, in which case
/// a tuned copy is returned alongside.
pub fn train_stage2(
    train: &[ImageSample],
    heldout: &[ImageSample],
    qf: &QFormer,
    bundle: &FrozenBundle,
    cfg: &Config,
    rng: &mut Rng,
) -> Result<(VqModel, QFormer, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(input_err("train_stage2", "empty dataset"));
    }
    let dims = VqDims::from_config(cfg);
    let vq = &cfg.vq;
    let (nq, d) = (dims.queries, dims.width);
    let images: Vec<&Tensor<f32>> = train.iter().map(|s| &s.image).collect();
    let mut tuned = qf.clone();
    if vq.tune_qformer {
        tuned.params.set_frozen("qformer.", false);
        tuned.params.set_frozen(crate::qformer::LOG_SCALE, true);
    }
    let tv = bundle.vit_tokens();
    let dv = bundle.vit.width;
    let mut feats = Vec::with_capacity(train.len());
    for chunk in images.chunks(64) {
        feats.extend(bundle.vit_encode_batch(chunk)?.data().chunks(tv * dv).map(<[f32]>::to_vec));
    }
    let mut causal: Vec<Vec<f32>> = Vec::with_capacity(train.len());
    for chunk in feats.chunks(64) {
        let f = Tensor::new(vec![chunk.len() * tv, dv], chunk.concat())?;
        causal.extend(qf.embed_features(&f, chunk.len())?.data().chunks(nq * d).map(<[f32]>::to_vec));
    }
    let caps: Vec<Vec<usize>> = train.iter().map(|s| s.caption_ids.clone()).collect();
    let gm = dims.gen_tokens * dims.gen_width;
    let mut targets = Vec::with_capacity(train.len());
    for chunk in caps.chunks(64) {
        targets.extend(bundle.gen_text_encode_batch(chunk)?.data().chunks(gm).map(<[f32]>::to_vec));
    }
    let all_causal = Tensor::new(vec![train.len() * nq, d], causal.concat())?;
    let mut codebook = Codebook::from_samples(&all_causal, vq.codebook_size, vq.metric, rng)?;
    let mut params = init_stage2_params(&dims, rng)?;
    let o = &cfg.train.stage2;
    let mut opt = Adam::new(o.lr).with_clip(o.clip_norm);
    let mut qopt = Adam::new(o.lr).with_clip(o.clip_norm);
    let mut trace = Vec::new();
    for epoch in 0..o.epochs {
        opt.lr = cosine_lr(o.lr, epoch, o.epochs);
        qopt.lr = opt.lr;
        let batches = shuffled_batches(train.len(), o.batch_size, rng);
        let mut total = 0.0;
        let mut parts = [0.0f64; 3];
        for batch in &batches {
            let b = batch.len();
            let mut g = Graph::new();
            let v = if vq.tune_qformer {
                let f: Vec<f32> = batch.iter().flat_map(|&i| feats[i].iter().copied()).collect();
                let f = g.constant(Tensor::new(vec![b * tv, dv], f)?);
                qformer_forward(&mut g, &tuned.params, &tuned.cfg, f, b)?
            } else {
                let c: Vec<f32> = batch.iter().flat_map(|&i| causal[i].iter().copied()).collect();
                g.constant(Tensor::new(vec![b * nq, d], c)?)
            };
            let vt = g.value(v).clone();
            let assign = codebook.quantize_rows(&vt)?;
            let quantized = codebook.gather(&assign)?;
            let t: Vec<f32> = batch.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            let target = Tensor::new(vec![b * dims.gen_tokens, dims.gen_width], t)?;
            let rec_target = if vq.tune_qformer {
                let c: Vec<f32> = batch.iter().flat_map(|&i| causal[i].iter().copied()).collect();
                Some(g.constant(Tensor::new(vec![b * nq, d], c)?))
            } else {
                None
            };
            let losses = stage2_losses(&mut g, &params, &dims, vq, v, quantized, target, rec_target, b)?;
            total += g.value(losses.total).item() as f64;
            parts[0] += g.value(losses.rec_cos).item() as f64;
            parts[1] += g.value(losses.gen_mse).item() as f64;
            parts[2] += g.value(losses.commit).item() as f64;
            let grads = g.backward(losses.total)?;
            let all = g.param_grads(&grads);
            let (qgrads, grads): (std::collections::BTreeMap<_, _>, std::collections::BTreeMap<_, _>) =
                all.into_iter().partition(|(k, _)| k.starts_with("qformer."));
            opt.step(&mut params, &grads)?;
            if vq.tune_qformer {
                qopt.step(&mut tuned.params, &qgrads)?;
            }
            codebook.ema_update(&vt, &assign, vq.decay, vq.dead_threshold, rng)?;
        }
        let nb = batches.len() as f64;
        log::debug!("stage2 epoch {epoch}: rec_cos {:.4} gen_mse {:.4} commit {:.4}", parts[0] / nb, parts[1] / nb, parts[2] / nb);
        let model = VqModel { codebook: codebook.clone(), params: params.clone(), dims: dims.clone() };
        let metric = if heldout.is_empty() { None } else { Some(evaluate_stage2(heldout, bundle, &tuned, qf, &model)?.mean_cosine) };
        trace.push(EpochRecord::log("stage2", epoch, total / batches.len() as f64, metric));
    }
    params.freeze_all();
    tuned.params.freeze_all();
    Ok((VqModel { codebook, params, dims }, tuned, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cb(rows: &[Vec<f32>]) -> Codebook {
        Codebook::new(Tensor::from_rows(rows).unwrap(), VqMetric::L2).unwrap()
    }

    #[test]
    fn nearest_and_tie_break() {
        let c = cb(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(c.quantize(&[0.9, 0.1]).unwrap().0, 0);
        assert_eq!(c.quantize(&[0.5, 0.5]).unwrap().0, 0);
        assert_eq!(c.quantize(&[0.1, 0.9]).unwrap().0, 1);
        assert!(c.quantize(&[f32::NAN, 0.0]).is_err());
    }

    #[test]
    fn codebook_needs_two_entries() {
        assert!(Codebook::new(Tensor::from_rows(&[vec![1.0f32]]).unwrap(), VqMetric::L2).is_err());
    }

    #[test]
    fn unit_decay_leaves_codebook_unchanged() {
        let mut c = cb(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 0.0]]);
        let before = c.entries().clone();
        let v = Tensor::from_rows(&[vec![5.0f32, 5.0], vec![-3.0, 1.0]]).unwrap();
        let stats = c.ema_update(&v, &[0, 1], 1.0, 1e-3, &mut Rng::new(1)).unwrap();
        assert!(stats.reseeded.is_empty());
        for (a, b) in c.entries().data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn repeated_updates_converge_to_the_assigned_vector() {
        let mut c = cb(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let v = Tensor::from_rows(&[vec![0.3f32, -0.7], vec![0.3, -0.7]]).unwrap();
        let mut rng = Rng::new(2);
        for _ in 0..2000 {
            c.ema_update(&v, &[1, 1], 0.99, 0.0, &mut rng).unwrap();
        }
        let e = c.entry(1).unwrap();
        assert!((e[0] - 0.3).abs() < 1e-4 && (e[1] + 0.7).abs() < 1e-4, "{e:?}");
    }

    #[test]
    fn starving_entry_is_reseeded() {
        let mut c = cb(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]]);
        let v = Tensor::from_rows(&[vec![1.0f32, 0.1], vec![0.1, 1.0]]).unwrap();
        let mut rng = Rng::new(3);
        let mut reseeded = false;
        for _ in 0..1000 {
            let a = c.quantize_rows(&v).unwrap();
            reseeded |= c.ema_update(&v, &a, 0.9, 1e-3, &mut rng).unwrap().reseeded.contains(&2);
        }
        assert!(reseeded);
        assert!(c.entries().is_finite());
    }

    #[test]
    fn perplexity_extremes() {
        let uniform: Vec<CodeSequence> = (0..8).map(|i| CodeSequence::new((i * 8..i * 8 + 8).collect())).collect();
        let s = codebook_stats(&uniform, 64).unwrap();
        assert!((s.perplexity - 64.0).abs() < 1e-9);
        assert_eq!(s.dead, 0);
        let single = codebook_stats(&[CodeSequence::new(vec![5; 10])], 64).unwrap();
        assert_eq!(single.perplexity, 1.0);
        assert_eq!(single.dead, 63);
        assert!(codebook_stats(&[], 64).is_err());
    }

    #[test]
    fn gather_rejects_out_of_range_codes() {
        let c = cb(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(c.gather(&[0, 2]).is_err());
    }

    #[test]
    fn code_text_round_trip() {
        let s = CodeSequence::new(vec![3, 0, 63]);
        assert_eq!(CodeSequence::parse(&s.to_text()).unwrap(), s);
        assert!(CodeSequence::parse("1 x").is_err());
    }
}
