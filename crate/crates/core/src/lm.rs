//! Multimodal language model over a unified text + visual-code vocabulary.
//!
//! A small decoder-only LM is pretrained on captions and frozen. Multimodal
//! training then adapts it with low-rank adapters on the attention query and
//! value projections plus a fully-connected projection that maps codebook
//! entries into the word-embedding space.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbones::FrozenBundle;
use crate::checkpoint;
use crate::config::{Config, LmConfig, VisualInput};
use crate::data::{ImageSample, SceneSpec, TextVocab};
use crate::error::{config_err, input_err, Result};
use crate::eval::{caption_attribute_accuracy, inverse_render, AttributeHits, ConsistencyReport};
use crate::nn::{init_lora, init_stack, layer_norm, linear, transformer_stack, AttentionMask, LoraSpec, MaskKind, StackConfig};
use crate::params::{Adam, ParamStore};
use crate::qformer::QFormer;
use crate::revq::detokenize_batch;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::train::{shuffled_batches, EpochRecord};
use crate::vq::{tokenize_batch, CodeSequence, VqModel};

pub const PHOTO_PREFIX: [&str; 3] = ["a", "photo", "of"];
pub const GENERATE_PREFIX: [&str; 3] = ["generate", "an", "image"];

const SPECIALS: usize = 5;

/// Text ids `[0, V_t)`, visual codes `[V_t, V_t + K)`, then BOS, EOS, BOI, EOI, PAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub text: usize,
    pub codes: usize,
}

pub fn build_unified_vocab(text: usize, codes: usize) -> Result<UnifiedVocab> {
    if text == 0 || codes == 0 {
        return Err(config_err("build_unified_vocab", format!("text size {text} and code count {codes} must be ≥ 1")));
    }
    Ok(UnifiedVocab { text, codes })
}

impl UnifiedVocab {
    pub fn len(&self) -> usize {
        self.text + self.codes + SPECIALS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn special(&self, i: usize) -> usize {
        self.text + self.codes + i
    }

    pub fn bos(&self) -> usize {
        self.special(0)
    }

    pub fn eos(&self) -> usize {
        self.special(1)
    }

    pub fn boi(&self) -> usize {
        self.special(2)
    }

    pub fn eoi(&self) -> usize {
        self.special(3)
    }

    pub fn pad(&self) -> usize {
        self.special(4)
    }

    pub fn code_token(&self, code: usize) -> Result<usize> {
        if code >= self.codes {
            return Err(input_err("code_token", format!("code {code} outside codebook of {}", self.codes)));
        }
        Ok(self.text + code)
    }

    pub fn token_code(&self, id: usize) -> Option<usize> {
        self.is_code(id).then(|| id - self.text)
    }

    pub fn is_text(&self, id: usize) -> bool {
        id < self.text
    }

    pub fn is_code(&self, id: usize) -> bool {
        (self.text..self.text + self.codes).contains(&id)
    }

    /// Row of the input embedding table for a text or special id.
    fn table_row(&self, id: usize) -> Option<usize> {
        if self.is_text(id) {
            Some(id)
        } else if id >= self.text + self.codes && id < self.len() {
            Some(id - self.codes)
        } else {
            None
        }
    }

    fn table_rows(&self) -> usize {
        self.text + SPECIALS
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Token ids with the positions that carry next-token loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Composed {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

fn prefix_ids(words: &[&str], text: &TextVocab) -> Vec<usize> {
    words.iter().map(|w| text.id(w)).collect()
}

/// Lays out one training sequence.
///
/// Image-to-text: `[BOS][BOI] codes [EOI] a photo of caption [EOS]`, loss on caption and `[EOS]`.
/// Text-to-image: `[BOS] generate an image caption [BOI] codes [EOI]`, loss on codes and `[EOI]`.
pub fn compose_sequence(
    vocab: &UnifiedVocab,
    text: &TextVocab,
    direction: Direction,
    codes: &CodeSequence,
    queries: usize,
    caption: &[usize],
) -> Result<Composed> {
    if codes.indices.len() != queries {
        return Err(input_err("compose_sequence", format!("{} codes, expected {queries}", codes.indices.len())));
    }
    if let Some(&bad) = caption.iter().find(|&&c| !vocab.is_text(c)) {
        return Err(input_err("compose_sequence", format!("caption id {bad} is not a text token")));
    }
    let visual: Vec<usize> = codes.indices.iter().map(|&c| vocab.code_token(c)).collect::<Result<_>>()?;
    let mut out = Composed { ids: Vec::new(), loss_mask: Vec::new() };
    let mut push = |ids: &[usize], loss: bool| {
        out.ids.extend_from_slice(ids);
        out.loss_mask.extend(std::iter::repeat_n(loss, ids.len()));
    };
    match direction {
        Direction::ImageToText => {
            push(&[vocab.bos(), vocab.boi()], false);
            push(&visual, false);
            push(&[vocab.eoi()], false);
            push(&prefix_ids(&PHOTO_PREFIX, text), false);
            push(caption, true);
            push(&[vocab.eos()], true);
        }
        Direction::TextToImage => {
            push(&[vocab.bos()], false);
            push(&prefix_ids(&GENERATE_PREFIX, text), false);
            push(caption, false);
            push(&[vocab.boi()], false);
            push(&visual, true);
            push(&[vocab.eoi()], true);
        }
    }
    Ok(out)
}

fn stack(cfg: &LmConfig) -> StackConfig {
    StackConfig::new(cfg.depth, cfg.width, cfg.heads, None)
}

pub fn lora_spec(cfg: &LmConfig) -> LoraSpec {
    LoraSpec { prefix: "lora".into(), rank: cfg.lora_rank, alpha: cfg.lora_alpha }
}

/// Base LM parameters under `lm.*`.
pub fn init_lm(cfg: &LmConfig, vocab: &UnifiedVocab, rng: &mut Rng) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    s.init_normal("lm.tok", &[vocab.table_rows(), cfg.width], 0.5, rng);
    s.init_normal("lm.pos", &[cfg.context, cfg.width], 0.1, rng);
    init_stack(&mut s, "lm", &stack(cfg), rng)?;
    s.init_layer_norm("lm.ln_f", cfg.width);
    s.init_linear("lm.head", cfg.width, vocab.len(), 1.0, rng);
    Ok(s)
}

/// Adapter parameters under `lora.*` and `proj.*`.
pub fn init_adapters(cfg: &LmConfig, vocab: &UnifiedVocab, code_width: usize, rng: &mut Rng) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    init_lora(&mut s, &lora_spec(cfg), &stack(cfg), rng)?;
    s.init_linear("proj", code_width, cfg.width, 1.0, rng);
    if cfg.visual_input == VisualInput::LearnedEmbedding {
        s.init_normal("proj.codes", &[vocab.codes, code_width], 1.0, rng);
    }
    if cfg.train_visual_head {
        s.insert("proj.head.w", Tensor::zeros(&[cfg.width, vocab.len()]));
    }
    Ok(s)
}

/// Input embeddings `[n, d]` for a flat id list.
///
/// Text and special ids read the `lm.tok` table; visual ids go through the
/// `proj` layer applied to their codebook entry (detached) or, when
/// `proj.codes` exists, to a learned per-code vector.
pub fn embed_tokens<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    vocab: &UnifiedVocab,
    entries: Var,
    ids: &[usize],
) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab.len()) {
        return Err(input_err("embed_tokens", format!("id {bad} outside vocabulary of {}", vocab.len())));
    }
    let rows: Vec<usize> = ids.iter().map(|&i| vocab.table_row(i).unwrap_or(0)).collect();
    let table = g.param(s, "lm.tok")?;
    let base = g.embedding(table, &rows)?;
    let positions: Vec<usize> = (0..ids.len()).filter(|&p| vocab.is_code(ids[p])).collect();
    if positions.is_empty() {
        return Ok(base);
    }
    let codes: Vec<usize> = positions.iter().map(|&p| ids[p] - vocab.text).collect();
    let source = if s.contains("proj.codes") {
        g.param(s, "proj.codes")?
    } else {
        g.detach(entries)
    };
    if g.value(source).rows() != vocab.codes {
        return Err(input_err("embed_tokens", format!("{} code vectors for {} codes", g.value(source).rows(), vocab.codes)));
    }
    let picked = g.select_rows(source, &codes)?;
    let projected = linear(g, s, "proj", picked)?;
    g.merge_rows(base, projected, &positions)
}

/// Logits `[B·L, |vocab|]` from embeddings `[B·L, d]` under a causal mask.
pub fn lm_forward<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &LmConfig,
    vocab: &UnifiedVocab,
    emb: Var,
    batch: usize,
    lora: Option<&LoraSpec>,
) -> Result<Var> {
    let rows = g.value(emb).rows();
    if batch == 0 || !rows.is_multiple_of(batch) {
        return Err(input_err("lm_forward", format!("{rows} embedding rows for batch {batch}")));
    }
    let len = rows / batch;
    if len == 0 || len > cfg.context {
        return Err(input_err("lm_forward", format!("sequence length {len} exceeds context {}", cfg.context)));
    }
    let pos = g.param(s, "lm.pos")?;
    let pos = g.select_rows(pos, &(0..len).collect::<Vec<_>>())?;
    let pos = g.repeat_rows(pos, batch);
    let x = g.add(emb, pos)?;
    let mask = AttentionMask::build(len, len, MaskKind::Causal)?;
    let h = transformer_stack(g, s, "lm", &stack(cfg), x, batch, &mask, None, lora)?;
    let h = layer_norm(g, s, "lm.ln_f", h)?;
    let logits = linear(g, s, "lm.head", h)?;
    if !s.contains("proj.head.w") {
        return Ok(logits);
    }
    let w = g.param(s, "proj.head.w")?;
    let v = vocab.len();
    let keep = Tensor::from_fn(&[cfg.width, v], |i| if vocab.is_code(i % v) { T::one() } else { T::zero() });
    let keep = g.constant(keep);
    let w = g.mul(w, keep)?;
    let delta = g.matmul(h, w)?;
    g.add(logits, delta)
}

/// Padded batch: ids, next-token targets and loss weights, all `B·L` long.
struct Batch {
    ids: Vec<usize>,
    targets: Vec<usize>,
    weights: Vec<f32>,
    count: usize,
}

fn pad_batch(seqs: &[&Composed], pad: usize) -> Batch {
    let len = seqs.iter().map(|c| c.ids.len()).max().unwrap_or(0);
    let mut b = Batch { ids: Vec::new(), targets: Vec::new(), weights: Vec::new(), count: seqs.len() };
    for c in seqs {
        for t in 0..len {
            b.ids.push(c.ids.get(t).copied().unwrap_or(pad));
            match (c.ids.get(t + 1), c.loss_mask.get(t + 1)) {
                (Some(&next), Some(&on)) => {
                    b.targets.push(next);
                    b.weights.push(if on { 1.0 } else { 0.0 });
                }
                _ => {
                    b.targets.push(pad);
                    b.weights.push(0.0);
                }
            }
        }
    }
    b
}

/// Frozen base LM.
#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub params: ParamStore<f32>,
    pub cfg: LmConfig,
    pub vocab: UnifiedVocab,
}

impl LanguageModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)
    }

    pub fn load(path: &Path, cfg: &Config, text: &TextVocab) -> Result<Self> {
        let mut params = checkpoint::load(path, "lm.*")?;
        params.freeze_all();
        let vocab = build_unified_vocab(text.len(), cfg.vq.codebook_size)?;
        Ok(Self { params, cfg: cfg.lm.clone(), vocab })
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    /// Constrained greedy continuation of `[BOS] prompt`: text words until `[EOS]`.
    pub fn continue_text(&self, text: &TextVocab, prompt: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        let mut prefix = vec![self.vocab.bos()];
        prefix.extend_from_slice(prompt);
        let entries = Tensor::zeros(&[self.vocab.codes, 1]);
        let dec = Decoder { store: &self.params, cfg: &self.cfg, vocab: &self.vocab, lora: None, entries: &entries };
        let allowed = text_candidates(&self.vocab, text);
        let out = dec.run(vec![prefix], max_tokens, &allowed, Some(self.vocab.eos()), DecodeMode::Greedy, &mut Rng::new(0))?;
        Ok(out.into_iter().next().unwrap_or_default().into_iter().filter(|&i| self.vocab.is_text(i)).collect())
    }

    /// Mean next-token cross-entropy (nats) over the loss-masked positions.
    pub fn mean_nll(&self, seqs: &[Composed]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0.0;
        for chunk in seqs.chunks(64) {
            let refs: Vec<&Composed> = chunk.iter().collect();
            let b = pad_batch(&refs, self.vocab.pad());
            let mut g = Graph::new();
            let dummy = g.constant(Tensor::zeros(&[self.vocab.codes, 1]));
            let emb = embed_tokens(&mut g, &self.params, &self.vocab, dummy, &b.ids)?;
            let logits = lm_forward(&mut g, &self.params, &self.cfg, &self.vocab, emb, b.count, None)?;
            let loss = g.cross_entropy(logits, &b.targets, Some(&b.weights))?;
            let w: f64 = b.weights.iter().map(|&w| w as f64).sum();
            total += g.value(loss).item() as f64 * w;
            count += w;
        }
        Ok(if count > 0.0 { total / count } else { 0.0 })
    }
}

/// `[BOS] caption [EOS]` with loss on every token after `[BOS]`.
pub fn caption_sequence(vocab: &UnifiedVocab, prefix: &[usize], caption: &[usize]) -> Composed {
    let mut ids = vec![vocab.bos()];
    ids.extend_from_slice(prefix);
    ids.extend_from_slice(caption);
    ids.push(vocab.eos());
    let mut loss_mask = vec![true; ids.len()];
    loss_mask[0] = false;
    Composed { ids, loss_mask }
}

/// Held-out caption perplexity, `exp` of the mean per-token negative log-likelihood.
pub fn caption_perplexity(lm: &LanguageModel, captions: &[Vec<usize>]) -> Result<f64> {
    let seqs: Vec<Composed> = captions.iter().map(|c| caption_sequence(&lm.vocab, &[], c)).collect();
    Ok(lm.mean_nll(&seqs)?.exp())
}

/// Next-token pretraining of the toy base LM on captions; frozen on return.
pub fn pretrain_toy_lm(
    captions: &[Vec<usize>],
    heldout: &[Vec<usize>],
    text: &TextVocab,
    cfg: &Config,
    rng: &mut Rng,
) -> Result<(LanguageModel, Vec<EpochRecord>)> {
    if captions.is_empty() {
        return Err(input_err("pretrain_toy_lm", "empty caption corpus"));
    }
    let vocab = build_unified_vocab(text.len(), cfg.vq.codebook_size)?;
    let mut params = init_lm(&cfg.lm, &vocab, rng)?;
    let corpus: Vec<Composed> = captions.iter().map(|c| caption_sequence(&vocab, &[], c)).collect();
    let o = &cfg.train.lm_pretrain;
    let mut opt = Adam::new(o.lr).with_clip(o.clip_norm);
    let mut trace = Vec::new();
    let mut lm = LanguageModel { params: ParamStore::new(), cfg: cfg.lm.clone(), vocab };
    for epoch in 0..o.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(corpus.len(), o.batch_size, rng);
        for batch in &batches {
            let refs: Vec<&Composed> = batch.iter().map(|&i| &corpus[i]).collect();
            let b = pad_batch(&refs, vocab.pad());
            let mut g = Graph::new();
            let dummy = g.constant(Tensor::zeros(&[vocab.codes, 1]));
            let emb = embed_tokens(&mut g, &params, &vocab, dummy, &b.ids)?;
            let logits = lm_forward(&mut g, &params, &cfg.lm, &vocab, emb, b.count, None)?;
            let loss = g.cross_entropy(logits, &b.targets, Some(&b.weights))?;
            total += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            opt.step(&mut params, &g.param_grads(&grads))?;
        }
        lm.params = params.clone();
        let ppl = if heldout.is_empty() { None } else { Some(caption_perplexity(&lm, heldout)?) };
        trace.push(EpochRecord::log("lm-pretrain", epoch, total / batches.len() as f64, ppl));
    }
    params.freeze_all();
    lm.params = params;
    Ok((lm, trace))
}

/// Frozen tokenizer pieces needed to move between images and codes.
#[derive(Clone, Copy)]
pub struct VisualTokenizer<'a> {
    pub bundle: &'a FrozenBundle,
    pub qformer: &'a QFormer,
    pub vq: &'a VqModel,
}

impl VisualTokenizer<'_> {
    pub fn tokenize(&self, images: &[&Tensor<f32>]) -> Result<Vec<CodeSequence>> {
        tokenize_batch(images, self.bundle, self.qformer, &self.vq.codebook)
    }

    pub fn detokenize(&self, seqs: &[CodeSequence]) -> Result<Vec<Tensor<f32>>> {
        detokenize_batch(seqs, &self.vq.codebook, &self.vq.params, &self.vq.dims, self.bundle)
    }

    pub fn queries(&self) -> usize {
        self.qformer.cfg.queries
    }
}

/// Base LM plus trained adapters.
#[derive(Clone, Debug)]
pub struct MultimodalModel {
    pub base: LanguageModel,
    /// `lora.*` and `proj.*`.
    pub adapters: ParamStore<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
}

impl MultimodalModel {
    /// Adapters at initialisation: zero `B` matrices, so the base LM is unchanged.
    pub fn new(base: LanguageModel, code_width: usize, rng: &mut Rng) -> Result<Self> {
        let adapters = init_adapters(&base.cfg, &base.vocab, code_width, rng)?;
        Ok(Self { base, adapters })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.adapters)
    }

    pub fn load(path: &Path, base: LanguageModel) -> Result<Self> {
        let mut lora = checkpoint::load(path, "lora.*")?;
        lora.merge(checkpoint::load(path, "proj.*")?);
        lora.freeze_all();
        Ok(Self { base, adapters: lora })
    }

    fn store(&self) -> ParamStore<f32> {
        let mut s = self.base.params.clone();
        s.merge(self.adapters.clone());
        s
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        entries: &Tensor<f32>,
        prefixes: Vec<Vec<usize>>,
        steps: usize,
        allowed: &[usize],
        stop: Option<usize>,
        mode: DecodeMode,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<usize>>> {
        let spec = lora_spec(&self.base.cfg);
        let model = Decoder { store: &self.store(), cfg: &self.base.cfg, vocab: &self.base.vocab, lora: Some(&spec), entries };
        model.run(prefixes, steps, allowed, stop, mode, rng)
    }

    /// Greedy captions for code sequences, prompted with "a photo of".
    pub fn caption_codes(&self, text: &TextVocab, entries: &Tensor<f32>, seqs: &[CodeSequence]) -> Result<Vec<String>> {
        let v = &self.base.vocab;
        let mut prefixes = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut p = vec![v.bos(), v.boi()];
            for &c in &s.indices {
                p.push(v.code_token(c)?);
            }
            p.push(v.eoi());
            p.extend(prefix_ids(&PHOTO_PREFIX, text));
            prefixes.push(p);
        }
        let allowed = text_candidates(v, text);
        let mut rng = Rng::new(0);
        let mut captions = Vec::with_capacity(seqs.len());
        for chunk in prefixes.chunks(128) {
            let out = self.decode(
                entries,
                chunk.to_vec(),
                self.base.cfg.max_caption_tokens,
                &allowed,
                Some(v.eos()),
                DecodeMode::Greedy,
                &mut rng,
            )?;
            for ids in out {
                let words: Vec<usize> = ids.into_iter().filter(|&i| v.is_text(i)).collect();
                captions.push(text.decode(&words));
            }
        }
        Ok(captions)
    }

    /// Exactly `N_q` visual codes per caption, prompted with "generate an image".
    pub fn imagine_codes(
        &self,
        text: &TextVocab,
        entries: &Tensor<f32>,
        captions: &[Vec<usize>],
        queries: usize,
        mode: DecodeMode,
        rng: &mut Rng,
    ) -> Result<Vec<CodeSequence>> {
        let v = &self.base.vocab;
        if let Some(bad) = captions.iter().flatten().find(|&&c| !v.is_text(c)) {
            return Err(input_err("generate_image", format!("caption id {bad} is not a text token")));
        }
        let allowed: Vec<usize> = (v.text..v.text + v.codes).collect();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in captions.iter().enumerate() {
            groups.entry(c.len()).or_default().push(i);
        }
        let mut result = vec![CodeSequence::new(Vec::new()); captions.len()];
        for members in groups.values() {
            for chunk in members.chunks(128) {
                let prefixes: Vec<Vec<usize>> = chunk
                    .iter()
                    .map(|&i| {
                        let mut p = vec![v.bos()];
                        p.extend(prefix_ids(&GENERATE_PREFIX, text));
                        p.extend_from_slice(&captions[i]);
                        p.push(v.boi());
                        p
                    })
                    .collect();
                if prefixes[0].len() + queries > self.base.cfg.context {
                    return Err(input_err("generate_image", format!("caption of {} tokens overflows the context", captions[chunk[0]].len())));
                }
                let out = self.decode(entries, prefixes, queries, &allowed, None, mode, rng)?;
                for (&i, ids) in chunk.iter().zip(out) {
                    result[i] = CodeSequence::new(ids.iter().filter_map(|&t| v.token_code(t)).collect());
                }
            }
        }
        Ok(result)
    }
}

/// Everything needed to extend prefixes token by token.
struct Decoder<'a> {
    store: &'a ParamStore<f32>,
    cfg: &'a LmConfig,
    vocab: &'a UnifiedVocab,
    lora: Option<&'a LoraSpec>,
    entries: &'a Tensor<f32>,
}

impl Decoder<'_> {
    /// Logits of the last position of each of `prefixes` (equal lengths).
    fn last_logits(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        let len = prefixes[0].len();
        let ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let e = g.constant(self.entries.clone());
        let emb = embed_tokens(&mut g, self.store, self.vocab, e, &ids)?;
        let logits = lm_forward(&mut g, self.store, self.cfg, self.vocab, emb, prefixes.len(), self.lora)?;
        let t = g.value(logits);
        Ok((0..prefixes.len()).map(|b| t.row(b * len + len - 1).to_vec()).collect())
    }

    /// Extends equal-length prefixes for up to `steps` tokens drawn from `allowed`,
    /// stopping a row once it emits `stop`.
    fn run(
        &self,
        prefixes: Vec<Vec<usize>>,
        steps: usize,
        allowed: &[usize],
        stop: Option<usize>,
        mode: DecodeMode,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<usize>>> {
        if allowed.is_empty() || prefixes.iter().any(|p| p.len() != prefixes[0].len()) {
            return Err(input_err("decode", "prefixes must share a length and candidates must be non-empty"));
        }
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); prefixes.len()];
        let mut seqs = prefixes;
        let mut done = vec![false; seqs.len()];
        for _ in 0..steps {
            if seqs.is_empty() || done.iter().all(|&d| d) || seqs[0].len() >= self.cfg.context {
                break;
            }
            let logits = self.last_logits(&seqs)?;
            for (b, row) in logits.iter().enumerate() {
                let next = if done[b] { self.vocab.pad() } else { pick(row, allowed, mode, rng) };
                seqs[b].push(next);
                if !done[b] {
                    out[b].push(next);
                    done[b] = Some(next) == stop;
                }
            }
        }
        Ok(out)
    }
}

fn text_candidates(vocab: &UnifiedVocab, text: &TextVocab) -> Vec<usize> {
    let mut c: Vec<usize> = (0..vocab.text).filter(|&i| !text.is_special(i)).collect();
    c.push(vocab.eos());
    c
}

fn pick(logits: &[f32], allowed: &[usize], mode: DecodeMode, rng: &mut Rng) -> usize {
    match mode {
        DecodeMode::Greedy => {
            let mut best = allowed[0];
            for &i in allowed {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            best
        }
        DecodeMode::Sample { temperature } => {
            let t = temperature.max(1e-6);
            let m = allowed.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = allowed.iter().map(|&i| ((logits[i] as f64 - m) / t).exp()).collect();
            let mut u = rng.uniform() * w.iter().sum::<f64>();
            for (&i, &wi) in allowed.iter().zip(&w) {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            *allowed.last().expect("non-empty candidates")
        }
    }
}

/// Tokenize an image and caption it.
pub fn generate_caption(model: &MultimodalModel, tok: &VisualTokenizer, text: &TextVocab, image: &Tensor<f32>) -> Result<String> {
    let seqs = tok.tokenize(&[image])?;
    Ok(model.caption_codes(text, tok.vq.codebook.entries(), &seqs)?.remove(0))
}

/// Generate codes for a caption and render them through the tokenizer's decoder.
pub fn generate_image(
    model: &MultimodalModel,
    tok: &VisualTokenizer,
    text: &TextVocab,
    caption: &[usize],
    mode: DecodeMode,
    rng: &mut Rng,
) -> Result<(CodeSequence, Tensor<f32>)> {
    let seqs = model.imagine_codes(text, tok.vq.codebook.entries(), &[caption.to_vec()], tok.queries(), mode, rng)?;
    let image = tok.detokenize(&seqs)?.remove(0);
    Ok((seqs.into_iter().next().expect("one sequence"), image))
}

/// Image-to-text attribute accuracy over held-out samples.
pub fn caption_report(model: &MultimodalModel, tok: &VisualTokenizer, text: &TextVocab, samples: &[ImageSample]) -> Result<ConsistencyReport> {
    let images: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.image).collect();
    let seqs = tok.tokenize(&images)?;
    let caps = model.caption_codes(text, tok.vq.codebook.entries(), &seqs)?;
    let hits: Vec<AttributeHits> = caps.iter().zip(samples).map(|(c, s)| caption_attribute_accuracy(c, &s.spec)).collect();
    Ok(ConsistencyReport::from_hits(&hits))
}

/// Semantic consistency of greedy text-to-image generations.
pub fn imagine_report(model: &MultimodalModel, tok: &VisualTokenizer, text: &TextVocab, specs: &[SceneSpec]) -> Result<ConsistencyReport> {
    let caps: Vec<Vec<usize>> = specs.iter().map(|s| text.encode(&s.caption())).collect();
    let mut rng = Rng::new(0);
    let seqs = model.imagine_codes(text, tok.vq.codebook.entries(), &caps, tok.queries(), DecodeMode::Greedy, &mut rng)?;
    let images = tok.detokenize(&seqs)?;
    let hits: Vec<AttributeHits> =
        images.iter().zip(specs).map(|(im, s)| AttributeHits::compare(&inverse_render(im), s)).collect();
    Ok(ConsistencyReport::from_hits(&hits))
}

/// Teacher-forced top-1 accuracy of the visual-code predictions of text-to-image sequences.
pub fn next_code_accuracy(model: &MultimodalModel, entries: &Tensor<f32>, seqs: &[Composed]) -> Result<f64> {
    let store = model.store();
    let v = &model.base.vocab;
    let spec = lora_spec(&model.base.cfg);
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in seqs.chunks(64) {
        let refs: Vec<&Composed> = chunk.iter().collect();
        let b = pad_batch(&refs, v.pad());
        let mut g = Graph::new();
        let e = g.constant(entries.clone());
        let emb = embed_tokens(&mut g, &store, v, e, &b.ids)?;
        let logits = lm_forward(&mut g, &store, &model.base.cfg, v, emb, b.count, Some(&spec))?;
        let t = g.value(logits);
        for (r, (&target, &w)) in b.targets.iter().zip(&b.weights).enumerate() {
            if w == 0.0 || !v.is_code(target) {
                continue;
            }
            let row = t.row(r);
            let best = (v.text..v.text + v.codes).fold(v.text, |a, i| if row[i] > row[a] { i } else { a });
            hit += (best == target) as usize;
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Both directions for each sample.
pub fn compose_pairs(
    vocab: &UnifiedVocab,
    text: &TextVocab,
    seqs: &[CodeSequence],
    samples: &[ImageSample],
    queries: usize,
) -> Result<(Vec<Composed>, Vec<Composed>)> {
    let mut i2t = Vec::with_capacity(samples.len());
    let mut t2i = Vec::with_capacity(samples.len());
    for (codes, s) in seqs.iter().zip(samples) {
        i2t.push(compose_sequence(vocab, text, Direction::ImageToText, codes, queries, &s.caption_ids)?);
        t2i.push(compose_sequence(vocab, text, Direction::TextToImage, codes, queries, &s.caption_ids)?);
    }
    Ok((i2t, t2i))
}

/// Trains adapters and the visual projection against the frozen base LM and tokenizer.
///
/// After `warmup_epochs` of image-to-text only, every batch holds both
/// directions of the same samples, so the mix is exactly half and half.
pub fn train_multimodal(
    train: &[ImageSample],
    heldout: &[ImageSample],
    tok: &VisualTokenizer,
    base: &LanguageModel,
    text: &TextVocab,
    cfg: &Config,
    rng: &mut Rng,
) -> Result<(MultimodalModel, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(input_err("train_multimodal", "empty dataset"));
    }
    let vocab = base.vocab;
    let queries = tok.queries();
    let entries = tok.vq.codebook.entries().clone();
    let images: Vec<&Tensor<f32>> = train.iter().map(|s| &s.image).collect();
    let codes = tok.tokenize(&images)?;
    let (i2t, t2i) = compose_pairs(&vocab, text, &codes, train, queries)?;
    let held_t2i = if heldout.is_empty() {
        Vec::new()
    } else {
        let imgs: Vec<&Tensor<f32>> = heldout.iter().map(|s| &s.image).collect();
        compose_pairs(&vocab, text, &tok.tokenize(&imgs)?, heldout, queries)?.1
    };
    let mut model = MultimodalModel::new(base.clone(), entries.cols(), rng)?;
    let mut store = model.store();
    let spec = lora_spec(&cfg.lm);
    let o = &cfg.train.multimodal;
    let mut opt = Adam::new(o.lr).with_clip(o.clip_norm);
    let half = (o.batch_size / 2).max(1);
    let mut trace = Vec::new();
    for epoch in 0..o.epochs {
        let joint = epoch >= cfg.lm.warmup_epochs;
        let per_batch = if joint { half } else { o.batch_size.max(1) };
        let batches = shuffled_batches(train.len(), per_batch, rng);
        let mut total = 0.0;
        for batch in &batches {
            let mut refs: Vec<&Composed> = batch.iter().map(|&i| &i2t[i]).collect();
            if joint {
                refs.extend(batch.iter().map(|&i| &t2i[i]));
            }
            let b = pad_batch(&refs, vocab.pad());
            let mut g = Graph::new();
            let e = g.constant(entries.clone());
            let emb = embed_tokens(&mut g, &store, &vocab, e, &b.ids)?;
            let logits = lm_forward(&mut g, &store, &cfg.lm, &vocab, emb, b.count, Some(&spec))?;
            let loss = g.cross_entropy(logits, &b.targets, Some(&b.weights))?;
            total += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            opt.step(&mut store, &g.param_grads(&grads))?;
        }
        model.adapters = adapters_of(&store);
        let metric = if held_t2i.is_empty() { None } else { Some(next_code_accuracy(&model, &entries, &held_t2i)?) };
        trace.push(EpochRecord::log("multimodal", epoch, total / batches.len() as f64, metric));
    }
    model.adapters = adapters_of(&store);
    model.adapters.freeze_all();
    if store.subset("lm.").digest() != base.params.digest() {
        return Err(config_err("train_multimodal", "base LM parameters changed during adapter training"));
    }
    Ok((model, trace))
}

fn adapters_of(store: &ParamStore<f32>) -> ParamStore<f32> {
    let mut a = store.subset("lora.");
    a.merge(store.subset("proj"));
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> LmConfig {
        LmConfig { width: 8, depth: 2, heads: 2, context: 24, ..LmConfig::default() }
    }

    #[test]
    fn vocab_layout() {
        let v = build_unified_vocab(30, 64).unwrap();
        assert_eq!(v.len(), 99);
        assert_eq!(v.code_token(0).unwrap(), 30);
        assert_eq!(v.code_token(63).unwrap(), 93);
        assert!(v.code_token(64).is_err());
        let specials = [v.bos(), v.eos(), v.boi(), v.eoi(), v.pad()];
        assert_eq!(specials, [94, 95, 96, 97, 98]);
        assert!(build_unified_vocab(0, 4).is_err());
    }

    #[test]
    fn sequence_lengths_and_masks() {
        let text = TextVocab::new();
        let v = build_unified_vocab(text.len(), 16).unwrap();
        let codes = CodeSequence::new(vec![1, 2, 3, 4]);
        let cap: Vec<usize> = text.encode("a large red circle in the top left");
        let a = compose_sequence(&v, &text, Direction::ImageToText, &codes, 4, &cap).unwrap();
        assert_eq!(a.ids.len(), 19);
        assert_eq!(a.loss_mask.iter().filter(|&&m| m).count(), 9);
        let b = compose_sequence(&v, &text, Direction::TextToImage, &codes, 4, &cap).unwrap();
        assert_eq!(b.loss_mask.iter().filter(|&&m| m).count(), 5);
        assert!(compose_sequence(&v, &text, Direction::TextToImage, &codes, 5, &cap).is_err());
    }

    #[test]
    fn zero_projection_gives_zero_visual_embeddings() {
        let text = TextVocab::new();
        let cfg = tiny_cfg();
        let v = build_unified_vocab(text.len(), 6).unwrap();
        let mut rng = Rng::new(3);
        let mut s = init_lm(&cfg, &v, &mut rng).unwrap();
        s.merge(init_adapters(&cfg, &v, 5, &mut rng).unwrap());
        for n in ["proj.w", "proj.b"] {
            let t = s.get_mut(n).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new();
        let e = g.constant(Tensor::full(&[6, 5], 1.0f32));
        let ids = [v.bos(), v.code_token(2).unwrap(), 5];
        let emb = embed_tokens(&mut g, &s, &v, e, &ids).unwrap();
        assert!(g.value(emb).row(1).iter().all(|&x| x == 0.0));
        assert!(g.value(emb).row(2).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn overlength_is_rejected() {
        let cfg = tiny_cfg();
        let v = build_unified_vocab(10, 4).unwrap();
        let s = init_lm(&cfg, &v, &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let emb = g.constant(Tensor::zeros(&[cfg.context + 1, cfg.width]));
        assert!(lm_forward(&mut g, &s, &cfg, &v, emb, 1, None).is_err());
    }

    #[test]
    fn sampling_respects_candidates() {
        let logits = [5.0f32, 0.0, 1.0, 9.0];
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let p = pick(&logits, &[1, 2], DecodeMode::Sample { temperature: 1.0 }, &mut rng);
            assert!(p == 1 || p == 2);
        }
        assert_eq!(pick(&logits, &[0, 1, 2], DecodeMode::Greedy, &mut rng), 0);
    }
}
