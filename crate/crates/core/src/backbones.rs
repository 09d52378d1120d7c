//! Frozen perception and generation backbones: a patch ViT, a contrastive
//! caption encoder, a generation-space caption encoder, and the conditional
//! image decoder. Pretrained once, then frozen for every later stage.

use std::collections::BTreeSet;
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::config::{Config, GenerationConfig, OptimConfig, TextEncoderConfig, VitConfig};
use crate::contrastive::contrastive_loss;
use crate::data::{render_scene, ImageSample, SceneSpec, TextVocab, CHANNELS, IMAGE_LEN, IMAGE_SIDE};
use crate::error::{config_err, input_err, Result};
use crate::nn::{init_stack, layer_norm, linear, transformer_stack, AttentionMask, MaskKind, StackConfig, LN_EPS};
use crate::params::{Adam, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::train::{distinct_batches, shuffled_batches, EpochRecord};

/// Longest caption the text encoders accept.
pub const MAX_TEXT_LEN: usize = 16;

/// Splits a 3×H×W image into non-overlapping `patch`×`patch` tiles in raster
/// order; each row is one tile flattened channel-major.
pub fn patchify(image: &Tensor<f32>, patch: usize) -> Result<Vec<f32>> {
    if image.shape() != [CHANNELS, IMAGE_SIDE, IMAGE_SIDE] {
        return Err(input_err("vit_encode", format!("image shape {:?}, expected [3, 32, 32]", image.shape())));
    }
    if patch == 0 || !IMAGE_SIDE.is_multiple_of(patch) {
        return Err(config_err("vit_encode", format!("patch {patch} does not tile the image")));
    }
    let grid = IMAGE_SIDE / patch;
    let src = image.data();
    let mut out = Vec::with_capacity(IMAGE_LEN);
    for p in 0..grid * grid {
        let (gy, gx) = (p / grid, p % grid);
        for c in 0..CHANNELS {
            for y in 0..patch {
                let row = c * IMAGE_SIDE * IMAGE_SIDE + (gy * patch + y) * IMAGE_SIDE + gx * patch;
                out.extend_from_slice(&src[row..row + patch]);
            }
        }
    }
    Ok(out)
}

fn vit_stack(cfg: &VitConfig) -> StackConfig {
    StackConfig::new(cfg.depth, cfg.width, cfg.heads, None)
}

fn text_stack(cfg: &TextEncoderConfig) -> StackConfig {
    StackConfig::new(cfg.depth, cfg.width, cfg.heads, None)
}

fn gen_stack(cfg: &GenerationConfig) -> StackConfig {
    StackConfig::new(cfg.depth, cfg.width, cfg.heads, Some(cfg.width))
}

fn vit_tokens(cfg: &VitConfig) -> usize {
    (IMAGE_SIDE / cfg.patch).pow(2)
}

pub fn init_backbones(cfg: &Config, vocab_len: usize, rng: &mut Rng) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    let (v, t, gcfg) = (&cfg.vit, &cfg.text, &cfg.generation);
    let patch_len = CHANNELS * v.patch * v.patch;
    s.init_linear("vit.patch", patch_len, v.width, 1.0, rng);
    s.init_normal("vit.pos", &[vit_tokens(v), v.width], 0.1, rng);
    init_stack(&mut s, "vit", &vit_stack(v), rng)?;
    s.init_layer_norm("vit.ln_f", v.width);
    s.init_linear("vit.proj", v.width, t.embed_dim, 1.0, rng);

    s.init_normal("txt.tok", &[vocab_len, t.width], 1.0, rng);
    s.init_normal("txt.pos", &[MAX_TEXT_LEN, t.width], 0.1, rng);
    init_stack(&mut s, "txt", &text_stack(t), rng)?;
    s.init_layer_norm("txt.ln_f", t.width);
    s.init_linear("txt.proj", t.width, t.embed_dim, 1.0, rng);

    s.init_normal("gen_txt.tok", &[vocab_len, gcfg.width], 1.0, rng);
    s.init_normal("gen_txt.pos", &[MAX_TEXT_LEN, gcfg.width], 0.1, rng);
    s.init_normal("gen_txt.queries", &[gcfg.tokens, gcfg.width], 1.0, rng);
    init_stack(&mut s, "gen_txt", &gen_stack(gcfg), rng)?;

    s.init_linear("img_dec.fc1", gcfg.width, gcfg.decoder_hidden, 1.0, rng);
    s.init_linear("img_dec.fc2", gcfg.decoder_hidden, gcfg.decoder_hidden, 1.0, rng);
    s.init_linear("img_dec.out", gcfg.decoder_hidden, IMAGE_LEN, 1.0, rng);
    Ok(s)
}

/// ViT features `[B·T_v, d_v]` from stacked patch rows `[B·T_v, 3·p²]`.
pub fn vit_forward<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &VitConfig, patches: Var, batch: usize) -> Result<Var> {
    let n = vit_tokens(cfg);
    let x = linear(g, s, "vit.patch", patches)?;
    let pos = g.param(s, "vit.pos")?;
    let pos = g.repeat_rows(pos, batch);
    let x = g.add(x, pos)?;
    let mask = AttentionMask::build(n, n, MaskKind::Full)?;
    let h = transformer_stack(g, s, "vit", &vit_stack(cfg), x, batch, &mask, None, None)?;
    layer_norm(g, s, "vit.ln_f", h)
}

/// Mean-pooled ViT features projected into the contrastive space `[B, d_c]`.
pub fn vit_pooled<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &VitConfig, feats: Var) -> Result<Var> {
    let pooled = g.group_mean_rows(feats, vit_tokens(cfg))?;
    linear(g, s, "vit.proj", pooled)
}

fn check_ids(op: &'static str, captions: &[Vec<usize>], vocab_len: usize) -> Result<usize> {
    let len = captions.first().map(Vec::len).ok_or_else(|| input_err(op, "no captions"))?;
    if len == 0 || len > MAX_TEXT_LEN || captions.iter().any(|c| c.len() != len) {
        return Err(input_err(op, format!("captions must share one length in 1..={MAX_TEXT_LEN}")));
    }
    if let Some(&bad) = captions.iter().flatten().find(|&&i| i >= vocab_len) {
        return Err(input_err(op, format!("token id {bad} outside the text vocabulary of {vocab_len}")));
    }
    Ok(len)
}

fn embed_text<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, captions: &[Vec<usize>], len: usize) -> Result<Var> {
    let ids: Vec<usize> = captions.concat();
    let table = g.param(s, &format!("{prefix}.tok"))?;
    let x = g.embedding(table, &ids)?;
    let pos = g.param(s, &format!("{prefix}.pos"))?;
    let idx: Vec<usize> = (0..captions.len()).flat_map(|_| 0..len).collect();
    let pos = g.select_rows(pos, &idx)?;
    g.add(x, pos)
}

/// Unit-norm caption vectors `[B, d_c]`; captions in one call share a length.
pub fn text_forward<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &TextEncoderConfig, captions: &[Vec<usize>]) -> Result<Var> {
    let vocab_len = s.get("txt.tok")?.rows();
    let len = check_ids("text_encode", captions, vocab_len)?;
    let x = embed_text(g, s, "txt", captions, len)?;
    let mask = AttentionMask::build(len, len, MaskKind::Full)?;
    let h = transformer_stack(g, s, "txt", &text_stack(cfg), x, captions.len(), &mask, None, None)?;
    let h = layer_norm(g, s, "txt.ln_f", h)?;
    let pooled = g.group_mean_rows(h, len)?;
    let z = linear(g, s, "txt.proj", pooled)?;
    Ok(g.l2_normalize_rows(z))
}

/// Generation-space caption features `[B·M_g, d_g]`, each token layer-normalized.
pub fn gen_text_forward<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &GenerationConfig, captions: &[Vec<usize>]) -> Result<Var> {
    let vocab_len = s.get("gen_txt.tok")?.rows();
    let len = check_ids("gen_text_encode", captions, vocab_len)?;
    let b = captions.len();
    let tokens = embed_text(g, s, "gen_txt", captions, len)?;
    let q = g.param(s, "gen_txt.queries")?;
    let q = g.repeat_rows(q, b);
    let mask = AttentionMask::build(cfg.tokens, cfg.tokens, MaskKind::Full)?;
    let h = transformer_stack(g, s, "gen_txt", &gen_stack(cfg), q, b, &mask, Some(tokens), None)?;
    g.layer_norm(h, None, None, LN_EPS)
}

/// Decodes `[B·M_g, d_g]` generation embeddings to `[B, 3072]` images in (0, 1).
pub fn decoder_forward<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &GenerationConfig, gen: Var) -> Result<Var> {
    let (rows, width) = (g.value(gen).rows(), g.value(gen).cols());
    if width != cfg.width || rows == 0 || rows % cfg.tokens != 0 {
        return Err(input_err("decode_image", format!("embeddings [{rows},{width}] for {} tokens of width {}", cfg.tokens, cfg.width)));
    }
    let pooled = g.group_mean_rows(gen, cfg.tokens)?;
    let h = linear(g, s, "img_dec.fc1", pooled)?;
    let h = g.gelu(h);
    let h = linear(g, s, "img_dec.fc2", h)?;
    let h = g.gelu(h);
    let out = linear(g, s, "img_dec.out", h)?;
    Ok(g.sigmoid(out))
}

/// The pretrained, frozen backbones together with their dimensions.
#[derive(Clone, Debug)]
pub struct FrozenBundle {
    pub params: ParamStore<f32>,
    pub vit: VitConfig,
    pub text: TextEncoderConfig,
    pub generation: GenerationConfig,
}

impl FrozenBundle {
    pub fn new(mut params: ParamStore<f32>, cfg: &Config) -> Self {
        params.freeze_all();
        Self { params, vit: cfg.vit.clone(), text: cfg.text.clone(), generation: cfg.generation.clone() }
    }

    pub fn vit_tokens(&self) -> usize {
        vit_tokens(&self.vit)
    }

    /// ViT features for a batch of images, `[B·T_v, d_v]`.
    pub fn vit_encode_batch(&self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        let mut patches = Vec::new();
        for im in images {
            patches.extend(patchify(im, self.vit.patch)?);
        }
        let plen = CHANNELS * self.vit.patch * self.vit.patch;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![patches.len() / plen, plen], patches)?);
        let f = vit_forward(&mut g, &self.params, &self.vit, x, images.len())?;
        Ok(g.value(f).clone())
    }

    /// ViT features `[T_v, d_v]` of one image.
    pub fn vit_encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.vit_encode_batch(&[image])
    }

    /// Pooled, projected, unit-norm image vectors `[B, d_c]`.
    pub fn image_embed_batch(&self, images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        let feats = self.vit_encode_batch(images)?;
        let mut g = Graph::new();
        let f = g.constant(feats);
        let z = vit_pooled(&mut g, &self.params, &self.vit, f)?;
        let z = g.l2_normalize_rows(z);
        Ok(g.value(z).clone())
    }

    pub fn text_encode_batch(&self, captions: &[Vec<usize>]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let z = text_forward(&mut g, &self.params, &self.text, captions)?;
        Ok(g.value(z).clone())
    }

    /// Unit vector in the contrastive space.
    pub fn text_encode(&self, caption: &[usize]) -> Result<Vec<f32>> {
        Ok(self.text_encode_batch(&[caption.to_vec()])?.into_data())
    }

    pub fn gen_text_encode_batch(&self, captions: &[Vec<usize>]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let z = gen_text_forward(&mut g, &self.params, &self.generation, captions)?;
        Ok(g.value(z).clone())
    }

    /// Generation embeddings `[M_g, d_g]` of one caption.
    pub fn gen_text_encode(&self, caption: &[usize]) -> Result<Tensor<f32>> {
        self.gen_text_encode_batch(&[caption.to_vec()])
    }

    /// Images `3×32×32` clamped to [0, 1], one per `M_g` block of rows.
    pub fn decode_images(&self, gen: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        if gen.shape().len() != 2 {
            return Err(input_err("decode_image", format!("expected a matrix, got {:?}", gen.shape())));
        }
        let mut g = Graph::new();
        let x = g.constant(gen.clone());
        let out = decoder_forward(&mut g, &self.params, &self.generation, x)?;
        g.value(out)
            .data()
            .chunks(IMAGE_LEN)
            .map(|px| Tensor::new(vec![CHANNELS, IMAGE_SIDE, IMAGE_SIDE], px.iter().map(|v| v.clamp(0.0, 1.0)).collect()))
            .collect()
    }

    pub fn decode_image(&self, gen: &Tensor<f32>) -> Result<Tensor<f32>> {
        if gen.shape() != [self.generation.tokens, self.generation.width] {
            return Err(input_err(
                "decode_image",
                format!("shape {:?}, expected [{}, {}]", gen.shape(), self.generation.tokens, self.generation.width),
            ));
        }
        Ok(self.decode_images(gen)?.remove(0))
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)
    }

    pub fn load(path: &Path, cfg: &Config) -> Result<Self> {
        let params = checkpoint::load(path, "vit.*")?;
        for prefix in ["vit.", "txt.", "gen_txt.", "img_dec."] {
            if !params.names().any(|n| n.starts_with(prefix)) {
                return Err(crate::SeedError::MissingCheckpoint(format!("{prefix}*")));
            }
        }
        Ok(Self::new(params, cfg))
    }
}

/// Per-pixel MSE between two images.
pub fn pixel_mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64
}

fn optimizer(o: &OptimConfig) -> Adam {
    Adam::new(o.lr).with_clip(o.clip_norm)
}

/// Trains the ViT and caption encoder jointly with the symmetric contrastive
/// loss on (pooled image vector, caption vector).
fn train_alignment(
    store: &mut ParamStore<f32>,
    cfg: &Config,
    train: &[ImageSample],
    rng: &mut Rng,
    trace: &mut Vec<EpochRecord>,
) -> Result<()> {
    let o = &cfg.train.backbone_contrastive;
    let mut opt = optimizer(o);
    let plen = CHANNELS * cfg.vit.patch * cfg.vit.patch;
    let patches: Vec<Vec<f32>> = train.iter().map(|s| patchify(&s.image, cfg.vit.patch)).collect::<Result<_>>()?;
    let keys: Vec<usize> = train.iter().map(|s| s.spec.index()).collect();
    let inv_tau = 1.0 / cfg.train.backbone_tau;
    for epoch in 0..o.epochs {
        let mut total = 0.0;
        let batches = distinct_batches(&keys, o.batch_size, rng);
        for batch in &batches {
            let mut g = Graph::new();
            let px: Vec<f32> = batch.iter().flat_map(|&i| patches[i].iter().copied()).collect();
            let x = g.constant(Tensor::new(vec![px.len() / plen, plen], px)?);
            let feats = vit_forward(&mut g, store, &cfg.vit, x, batch.len())?;
            let img = vit_pooled(&mut g, store, &cfg.vit, feats)?;
            let caps: Vec<Vec<usize>> = batch.iter().map(|&i| train[i].caption_ids.clone()).collect();
            let txt = text_forward(&mut g, store, &cfg.text, &caps)?;
            let t = g.constant(Tensor::scalar(inv_tau as f32));
            let loss = contrastive_loss(&mut g, img, txt, t)?;
            total += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            opt.step(store, &g.param_grads(&grads))?;
        }
        trace.push(EpochRecord::log("backbone-align", epoch, total / batches.len() as f64, None));
    }
    Ok(())
}

/// Trains the generation caption encoder and the image decoder to reproduce
/// the canonical render of every caption seen in training.
fn train_generation(
    store: &mut ParamStore<f32>,
    cfg: &Config,
    specs: &[SceneSpec],
    vocab: &TextVocab,
    rng: &mut Rng,
    trace: &mut Vec<EpochRecord>,
) -> Result<()> {
    let o = &cfg.train.backbone_decoder;
    let mut opt = optimizer(o);
    let captions: Vec<Vec<usize>> = specs.iter().map(|s| crate::data::caption_tokens(s, vocab)).collect();
    let targets: Vec<Tensor<f32>> = specs.iter().map(render_scene).collect();
    for epoch in 0..o.epochs {
        let mut total = 0.0;
        let batches = shuffled_batches(specs.len(), o.batch_size, rng);
        for batch in &batches {
            let mut g = Graph::new();
            let caps: Vec<Vec<usize>> = batch.iter().map(|&i| captions[i].clone()).collect();
            let gen = gen_text_forward(&mut g, store, &cfg.generation, &caps)?;
            let img = decoder_forward(&mut g, store, &cfg.generation, gen)?;
            let px: Vec<f32> = batch.iter().flat_map(|&i| targets[i].data().iter().copied()).collect();
            let target = g.constant(Tensor::new(vec![batch.len(), IMAGE_LEN], px)?);
            let loss = g.mse(img, target)?;
            total += g.value(loss).item() as f64;
            let grads = g.backward(loss)?;
            opt.step(store, &g.param_grads(&grads))?;
        }
        if epoch % 25 == 0 || epoch + 1 == o.epochs {
            trace.push(EpochRecord::log("backbone-decoder", epoch, total / batches.len() as f64, None));
        }
    }
    Ok(())
}

/// Pretrains all backbones on `train` and returns them frozen.
pub fn pretrain_backbones(
    train: &[ImageSample],
    cfg: &Config,
    vocab: &TextVocab,
    rng: &mut Rng,
) -> Result<(FrozenBundle, Vec<EpochRecord>)> {
    if train.is_empty() {
        return Err(input_err("pretrain_backbones", "empty dataset"));
    }
    let mut store = init_backbones(cfg, vocab.len(), rng)?;
    let mut trace = Vec::new();
    train_alignment(&mut store, cfg, train, rng, &mut trace)?;
    let specs: Vec<SceneSpec> = train.iter().map(|s| s.spec).collect::<BTreeSet<_>>().into_iter().collect();
    train_generation(&mut store, cfg, &specs, vocab, rng, &mut trace)?;
    Ok((FrozenBundle::new(store, cfg), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneSpec, ShapeKind, Size};

    fn tiny_config() -> Config {
        Config {
            vit: VitConfig { patch: 8, width: 8, depth: 0, heads: 2 },
            text: TextEncoderConfig { width: 8, depth: 1, heads: 2, embed_dim: 4 },
            generation: GenerationConfig { tokens: 3, width: 8, depth: 1, heads: 2, decoder_hidden: 8 },
            ..Config::default()
        }
    }

    fn tiny_bundle(zero_positions: bool) -> FrozenBundle {
        let cfg = tiny_config();
        let mut s = init_backbones(&cfg, TextVocab::new().len(), &mut Rng::new(4)).unwrap();
        if zero_positions {
            *s.get_mut("vit.pos").unwrap() = Tensor::zeros(&[16, 8]);
        }
        FrozenBundle::new(s, &cfg)
    }

    #[test]
    fn patch_swap_swaps_feature_rows() {
        let b = tiny_bundle(true);
        let spec = SceneSpec::new(ShapeKind::Circle, 1, 0, Size::Large).unwrap();
        let img = render_scene(&spec);
        let mut swapped = img.clone();
        // exchange grid tiles 0 (0,0) and 5 (1,1)
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    let a = c * 1024 + y * 32 + x;
                    let bb = c * 1024 + (y + 8) * 32 + x + 8;
                    swapped.data_mut().swap(a, bb);
                }
            }
        }
        let f = b.vit_encode(&img).unwrap();
        let fs = b.vit_encode(&swapped).unwrap();
        assert_eq!(f.row(0), fs.row(5));
        assert_eq!(f.row(5), fs.row(0));
        for r in [1, 2, 3, 4, 6, 15] {
            assert_eq!(f.row(r), fs.row(r));
        }
    }

    #[test]
    fn encoders_have_documented_shapes_and_norms() {
        let b = tiny_bundle(false);
        let vocab = TextVocab::new();
        let spec = SceneSpec::from_index(17).unwrap();
        let img = render_scene(&spec);
        assert_eq!(b.vit_encode(&img).unwrap().shape(), &[16, 8]);
        assert_eq!(b.vit_encode(&img).unwrap(), b.vit_encode(&img).unwrap());
        let cap = crate::data::caption_tokens(&spec, &vocab);
        let t = b.text_encode(&cap).unwrap();
        let norm: f32 = t.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let gen = b.gen_text_encode(&cap).unwrap();
        assert_eq!(gen.shape(), &[3, 8]);
        let im = b.decode_image(&gen).unwrap();
        assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(im, b.decode_image(&gen).unwrap());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let b = tiny_bundle(false);
        assert!(b.vit_encode(&Tensor::zeros(&[3, 16, 16])).is_err());
        assert!(b.text_encode(&[1, 2, 999]).is_err());
        assert!(b.gen_text_encode(&[1, 200]).is_err());
        assert!(b.decode_image(&Tensor::zeros(&[4, 8])).is_err());
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = tiny_config();
        assert!(pretrain_backbones(&[], &cfg, &TextVocab::new(), &mut Rng::new(1)).is_err());
    }
}
