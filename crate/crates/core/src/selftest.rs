//! Fast property suite run by the `selftest` subcommand: causality, gradient
//! checks, quantizer and metric oracles, adapter identity. No trained
//! artifacts are needed.

use crate::autograd::Graph;
use crate::config::{Config, LmConfig, QFormerConfig, RevqInput, VqConfig, VqMetric};
use crate::data::{render_scene, SceneSpec, TextVocab};
use crate::error::Result;
use crate::eval::{inverse_render, recall_at_k};
use crate::gradcheck::grad_check;
use crate::lm::{build_unified_vocab, embed_tokens, init_adapters, init_lm, lm_forward, lora_spec, UnifiedVocab};
use crate::params::ParamStore;
use crate::qformer::{init_qformer, qformer_forward, stage1_loss};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vq::{init_stage2_params, stage2_losses, Codebook, VqDims};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: e.to_string() },
    }
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

fn bits(t: &[f32]) -> Vec<u32> {
    t.iter().map(|v| v.to_bits()).collect()
}

pub fn tiny_qformer() -> QFormerConfig {
    QFormerConfig { queries: 4, width: 8, depth: 2, heads: 2, ..QFormerConfig::default() }
}

pub fn tiny_lm() -> LmConfig {
    LmConfig { width: 8, depth: 2, heads: 2, context: 16, lora_rank: 2, lora_alpha: 4.0, ..LmConfig::default() }
}

fn qformer_causality(rng: &mut Rng) -> Result<(bool, String)> {
    let cfg = tiny_qformer();
    let (batch, tokens, d_v) = (2, 5, 6);
    let codebook = Codebook::new(random(&[16, cfg.width], rng), VqMetric::L2)?;
    let mut violations = 0;
    for _ in 0..20 {
        let store = init_qformer(&cfg, d_v, 4, rng)?;
        let feats = random(&[batch * tokens, d_v], rng);
        let embed = |s: &ParamStore<f32>| -> Result<Tensor<f32>> {
            let mut g = Graph::new();
            let f = g.constant(feats.clone());
            let e = qformer_forward(&mut g, s, &cfg, f, batch)?;
            Ok(g.value(e).clone())
        };
        let base = embed(&store)?;
        let base_codes = codebook.quantize_rows(&base)?;
        for j in 1..cfg.queries {
            let mut p = store.clone();
            let q = p.get_mut("qformer.queries")?;
            for v in &mut q.data_mut()[j * cfg.width..(j + 1) * cfg.width] {
                *v += 1.0;
            }
            let out = embed(&p)?;
            let codes = codebook.quantize_rows(&out)?;
            for b in 0..batch {
                for i in 0..j {
                    let r = b * cfg.queries + i;
                    if bits(out.row(r)) != bits(base.row(r)) || codes[r] != base_codes[r] {
                        violations += 1;
                    }
                }
            }
        }
    }
    Ok((violations == 0, format!("{violations} earlier positions changed")))
}

fn lm_store(cfg: &LmConfig, vocab: &UnifiedVocab, code_width: usize, rng: &mut Rng) -> Result<ParamStore<f32>> {
    let mut s = init_lm(cfg, vocab, rng)?;
    s.merge(init_adapters(cfg, vocab, code_width, rng)?);
    Ok(s)
}

fn lm_logits(s: &ParamStore<f32>, cfg: &LmConfig, vocab: &UnifiedVocab, entries: &Tensor<f32>, ids: &[usize], lora: bool) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let e = g.constant(entries.clone());
    let emb = embed_tokens(&mut g, s, vocab, e, ids)?;
    let spec = lora_spec(cfg);
    let logits = lm_forward(&mut g, s, cfg, vocab, emb, 1, lora.then_some(&spec))?;
    Ok(g.value(logits).clone())
}

fn random_ids(vocab: &UnifiedVocab, len: usize, rng: &mut Rng) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab.len())).collect()
}

fn lm_causality(rng: &mut Rng) -> Result<(bool, String)> {
    let cfg = tiny_lm();
    let vocab = build_unified_vocab(TextVocab::new().len(), 6)?;
    let entries = random(&[vocab.codes, 5], rng);
    let mut violations = 0;
    for _ in 0..10 {
        let mut s = lm_store(&cfg, &vocab, 5, rng)?;
        for (name, p) in s.clone().iter() {
            if name.ends_with(".b") && name.starts_with("lora.") {
                *s.get_mut(name)? = random(p.value.shape(), rng);
            }
        }
        let ids = random_ids(&vocab, 12, rng);
        let base = lm_logits(&s, &cfg, &vocab, &entries, &ids, true)?;
        for t in 1..ids.len() {
            let mut other = ids.clone();
            other[t] = (other[t] + 1 + rng.below(vocab.len() - 1)) % vocab.len();
            let out = lm_logits(&s, &cfg, &vocab, &entries, &other, true)?;
            for p in 0..t {
                violations += usize::from(bits(out.row(p)) != bits(base.row(p)));
            }
        }
    }
    Ok((violations == 0, format!("{violations} earlier logit rows changed")))
}

fn quantizer_oracle(rng: &mut Rng) -> Result<(bool, String)> {
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let (k, d) = (2 + rng.below(15), 1 + rng.below(6));
        let cb = Codebook::new(random(&[k, d], rng), VqMetric::L2)?;
        let v: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
        let mut best = (f64::INFINITY, 0);
        for i in 0..k {
            let dist: f64 = cb.entries().row(i).iter().zip(&v).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
            if dist < best.0 {
                best = (dist, i);
            }
        }
        mismatches += usize::from(cb.quantize(&v)?.0 != best.1);
    }
    let dup = Codebook::new(Tensor::from_rows(&[vec![1.0f32, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]])?, VqMetric::L2)?;
    let ties_ok = dup.quantize(&[1.0, 1.0])?.0 == 0 && dup.quantize(&[0.5, 0.5])?.0 == 0;
    let cb = Codebook::new(random(&[32, 4], rng), VqMetric::L2)?;
    let idem = (0..32).all(|k| cb.quantize(cb.entries().row(k)).map(|q| q.0).ok() == Some(k));
    Ok((mismatches == 0 && ties_ok && idem, format!("{mismatches} mismatches, ties {ties_ok}, idempotent {idem}")))
}

fn lora_identity(rng: &mut Rng) -> Result<(bool, String)> {
    let cfg = tiny_lm();
    let vocab = build_unified_vocab(TextVocab::new().len(), 6)?;
    let entries = random(&[vocab.codes, 5], rng);
    let s = lm_store(&cfg, &vocab, 5, rng)?;
    let mut differ = 0;
    for _ in 0..100 {
        let ids = random_ids(&vocab, 1 + rng.below(cfg.context), rng);
        let a = lm_logits(&s, &cfg, &vocab, &entries, &ids, true)?;
        let b = lm_logits(&s, &cfg, &vocab, &entries, &ids, false)?;
        differ += usize::from(bits(a.data()) != bits(b.data()));
    }
    Ok((differ == 0, format!("{differ} of 100 sequences differ")))
}

fn metric_oracles(rng: &mut Rng) -> Result<(bool, String)> {
    let n = 10;
    let mut mismatches = 0;
    for _ in 0..100 {
        let sim: Vec<f64> = (0..n * n).map(|_| (rng.below(7) as f64) / 2.0).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let r = recall_at_k(&sim, n, &ks)?;
        for (ki, &k) in ks.iter().enumerate() {
            let brute = |get: &dyn Fn(usize, usize) -> f64| -> f64 {
                (0..n)
                    .filter(|&i| {
                        let mut order: Vec<usize> = (0..n).collect();
                        order.sort_by(|&a, &b| get(i, b).partial_cmp(&get(i, a)).unwrap().then(a.cmp(&b)));
                        order[..k].contains(&i)
                    })
                    .count() as f64
                    / n as f64
            };
            mismatches += usize::from(brute(&|i, j| sim[i * n + j]) != r.image_to_text[ki]);
            mismatches += usize::from(brute(&|j, i| sim[i * n + j]) != r.text_to_image[ki]);
        }
    }
    let eye: Vec<f64> = (0..n * n).map(|i| f64::from(u8::from(i / n == i % n))).collect();
    let identity = recall_at_k(&eye, n, &[1, 5, 10])?.mean == 1.0;
    let renders = SceneSpec::all().filter(|s| inverse_render(&render_scene(s)) == *s).count();
    Ok((
        mismatches == 0 && identity && renders == 270,
        format!("{mismatches} recall mismatches, identity {identity}, inverse render {renders}/270"),
    ))
}

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-5;
const PROBES: usize = 6;

fn unfreeze(mut s: ParamStore<f32>) -> ParamStore<f64> {
    s.set_frozen("", false);
    s.cast()
}

/// `(block, max relative error)` for every trainable block at tiny dims.
pub fn gradient_checks(rng: &mut Rng) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    let q = tiny_qformer();
    let (batch, tokens, d_v, d_c) = (3, 4, 6, 5);
    let qs = unfreeze(init_qformer(&q, d_v, d_c, rng)?);
    let feats: Tensor<f64> = random(&[batch * tokens, d_v], rng).cast();
    let text: Tensor<f64> = random(&[batch, d_c], rng).cast();
    let r = grad_check(&qs, |g, s| stage1_loss(g, s, &q, feats.clone(), text.clone()), STEP, TOLERANCE, PROBES)?;
    out.push(("causal q-former", r.max_rel_error));

    let dims = VqDims {
        queries: q.queries,
        width: q.width,
        gen_tokens: 3,
        gen_width: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        revq_depth: 1,
        revq_heads: 2,
        revq_input: RevqInput::Entries,
    };
    let vq = VqConfig::default();
    let s2 = unfreeze(init_stage2_params(&dims, rng)?);
    let causal: Tensor<f64> = random(&[batch * dims.queries, dims.width], rng).cast();
    let quantized: Tensor<f64> = random(&[batch * dims.queries, dims.width], rng).cast();
    let target: Tensor<f64> = random(&[batch * dims.gen_tokens, dims.gen_width], rng).cast();
    let stage2 = |prefix: &'static str| {
        let mut s = s2.clone();
        for name in s2.names() {
            if !name.starts_with(prefix) {
                s.set_frozen(name, true);
            }
        }
        grad_check(
            &s,
            |g, s| {
                let c = g.constant(causal.clone());
                Ok(stage2_losses(g, s, &dims, &vq, c, quantized.clone(), target.clone(), None, batch)?.total)
            },
            STEP,
            TOLERANCE,
            PROBES,
        )
    };
    out.push(("code decoder", stage2("code_dec.")?.max_rel_error));
    out.push(("reverse q-former", stage2("revq.")?.max_rel_error));

    let cfg = LmConfig { train_visual_head: true, ..tiny_lm() };
    let vocab = build_unified_vocab(6, 4)?;
    let mut ls = lm_store(&cfg, &vocab, 5, rng)?;
    for (name, p) in ls.clone().iter() {
        if name.starts_with("lora.") || name == "proj.head.w" {
            *ls.get_mut(name)? = random(p.value.shape(), rng).map(|v| v * 0.3);
        }
    }
    let ls = unfreeze(ls);
    let entries: Tensor<f64> = random(&[vocab.codes, 5], rng).cast();
    let ids: Vec<usize> = (0..2 * 7).map(|_| rng.below(vocab.len())).collect();
    let targets: Vec<usize> = (0..ids.len()).map(|_| rng.below(vocab.len())).collect();
    let lm = |prefix: &'static str| {
        let mut s = ls.clone();
        for name in ls.names() {
            if !name.starts_with(prefix) {
                s.set_frozen(name, true);
            }
        }
        grad_check(
            &s,
            |g, s| {
                let e = g.constant(entries.clone());
                let emb = embed_tokens(g, s, &vocab, e, &ids)?;
                let spec = lora_spec(&cfg);
                let logits = lm_forward(g, s, &cfg, &vocab, emb, 2, Some(&spec))?;
                g.cross_entropy(logits, &targets, None)
            },
            STEP,
            TOLERANCE,
            PROBES,
        )
    };
    out.push(("lm block", lm("lm.")?.max_rel_error));
    out.push(("lora", lm("lora.")?.max_rel_error));
    out.push(("projections", lm("proj")?.max_rel_error));
    Ok(out)
}

fn gradients(rng: &mut Rng) -> Result<(bool, String)> {
    let checks = gradient_checks(rng)?;
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = checks.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst <= TOLERANCE, detail))
}

fn default_config() -> Result<(bool, String)> {
    let v = Config::default().violations();
    Ok((v.is_empty(), if v.is_empty() { "valid".into() } else { v.join("; ") }))
}

pub fn run_selftest(seed: u64) -> Vec<Check> {
    let mut rng = Rng::for_stage(seed, "selftest");
    vec![
        check("default config", default_config()),
        check("q-former causality", qformer_causality(&mut rng)),
        check("lm causality", lm_causality(&mut rng)),
        check("gradient checks", gradients(&mut rng)),
        check("quantizer oracle", quantizer_oracle(&mut rng)),
        check("lora identity", lora_identity(&mut rng)),
        check("metric oracles", metric_oracles(&mut rng)),
    ]
}
