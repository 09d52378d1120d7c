//! Transformer machinery shared by every model in the pipeline.
//!
//! Blocks are pre-norm residual: self-attention, optional cross-attention,
//! then a GELU feed-forward of width `ffn_mult · d`. Parameters live in a
//! [`ParamStore`] under `{prefix}.layers.{i}.*`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config_err, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Real;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Causal,
    Full,
}

/// Boolean `n_q × n_kv` attention allowance, row-major, `true` = attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n_q: usize,
    n_kv: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn build(n_q: usize, n_kv: usize, kind: MaskKind) -> Result<Self> {
        if n_q == 0 || n_kv == 0 {
            return Err(config_err("build_attention_mask", "mask needs at least one query and one key"));
        }
        let allowed = match kind {
            MaskKind::Full => vec![true; n_q * n_kv],
            MaskKind::Causal => {
                if n_q != n_kv {
                    return Err(config_err("build_attention_mask", format!("causal mask needs n_q == n_kv, got {n_q} and {n_kv}")));
                }
                (0..n_q * n_kv).map(|p| p % n_kv <= p / n_kv).collect()
            }
        };
        Ok(Self { n_q, n_kv, allowed })
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_kv(&self) -> usize {
        self.n_kv
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n_kv + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Width of the cross-attended sequence; `None` for self-attention-only stacks.
    #[serde(default)]
    pub cross_width: Option<usize>,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
}

fn default_ffn_mult() -> usize {
    4
}

impl StackConfig {
    pub fn new(depth: usize, width: usize, heads: usize, cross_width: Option<usize>) -> Self {
        Self { depth, width, heads, cross_width, ffn_mult: 4 }
    }

    pub fn validate(&self, what: &'static str) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(config_err(what, format!("width {} must be a positive multiple of heads {}", self.width, self.heads)));
        }
        if self.cross_width == Some(0) || self.ffn_mult == 0 {
            return Err(config_err(what, "cross width and ffn multiplier must be positive"));
        }
        Ok(())
    }
}

/// Low-rank adapters on the self-attention query and value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSpec {
    pub prefix: String,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn names(&self, layer: usize, target: &str) -> (String, String) {
        let base = format!("{}.layers.{layer}.{target}", self.prefix);
        (format!("{base}.a"), format!("{base}.b"))
    }
}

pub fn init_stack(store: &mut ParamStore<f32>, prefix: &str, cfg: &StackConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate("init_stack")?;
    let d = cfg.width;
    let out_gain = 1.0 / (2.0 * cfg.depth.max(1) as f64).sqrt();
    for i in 0..cfg.depth {
        let l = format!("{prefix}.layers.{i}");
        store.init_layer_norm(&format!("{l}.ln1"), d);
        for p in ["q", "k", "v"] {
            store.init_linear(&format!("{l}.attn.{p}"), d, d, 1.0, rng);
        }
        store.init_linear(&format!("{l}.attn.o"), d, d, out_gain, rng);
        if let Some(dc) = cfg.cross_width {
            store.init_layer_norm(&format!("{l}.ln_x"), d);
            store.init_linear(&format!("{l}.xattn.q"), d, d, 1.0, rng);
            store.init_linear(&format!("{l}.xattn.k"), dc, d, 1.0, rng);
            store.init_linear(&format!("{l}.xattn.v"), dc, d, 1.0, rng);
            store.init_linear(&format!("{l}.xattn.o"), d, d, out_gain, rng);
        }
        store.init_layer_norm(&format!("{l}.ln2"), d);
        store.init_linear(&format!("{l}.ffn1"), d, cfg.ffn_mult * d, 1.0, rng);
        store.init_linear(&format!("{l}.ffn2"), cfg.ffn_mult * d, d, out_gain, rng);
    }
    Ok(())
}

/// Adapter matrices for every layer: `A` Gaussian `[r, d]`, `B` zero `[d, r]`.
pub fn init_lora(store: &mut ParamStore<f32>, spec: &LoraSpec, cfg: &StackConfig, rng: &mut Rng) -> Result<()> {
    if spec.rank == 0 {
        return Err(config_err("init_lora", "rank must be at least 1"));
    }
    let d = cfg.width;
    for i in 0..cfg.depth {
        for target in ["q", "v"] {
            let (a, b) = spec.names(i, target);
            store.init_normal(a, &[spec.rank, d], 1.0 / (d as f64).sqrt(), rng);
            store.insert(b, crate::tensor::Tensor::zeros(&[d, spec.rank]));
        }
    }
    Ok(())
}

/// `x · W + b` with `W` stored `[in, out]`.
pub fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.g"))?;
    let beta = g.param(store, &format!("{name}.b"))?;
    g.layer_norm(x, Some(gamma), Some(beta), LN_EPS)
}

/// `base_out + (α/r) · B · (A · x)` for row-vector inputs, with `A: [r, d_in]`, `B: [d_out, r]`.
pub fn lora_apply<T: Real>(
    g: &mut Graph<T>,
    base_out: Var,
    x: Var,
    a: Var,
    b: Var,
    alpha: f64,
    rank: usize,
) -> Result<Var> {
    let (ra, rb) = (g.shape(a)[0], *g.shape(b).last().unwrap_or(&0));
    if rank == 0 || ra != rank || rb != rank {
        return Err(config_err("lora_apply", format!("rank {rank} with A {:?} and B {:?}", g.shape(a), g.shape(b))));
    }
    let down = g.matmul_nt(x, a)?;
    let up = g.matmul_nt(down, b)?;
    let delta = g.scale(up, alpha / rank as f64);
    g.add(base_out, delta)
}

#[allow(clippy::too_many_arguments)]
fn attention_block<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    xq: Var,
    xkv: Var,
    batch: usize,
    heads: usize,
    mask: &AttentionMask,
    lora: Option<(&LoraSpec, usize)>,
) -> Result<Var> {
    let mut q = linear(g, store, &format!("{name}.q"), xq)?;
    let k = linear(g, store, &format!("{name}.k"), xkv)?;
    let mut v = linear(g, store, &format!("{name}.v"), xkv)?;
    if let Some((spec, layer)) = lora {
        let (qa, qb) = spec.names(layer, "q");
        let (va, vb) = spec.names(layer, "v");
        let (qa, qb) = (g.param(store, &qa)?, g.param(store, &qb)?);
        q = lora_apply(g, q, xq, qa, qb, spec.alpha, spec.rank)?;
        let (va, vb) = (g.param(store, &va)?, g.param(store, &vb)?);
        v = lora_apply(g, v, xkv, va, vb, spec.alpha, spec.rank)?;
    }
    let att = g.attention(q, k, v, batch, heads, mask.as_slice())?;
    linear(g, store, &format!("{name}.o"), att)
}

/// Runs `cfg.depth` pre-norm blocks over `batch` stacked samples.
///
/// `x` is `[batch · n, width]` with `n = self_mask.n_q()`; `cross` is
/// `[batch · m, cross_width]` and is attended with a full mask.
#[allow(clippy::too_many_arguments)]
pub fn transformer_stack<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &StackConfig,
    x: Var,
    batch: usize,
    self_mask: &AttentionMask,
    cross: Option<Var>,
    lora: Option<&LoraSpec>,
) -> Result<Var> {
    if cfg.depth == 0 {
        return Ok(x);
    }
    let (rows, width) = (g.value(x).rows(), g.value(x).cols());
    if width != cfg.width || batch == 0 || rows != batch * self_mask.n_q() {
        return Err(config_err(
            "transformer_stack",
            format!("input [{rows},{width}] for batch {batch} x {} rows of width {}", self_mask.n_q(), cfg.width),
        ));
    }
    let cross_mask = match (cross, cfg.cross_width) {
        (Some(c), Some(dc)) => {
            let (cr, cw) = (g.value(c).rows(), g.value(c).cols());
            if cw != dc || cr % batch != 0 {
                return Err(config_err("transformer_stack", format!("cross inputs [{cr},{cw}] but configured width {dc}")));
            }
            Some(AttentionMask::build(self_mask.n_q(), cr / batch, MaskKind::Full)?)
        }
        (None, None) => None,
        (Some(_), None) => return Err(config_err("transformer_stack", "cross inputs given to a self-only stack")),
        (None, Some(_)) => return Err(config_err("transformer_stack", "stack expects cross inputs")),
    };
    let mut h = x;
    for i in 0..cfg.depth {
        let l = format!("{prefix}.layers.{i}");
        let n1 = layer_norm(g, store, &format!("{l}.ln1"), h)?;
        let a = attention_block(g, store, &format!("{l}.attn"), n1, n1, batch, cfg.heads, self_mask, lora.map(|s| (s, i)))?;
        h = g.add(h, a)?;
        if let (Some(c), Some(mask)) = (cross, cross_mask.as_ref()) {
            let nx = layer_norm(g, store, &format!("{l}.ln_x"), h)?;
            let a = attention_block(g, store, &format!("{l}.xattn"), nx, c, batch, cfg.heads, mask, None)?;
            h = g.add(h, a)?;
        }
        let n2 = layer_norm(g, store, &format!("{l}.ln2"), h)?;
        let f1 = linear(g, store, &format!("{l}.ffn1"), n2)?;
        let f1 = g.gelu(f1);
        let f2 = linear(g, store, &format!("{l}.ffn2"), f1)?;
        h = g.add(h, f2)?;
    }
    Ok(h)
}
