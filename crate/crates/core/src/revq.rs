//! Reverse Q-Former: learnable queries that read code entries through
//! cross-attention and emit generation embeddings for the frozen decoder.

use crate::autograd::{Graph, Var};
use crate::backbones::FrozenBundle;
use crate::config::RevqInput;
use crate::error::{input_err, Result};
use crate::nn::{init_stack, layer_norm, linear, transformer_stack, AttentionMask, MaskKind, StackConfig};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};
use crate::vq::{reconstruct_forward, CodeSequence, Codebook, VqDims};

fn stack(dims: &VqDims) -> StackConfig {
    StackConfig::new(dims.revq_depth, dims.gen_width, dims.revq_heads, Some(dims.width))
}

pub fn init_revq(store: &mut ParamStore<f32>, dims: &VqDims, rng: &mut Rng) -> Result<()> {
    store.init_normal("revq.queries", &[dims.gen_tokens, dims.gen_width], 1.0, rng);
    store.init_normal("revq.code_pos", &[dims.queries, dims.width], 0.1, rng);
    init_stack(store, "revq", &stack(dims), rng)?;
    store.init_layer_norm("revq.ln_f", dims.gen_width);
    store.init_linear("revq.out", dims.gen_width, dims.gen_width, 1.0, rng);
    Ok(())
}

/// Generation embeddings `[B·M_g, d_g]` from code-side vectors `[B·N_q, d]`.
pub fn reverse_qformer_forward<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    dims: &VqDims,
    codes: Var,
    batch: usize,
) -> Result<Var> {
    let (rows, width) = (g.value(codes).rows(), g.value(codes).cols());
    if width != dims.width || batch == 0 || rows != batch * dims.queries {
        return Err(input_err(
            "reverse_qformer_forward",
            format!("code vectors [{rows},{width}] for batch {batch}, expected {} × {}", dims.queries, dims.width),
        ));
    }
    let pos = g.param(s, "revq.code_pos")?;
    let pos = g.repeat_rows(pos, batch);
    let kv = g.add(codes, pos)?;
    let q = g.param(s, "revq.queries")?;
    let q = g.repeat_rows(q, batch);
    let mask = AttentionMask::build(dims.gen_tokens, dims.gen_tokens, MaskKind::Full)?;
    let h = transformer_stack(g, s, "revq", &stack(dims), q, batch, &mask, Some(kv), None)?;
    let h = layer_norm(g, s, "revq.ln_f", h)?;
    linear(g, s, "revq.out", h)
}

/// Generation embeddings `[B·M_g, d_g]` for a batch of code sequences.
pub fn generation_embeddings(
    seqs: &[CodeSequence],
    codebook: &Codebook,
    params: &ParamStore<f32>,
    dims: &VqDims,
) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let entries = g.constant(codebook.lookup_all(seqs)?);
    let side = match dims.revq_input {
        RevqInput::Entries => entries,
        RevqInput::Reconstructed => reconstruct_forward(&mut g, params, dims, entries, seqs.len())?,
    };
    let out = reverse_qformer_forward(&mut g, params, dims, side, seqs.len())?;
    Ok(g.value(out).clone())
}

/// Codes → generation embeddings → image through the frozen decoder.
pub fn detokenize(
    codes: &CodeSequence,
    codebook: &Codebook,
    params: &ParamStore<f32>,
    dims: &VqDims,
    bundle: &FrozenBundle,
) -> Result<Tensor<f32>> {
    let gen = generation_embeddings(std::slice::from_ref(codes), codebook, params, dims)?;
    bundle.decode_image(&gen)
}

/// Batched [`detokenize`].
pub fn detokenize_batch(
    seqs: &[CodeSequence],
    codebook: &Codebook,
    params: &ParamStore<f32>,
    dims: &VqDims,
    bundle: &FrozenBundle,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        let gen = generation_embeddings(chunk, codebook, params, dims)?;
        out.extend(bundle.decode_images(&gen)?);
    }
    Ok(out)
}
