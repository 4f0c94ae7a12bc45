//! Image prompt encoder: a small vision transformer whose full token sequence
//! (class token + patch tokens, after the final layer norm) is the context the
//! UNet cross-attention reads as keys and values.

use crate::config::PromptEncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::tensor::{Scalar, Tensor};
use crate::numerics::{Rng, Tape, Var};
use crate::params::{init_linear, init_norm, layer_norm_on, linear_on, ParamStore, VarMap};

pub const NAMESPACE: &str = "prompt_encoder";

/// Context sequence consumed by cross-attention: M x d̂ tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptContext<T> {
    pub tokens: Tensor<T>,
}

impl<T: Scalar> PromptContext<T> {
    pub fn new(tokens: Tensor<T>) -> Result<Self> {
        match tokens.shape() {
            [m, _d] if *m >= 1 => {
                tokens.ensure_finite("prompt context")?;
                Ok(PromptContext { tokens })
            }
            other => Err(Error::shape(format!(
                "prompt context must be M x d, got {other:?}"
            ))),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Token count for a given input resolution: one class token plus one token
/// per patch.
pub fn token_count(cfg: &PromptEncoderConfig, h: usize, w: usize) -> usize {
    (h / cfg.patch) * (w / cfg.patch) + 1
}

/// Allocate parameters under `prompt_encoder.*`. `resolution` fixes the
/// learned position-embedding table (one entry per token).
pub fn init_params<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    cfg: &PromptEncoderConfig,
    resolution: usize,
) {
    let d = cfg.dim;
    let m = token_count(cfg, resolution, resolution);
    init_linear(
        store,
        rng,
        &format!("{NAMESPACE}.patch_embed"),
        3 * cfg.patch * cfg.patch,
        d,
    );
    store.insert(
        format!("{NAMESPACE}.cls_token"),
        Tensor::from_fn(&[1, d], |_| T::from_f64(rng.normal() * 0.02)),
    );
    store.insert(
        format!("{NAMESPACE}.pos_embed"),
        Tensor::from_fn(&[m, d], |_| T::from_f64(rng.normal() * 0.02)),
    );
    for l in 0..cfg.depth {
        let p = format!("{NAMESPACE}.block{l}");
        init_norm(store, &format!("{p}.ln1"), d);
        init_linear(store, rng, &format!("{p}.wq"), d, d);
        init_linear(store, rng, &format!("{p}.wk"), d, d);
        init_linear(store, rng, &format!("{p}.wv"), d, d);
        init_linear(store, rng, &format!("{p}.wo"), d, d);
        init_norm(store, &format!("{p}.ln2"), d);
        init_linear(store, rng, &format!("{p}.fc1"), d, d * cfg.mlp_ratio);
        init_linear(store, rng, &format!("{p}.fc2"), d * cfg.mlp_ratio, d);
    }
    init_norm(store, &format!("{NAMESPACE}.final_norm"), d);
    // learned stand-in context used when prompt conditioning is dropped
    store.insert(
        format!("{NAMESPACE}.null_token"),
        Tensor::from_fn(&[1, d], |_| T::from_f64(rng.normal() * 0.02)),
    );
}

/// Multi-head attention core shared by this encoder and the UNet: projects
/// queries from `q_src`, keys/values from `kv_src`, runs softmax attention
/// per head, merges heads, applies the output projection.
pub fn attention_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    prefix: &str,
    q_src: Var,
    kv_src: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear_on(tape, vars, &format!("{prefix}.wq"), q_src)?;
    let k = linear_on(tape, vars, &format!("{prefix}.wk"), kv_src)?;
    let v = linear_on(tape, vars, &format!("{prefix}.wv"), kv_src)?;
    let d = tape.shape(q)[1];
    if d % heads != 0 {
        return Err(Error::config(format!(
            "attention width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let lo = hd * dh;
        let hi = lo + dh;
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&outs)?;
    linear_on(tape, vars, &format!("{prefix}.wo"), merged)
}

/// One pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
pub fn self_attention_block_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    prefix: &str,
    heads: usize,
    x: Var,
) -> Result<Var> {
    let n = layer_norm_on(tape, vars, &format!("{prefix}.ln1"), x)?;
    let a = attention_on(tape, vars, prefix, n, n, heads)?;
    let x = tape.add(x, a)?;
    let n2 = layer_norm_on(tape, vars, &format!("{prefix}.ln2"), x)?;
    let h = linear_on(tape, vars, &format!("{prefix}.fc1"), n2)?;
    let h = tape.gelu(h)?;
    let h = linear_on(tape, vars, &format!("{prefix}.fc2"), h)?;
    tape.add(x, h)
}

/// Full encoder graph: patchify, embed, prepend class token, add position
/// embeddings, run the blocks, final layer norm.
pub fn encode_on<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &VarMap,
    cfg: &PromptEncoderConfig,
    cp: Var,
) -> Result<Var> {
    let shape = tape.shape(cp).to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(format!("prompt must be 3xHxW, got {shape:?}")));
    }
    if shape[1] % cfg.patch != 0 || shape[2] % cfg.patch != 0 {
        return Err(Error::shape(format!(
            "prompt resolution {}x{} not divisible by patch {}",
            shape[1], shape[2], cfg.patch
        )));
    }
    let patches = tape.patchify(cp, cfg.patch)?;
    let tok = linear_on(tape, vars, &format!("{NAMESPACE}.patch_embed"), patches)?;
    let cls = vars.get(&format!("{NAMESPACE}.cls_token"))?;
    let tok = tape.concat_rows(&[cls, tok])?;
    let pos = vars.get(&format!("{NAMESPACE}.pos_embed"))?;
    let m = tape.shape(tok)[0];
    if tape.shape(pos)[0] != m {
        return Err(Error::shape(format!(
            "position embedding has {} entries but the input produces {m} tokens",
            tape.shape(pos)[0]
        )));
    }
    let mut x = tape.add(tok, pos)?;
    for l in 0..cfg.depth {
        x = self_attention_block_on(tape, vars, &format!("{NAMESPACE}.block{l}"), cfg.heads, x)?;
    }
    layer_norm_on(tape, vars, &format!("{NAMESPACE}.final_norm"), x)
}

/// Encode an image prompt into its context sequence.
pub fn encode_prompt<T: Scalar>(
    cp: &Tensor<T>,
    params: &ParamStore<T>,
    cfg: &PromptEncoderConfig,
) -> Result<PromptContext<T>> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let cp_var = tape.leaf(cp.clone());
    let out = encode_on(&mut tape, &vars, cfg, cp_var)?;
    PromptContext::new(tape.value(out).clone())
}

/// The learned null context used for condition dropout and guidance.
pub fn null_context<T: Scalar>(params: &ParamStore<T>) -> Result<PromptContext<T>> {
    PromptContext::new(params.get(&format!("{NAMESPACE}.null_token"))?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::NamedTensors;

    fn setup(cfg: &PromptEncoderConfig, resolution: usize, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        init_params(&mut store, &mut rng, cfg, resolution);
        store
    }

    #[test]
    fn token_count_at_32_patch_8() {
        let cfg = PromptEncoderConfig::default();
        assert_eq!(token_count(&cfg, 32, 32), 17);
        let store = setup(&cfg, 32, 1);
        let mut rng = Rng::new(2);
        let cp = rng.uniform_tensor::<f64>(&[3, 32, 32], 0.0, 1.0);
        let ctx = encode_prompt(&cp, &store, &cfg).unwrap();
        assert_eq!(ctx.tokens.shape(), &[17, 128]);
    }

    #[test]
    fn reference_shape_224_patch_14_dim_1024() {
        // shape contract at the reference scale: 257 tokens of width 1024
        let cfg = PromptEncoderConfig {
            patch: 14,
            dim: 1024,
            depth: 1,
            heads: 4,
            mlp_ratio: 2,
        };
        assert_eq!(token_count(&cfg, 224, 224), 257);
        let store = setup(&cfg, 224, 3);
        let cp = Tensor::<f64>::full(&[3, 224, 224], 0.5);
        let ctx = encode_prompt(&cp, &store, &cfg).unwrap();
        assert_eq!(ctx.tokens.shape(), &[257, 1024]);
    }

    #[test]
    fn deterministic_bit_for_bit() {
        let cfg = PromptEncoderConfig {
            patch: 4,
            dim: 16,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let store = setup(&cfg, 16, 7);
        let mut rng = Rng::new(8);
        let cp = rng.uniform_tensor::<f64>(&[3, 16, 16], 0.0, 1.0);
        let a = encode_prompt(&cp, &store, &cfg).unwrap();
        let b = encode_prompt(&cp, &store, &cfg).unwrap();
        assert_eq!(a.tokens.data(), b.tokens.data());
    }

    #[test]
    fn indivisible_resolution_is_shape_error() {
        let cfg = PromptEncoderConfig::default();
        let store = setup(&cfg, 32, 1);
        let cp = Tensor::<f64>::zeros(&[3, 30, 30]);
        assert!(matches!(
            encode_prompt(&cp, &store, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let cfg = PromptEncoderConfig {
            patch: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let mut store = setup(&cfg, 8, 11);
        for name in ["block0.wo.weight", "block0.wo.bias", "block0.fc2.weight", "block0.fc2.bias"] {
            let t = store.get_mut(&format!("{NAMESPACE}.{name}")).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = Rng::new(12);
        let x0 = rng.normal_tensor::<f64>(&[3, 8]);
        let mut tape = Tape::new();
        let vars = store.register(&mut tape);
        let x = tape.leaf(x0.clone());
        let y = self_attention_block_on(&mut tape, &vars, &format!("{NAMESPACE}.block0"), 2, x)
            .unwrap();
        assert_eq!(tape.value(y).data(), x0.data());
    }

    #[test]
    fn patch_permutation_equivariance_with_zero_pos_embed() {
        let cfg = PromptEncoderConfig {
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
        };
        let mut store = setup(&cfg, 8, 21);
        {
            let pos = store
                .get_mut(&format!("{NAMESPACE}.pos_embed"))
                .unwrap();
            for v in pos.data_mut() {
                *v = 0.0;
            }
        }
        // 8x8 image, patch 4 -> 4 patches; swap the two top patches
        let mut rng = Rng::new(22);
        let cp = rng.uniform_tensor::<f64>(&[3, 8, 8], 0.0, 1.0);
        let mut swapped = cp.clone();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let a = c * 64 + y * 8 + x;
                    let b = c * 64 + y * 8 + (x + 4);
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let ctx = encode_prompt(&cp, &store, &cfg).unwrap();
        let ctx_swapped = encode_prompt(&swapped, &store, &cfg).unwrap();
        let d = cfg.dim;
        // class token unchanged, patch tokens 1 and 2 swap places
        for j in 0..d {
            let get = |t: &Tensor<f64>, r: usize, c: usize| t.data()[r * d + c];
            assert!((get(&ctx.tokens, 0, j) - get(&ctx_swapped.tokens, 0, j)).abs() < 1e-9);
            assert!((get(&ctx.tokens, 1, j) - get(&ctx_swapped.tokens, 2, j)).abs() < 1e-9);
            assert!((get(&ctx.tokens, 2, j) - get(&ctx_swapped.tokens, 1, j)).abs() < 1e-9);
            assert!((get(&ctx.tokens, 3, j) - get(&ctx_swapped.tokens, 3, j)).abs() < 1e-9);
            assert!((get(&ctx.tokens, 4, j) - get(&ctx_swapped.tokens, 4, j)).abs() < 1e-9);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = PromptEncoderConfig {
            patch: 4,
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        };
        let store = setup(&cfg, 8, 31);
        let mut rng = Rng::new(32);
        let x0 = rng.normal_tensor::<f64>(&[3, 8]);
        let params: NamedTensors<f64> = store.as_map().clone();
        let build = |tape: &mut Tape<f64>, vars: &std::collections::BTreeMap<String, crate::numerics::Var>| {
            let vm = VarMap::from_map(vars.clone());
            let x = tape.leaf(x0.clone());
            let y = self_attention_block_on(tape, &vm, &format!("{NAMESPACE}.block0"), 2, x)?;
            let sq = tape.mul(y, y)?;
            tape.mean_all(sq)
        };
        let (_, grads) = crate::numerics::grad(&params, build).unwrap();
        let eval = |ps: &NamedTensors<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let mut vars = std::collections::BTreeMap::new();
            for (name, value) in ps {
                vars.insert(name.clone(), tape.leaf(value.clone()));
            }
            let vm = VarMap::from_map(vars);
            let x = tape.leaf(x0.clone());
            let y = self_attention_block_on(&mut tape, &vm, &format!("{NAMESPACE}.block0"), 2, x)?;
            let sq = tape.mul(y, y)?;
            let l = tape.mean_all(sq)?;
            Ok(tape.value(l).data()[0])
        };
        let mut rng = Rng::new(33);
        let mut checked = 0;
        for (name, g) in &grads {
            if !name.contains("block0") {
                continue;
            }
            let idx = rng.below(g.numel());
            let fd = crate::numerics::central_difference(&params, name, idx, 1e-4, eval).unwrap();
            let an = g.data()[idx];
            let re = crate::numerics::relative_error(an, fd);
            assert!(re < 1e-4, "{name}[{idx}]: analytic {an} vs fd {fd} (rel {re})");
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
