//! Frozen ViT image encoder with trainable prior-injection adapters.
//!
//! The backbone (patch embedding + transformer blocks) is seeded-random
//! and never trains; externally supplied weights can be loaded through the
//! checkpoint format. Adapters run after selected blocks: a first
//! cross-attention lets the prior tokens read the ViT stream (enhance),
//! a second one writes the enhanced prior back into the ViT stream
//! through a bottleneck scaled by a zero-initialized gate, so at init the
//! encoder is exactly the plain frozen backbone. A 1x1-conv side head
//! upsampled to image resolution provides the pseudo-mask logits.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{init_uniform, init_xavier, ParamGroup, ParamId, ParamStore, StagedParams};
use crate::tensor::{Real, Tape, Tensor, ValId};

/// Q/K/V/out projection set for (self or cross) attention.
pub struct Attention {
    pub wq: ParamId,
    pub bq: ParamId,
    /// Key projection carries no bias: a constant key shift cancels in
    /// softmax, so the parameter would be exactly inert.
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: ParamGroup,
        seed: u64,
        dim: usize,
        heads: usize,
    ) -> Self {
        let mut lin = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            let w = store.add(format!("{name}.w"), group, init_xavier(seed, &format!("{name}.w"), vec![dim, dim], dim, dim));
            let b = store.add(format!("{name}.b"), group, Tensor::zeros(vec![dim]));
            (w, b)
        };
        let (wq, bq) = lin("q");
        let (wv, bv) = lin("v");
        let (wo, bo) = lin("out");
        let wk = store.add(
            format!("{prefix}.k.w"),
            group,
            init_xavier(seed, &format!("{prefix}.k.w"), vec![dim, dim], dim, dim),
        );
        Attention { wq, bq, wk, wv, bv, wo, bo, heads, dim }
    }

    /// Scaled dot-product attention; queries come from `q_in` [tq, dim],
    /// keys/values from `kv_in` [tk, dim].
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, q_in: ValId, kv_in: ValId) -> Result<ValId> {
        let tq = tape.shape(q_in)[0];
        let tk = tape.shape(kv_in)[0];
        let q = tape.linear(q_in, staged.val(self.wq), Some(staged.val(self.bq)))?;
        let k = tape.linear(kv_in, staged.val(self.wk), None)?;
        let v = tape.linear(kv_in, staged.val(self.wv), Some(staged.val(self.bv)))?;
        let hd = self.dim / self.heads;
        let mixed = if self.heads == 1 {
            let kt = tape.transpose_last2(k)?;
            let scores = tape.matmul(q, kt)?;
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let weights = tape.softmax(scaled)?;
            tape.matmul(weights, v)?
        } else {
            let h = self.heads;
            let q3 = tape.reshape(q, vec![tq, h, hd])?;
            let qh = tape.permute(q3, &[1, 0, 2])?;
            let k3 = tape.reshape(k, vec![tk, h, hd])?;
            let kh = tape.permute(k3, &[1, 2, 0])?;
            let v3 = tape.reshape(v, vec![tk, h, hd])?;
            let vh = tape.permute(v3, &[1, 0, 2])?;
            let scores = tape.matmul(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let weights = tape.softmax(scaled)?;
            let out = tape.matmul(weights, vh)?;
            let back = tape.permute(out, &[1, 0, 2])?;
            tape.reshape(back, vec![tq, self.dim])?
        };
        tape.linear(mixed, staged.val(self.wo), Some(staged.val(self.bo)))
    }
}

/// Learned per-axis affine applied after the parameter-free layer norm.
pub struct Affine {
    pub g: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, group: ParamGroup, dim: usize) -> Self {
        Affine {
            g: store.add(format!("{prefix}.g"), group, Tensor::filled(vec![dim], T::one())),
            b: store.add(format!("{prefix}.b"), group, Tensor::zeros(vec![dim])),
        }
    }

    pub fn norm<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, x: ValId) -> Result<ValId> {
        let dim = *tape.shape(x).last().unwrap();
        let n = tape.layer_norm(x)?;
        let g = tape.reshape(staged.val(self.g), vec![1, dim])?;
        let b = tape.reshape(staged.val(self.b), vec![1, dim])?;
        let scaled = tape.mul(n, g)?;
        tape.add(scaled, b)
    }
}

/// Pre-norm transformer block: MHSA + residual, MLP(GELU) + residual.
pub struct VitBlock {
    pub ln1: Affine,
    pub attn: Attention,
    pub ln2: Affine,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

impl VitBlock {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        group: ParamGroup,
        seed: u64,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let hidden = dim * mlp_ratio;
        VitBlock {
            ln1: Affine::init(store, &format!("{prefix}.ln1"), group, dim),
            attn: Attention::init(store, &format!("{prefix}.attn"), group, seed, dim, heads),
            ln2: Affine::init(store, &format!("{prefix}.ln2"), group, dim),
            mlp_w1: store.add(
                format!("{prefix}.mlp.w1"),
                group,
                init_xavier(seed, &format!("{prefix}.mlp.w1"), vec![dim, hidden], dim, hidden),
            ),
            mlp_b1: store.add(format!("{prefix}.mlp.b1"), group, Tensor::zeros(vec![hidden])),
            mlp_w2: store.add(
                format!("{prefix}.mlp.w2"),
                group,
                init_xavier(seed, &format!("{prefix}.mlp.w2"), vec![hidden, dim], hidden, dim),
            ),
            mlp_b2: store.add(format!("{prefix}.mlp.b2"), group, Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, x: ValId) -> Result<ValId> {
        let normed = self.ln1.norm(tape, staged, x)?;
        let attn_out = self.attn.forward(tape, staged, normed, normed)?;
        let x = tape.add(x, attn_out)?;
        let normed = self.ln2.norm(tape, staged, x)?;
        let h = tape.linear(normed, staged.val(self.mlp_w1), Some(staged.val(self.mlp_b1)))?;
        let h = tape.gelu(h)?;
        let mlp_out = tape.linear(h, staged.val(self.mlp_w2), Some(staged.val(self.mlp_b2)))?;
        tape.add(x, mlp_out)
    }
}

/// One injection point: enhance the prior from the ViT stream, then write
/// it back through a zero-gated bottleneck.
pub struct Adapter {
    pub enhance: Attention,
    pub inject: Attention,
    pub gamma: ParamId,
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub up_w: ParamId,
    pub up_b: ParamId,
}

impl Adapter {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, seed: u64, dim: usize, r: usize) -> Self {
        let g = ParamGroup::Adapter;
        Adapter {
            enhance: Attention::init(store, &format!("{prefix}.enhance"), g, seed, dim, 1),
            inject: Attention::init(store, &format!("{prefix}.inject"), g, seed, dim, 1),
            // Gate starts closed: the encoder is exactly the frozen
            // backbone at step 0.
            gamma: store.add(format!("{prefix}.gamma"), g, Tensor::zeros(vec![1])),
            down_w: store.add(
                format!("{prefix}.down.w"),
                g,
                init_xavier(seed, &format!("{prefix}.down.w"), vec![dim, r], dim, r),
            ),
            down_b: store.add(format!("{prefix}.down.b"), g, Tensor::zeros(vec![r])),
            up_w: store.add(
                format!("{prefix}.up.w"),
                g,
                init_xavier(seed, &format!("{prefix}.up.w"), vec![r, dim], r, dim),
            ),
            up_b: store.add(format!("{prefix}.up.b"), g, Tensor::zeros(vec![dim])),
        }
    }

    /// Returns (vit', prior'): prior' is threaded to the next injection.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedParams,
        vit: ValId,
        prior: ValId,
    ) -> Result<(ValId, ValId)> {
        let read = self.enhance.forward(tape, staged, prior, vit)?;
        let prior2 = tape.add(prior, read)?;
        let gathered = self.inject.forward(tape, staged, vit, prior2)?;
        let down = tape.linear(gathered, staged.val(self.down_w), Some(staged.val(self.down_b)))?;
        let mid = tape.gelu(down)?;
        let up = tape.linear(mid, staged.val(self.up_w), Some(staged.val(self.up_b)))?;
        let gamma = tape.reshape(staged.val(self.gamma), vec![1, 1])?;
        let gated = tape.mul(up, gamma)?;
        let vit2 = tape.add(vit, gated)?;
        Ok((vit2, prior2))
    }
}

pub struct EncoderOutput {
    /// [gh, gw, dim] patch-grid embedding.
    pub embeddings: ValId,
    /// [h, w] pseudo-mask logits from the side head.
    pub pseudo_logits: ValId,
    pub grid: (usize, usize),
}

pub struct VitEncoder {
    pub patch: usize,
    pub dim: usize,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub blocks: Vec<VitBlock>,
    pub inject_at: Vec<usize>,
    pub adapters: Vec<Adapter>,
    pub prior_proj_w: ParamId,
    pub prior_proj_b: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl VitEncoder {
    pub fn init<T: Real>(store: &mut ParamStore<T>, seed: u64, cfg: &ModelConfig) -> Self {
        let dim = cfg.dim;
        let in_width = cfg.patch * cfg.patch * 3;
        let patch_w = store.add(
            "vit.patch.w",
            ParamGroup::Backbone,
            init_xavier(seed, "vit.patch.w", vec![in_width, dim], in_width, dim),
        );
        let patch_b = store.add("vit.patch.b", ParamGroup::Backbone, Tensor::zeros(vec![dim]));
        let blocks = (0..cfg.depth)
            .map(|i| VitBlock::init(store, &format!("vit.block{i}"), ParamGroup::Backbone, seed, dim, cfg.heads, cfg.mlp_ratio))
            .collect();
        let adapters = cfg
            .inject_at
            .iter()
            .map(|&i| Adapter::init(store, &format!("adapter{i}"), seed, dim, cfg.adapter_dim))
            .collect();
        let c_prior = 6 * cfg.c0;
        let prior_proj_w = store.add(
            "adapter.prior_proj.w",
            ParamGroup::Adapter,
            init_xavier(seed, "adapter.prior_proj.w", vec![c_prior, dim], c_prior, dim),
        );
        let prior_proj_b = store.add("adapter.prior_proj.b", ParamGroup::Adapter, Tensor::zeros(vec![dim]));
        // Zero head: an untrained model emits exactly-zero logits
        // (probability 0.5 everywhere).
        let head_w = store.add("head.w", ParamGroup::EncoderHead, Tensor::zeros(vec![1, 1, dim, 1]));
        let head_b = store.add("head.b", ParamGroup::EncoderHead, Tensor::zeros(vec![1]));
        VitEncoder {
            patch: cfg.patch,
            dim,
            patch_w,
            patch_b,
            blocks,
            inject_at: cfg.inject_at.clone(),
            adapters,
            prior_proj_w,
            prior_proj_b,
            head_w,
            head_b,
        }
    }

    /// Patch tokens plus fixed sinusoidal position codes: [h,w,3] -> [t, dim].
    pub fn patch_embed<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, image: ValId) -> Result<ValId> {
        let sh = tape.shape(image).to_vec();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::shape("patch_embed", format!("image {:?}", sh)));
        }
        if sh[0] % self.patch != 0 || sh[1] % self.patch != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("patch {} must divide image {}x{}", self.patch, sh[0], sh[1]),
            ));
        }
        let raw = tape.patch_extract(image, self.patch)?;
        let content = tape.linear(raw, staged.val(self.patch_w), Some(staged.val(self.patch_b)))?;
        let t = tape.shape(content)[0];
        let pos = tape.constant(&sinusoidal_positions::<T>(t, self.dim))?;
        tape.add(content, pos)
    }

    /// Average-pool the prior map to the patch grid, then project to token
    /// width: [h,w,6*c0] -> [t, dim].
    pub fn prior_tokenize<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, prior_map: ValId) -> Result<ValId> {
        let pooled = tape.avg_pool2d(prior_map, self.patch)?;
        let sh = tape.shape(pooled).to_vec();
        let flat = tape.reshape(pooled, vec![sh[0] * sh[1], sh[2]])?;
        tape.linear(flat, staged.val(self.prior_proj_w), Some(staged.val(self.prior_proj_b)))
    }

    /// 1x1 conv to one channel then bilinear upsample by the patch factor;
    /// returns [h, w] logits.
    pub fn mask_head<T: Real>(&self, tape: &mut Tape<T>, staged: &StagedParams, emb_grid: ValId) -> Result<ValId> {
        let logits1 = tape.conv2d(emb_grid, staged.val(self.head_w), Some(staged.val(self.head_b)), 1)?;
        let up = tape.upsample_bilinear(logits1, self.patch)?;
        let sh = tape.shape(up).to_vec();
        tape.reshape(up, vec![sh[0], sh[1]])
    }

    /// Backbone + adapter injection. `prior_tokens` of [t, dim]; pass
    /// `None` to run the plain frozen backbone (also what gamma = 0
    /// reproduces exactly).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedParams,
        image: ValId,
        prior_tokens: Option<ValId>,
    ) -> Result<EncoderOutput> {
        let sh = tape.shape(image).to_vec();
        let grid = (sh[0] / self.patch, sh[1] / self.patch);
        let mut tokens = self.patch_embed(tape, staged, image)?;
        let mut prior = prior_tokens;
        for (bi, block) in self.blocks.iter().enumerate() {
            tokens = block.forward(tape, staged, tokens)?;
            if let (Some(p), Some(ai)) = (prior, self.inject_at.iter().position(|&x| x == bi)) {
                let (t2, p2) = self.adapters[ai].forward(tape, staged, tokens, p)?;
                tokens = t2;
                prior = Some(p2);
            }
        }
        let emb = tape.reshape(tokens, vec![grid.0, grid.1, self.dim])?;
        let pseudo = self.mask_head(tape, staged, emb)?;
        Ok(EncoderOutput { embeddings: emb, pseudo_logits: pseudo, grid })
    }
}

/// Fixed sinusoidal position codes over the flattened token index.
pub fn sinusoidal_positions<T: Real>(t_count: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); t_count * dim];
    for t in 0..t_count {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let freq = (10000f64).powf(-2.0 * pair / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + j] = T::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![t_count, dim], data).expect("finite positions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::gradcheck_store;
    use crate::rng::CounterRng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            c0: 2,
            dim: 8,
            depth: 1,
            heads: 2,
            inject_at: vec![0],
            adapter_dim: 4,
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    fn rand_image(rng: &mut CounterRng, h: usize, w: usize) -> Tensor<f64> {
        Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn patch_embed_zero_image_gives_position_codes() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 1, &cfg);
        let img = Tensor::zeros(vec![16, 16, 3]);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let ii = tape.constant(&img).unwrap();
        let tokens = enc.patch_embed(&mut tape, &staged, ii).unwrap();
        assert_eq!(tape.shape(tokens), &[4, 8]);
        let pos = sinusoidal_positions::<f64>(4, 8);
        assert_eq!(tape.data(tokens), pos.data());
    }

    #[test]
    fn patch_embed_rejects_indivisible_sizes() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 1, &cfg);
        let img = Tensor::zeros(vec![12, 16, 3]);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let ii = tape.constant(&img).unwrap();
        assert!(enc.patch_embed(&mut tape, &staged, ii).is_err());
    }

    #[test]
    fn patch_permutation_permutes_token_content() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 2, &cfg);
        let mut rng = CounterRng::new(3);
        let img = rand_image(&mut rng, 16, 16);
        // Swap the two top patches (patch grid is 2x2 of 8x8 patches).
        let mut swapped = img.data().to_vec();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = (y * 16 + x) * 3 + c;
                    let b = (y * 16 + x + 8) * 3 + c;
                    swapped.swap(a, b);
                }
            }
        }
        let img_swapped = Tensor::new(vec![16, 16, 3], swapped).unwrap();

        let embed = |im: &Tensor<f64>| {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape, |_| false).unwrap();
            let ii = tape.constant(im).unwrap();
            let t = enc.patch_embed(&mut tape, &staged, ii).unwrap();
            tape.data(t).to_vec()
        };
        let base = embed(&img);
        let perm = embed(&img_swapped);
        let pos = sinusoidal_positions::<f64>(4, 8);
        // Content components (tokens minus position codes) swap between
        // token 0 and token 1; tokens 2, 3 are untouched.
        let content = |v: &[f64], t: usize| -> Vec<f64> {
            (0..8).map(|j| v[t * 8 + j] - pos.data()[t * 8 + j]).collect()
        };
        for j in 0..8 {
            assert!((content(&perm, 0)[j] - content(&base, 1)[j]).abs() < 1e-12);
            assert!((content(&perm, 1)[j] - content(&base, 0)[j]).abs() < 1e-12);
            assert!((content(&perm, 2)[j] - content(&base, 2)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_block_is_identity() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 4, &cfg);
        let blk = &enc.blocks[0];
        for id in [
            blk.attn.wq, blk.attn.bq, blk.attn.wk, blk.attn.wv, blk.attn.bv,
            blk.attn.wo, blk.attn.bo, blk.mlp_w1, blk.mlp_b1, blk.mlp_w2, blk.mlp_b2,
        ] {
            let sh = store.tensor(id).shape().to_vec();
            *store.tensor_mut(id) = Tensor::zeros(sh);
        }
        let mut rng = CounterRng::new(5);
        let x = Tensor::new(vec![4, 8], (0..32).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let xi = tape.constant(&x).unwrap();
        let y = enc.blocks[0].forward(&mut tape, &staged, xi).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn single_token_block_matches_closed_form() {
        // With one token, attention weights collapse to 1 and the output
        // is out-proj(v(ln(x))); the block is two explicit residuals.
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 6, &cfg);
        let mut rng = CounterRng::new(7);
        let x = Tensor::new(vec![1, 8], (0..8).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let xi = tape.constant(&x).unwrap();
        let got = enc.blocks[0].forward(&mut tape, &staged, xi).unwrap();

        let blk = &enc.blocks[0];
        let mut check = Tape::new();
        let st = store.stage(&mut check, |_| false).unwrap();
        let xi = check.constant(&x).unwrap();
        let n1 = blk.ln1.norm(&mut check, &st, xi).unwrap();
        let v = check.linear(n1, st.val(blk.attn.wv), Some(st.val(blk.attn.bv))).unwrap();
        let attn = check.linear(v, st.val(blk.attn.wo), Some(st.val(blk.attn.bo))).unwrap();
        let x1 = check.add(xi, attn).unwrap();
        let n2 = blk.ln2.norm(&mut check, &st, x1).unwrap();
        let h = check.linear(n2, st.val(blk.mlp_w1), Some(st.val(blk.mlp_b1))).unwrap();
        let h = check.gelu(h).unwrap();
        let m = check.linear(h, st.val(blk.mlp_w2), Some(st.val(blk.mlp_b2))).unwrap();
        let expect = check.add(x1, m).unwrap();

        for (a, b) in tape.data(got).iter().zip(check.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gamma_zero_stream_is_untouched() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 8, &cfg);
        let mut rng = CounterRng::new(9);
        let vit = Tensor::new(vec![4, 8], (0..32).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let prior = Tensor::new(vec![4, 8], (0..32).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let vi = tape.constant(&vit).unwrap();
        let pi = tape.constant(&prior).unwrap();
        let (v2, p2) = enc.adapters[0].forward(&mut tape, &staged, vi, pi).unwrap();
        assert_eq!(tape.data(v2), vit.data(), "gamma=0 must leave the ViT stream bit-identical");
        assert_ne!(tape.data(p2), prior.data(), "the prior stream is enhanced");
    }

    #[test]
    fn inert_value_path_leaves_both_streams() {
        // Zero prior tokens + zeroed value/out projections: the attention
        // reads carry nothing, so neither stream moves.
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 10, &cfg);
        let ad = &enc.adapters[0];
        for id in [ad.enhance.wv, ad.enhance.bv, ad.enhance.bo, ad.inject.wv, ad.inject.bv, ad.inject.bo] {
            let sh = store.tensor(id).shape().to_vec();
            *store.tensor_mut(id) = Tensor::zeros(sh);
        }
        let ew = store.tensor(ad.enhance.wo).shape().to_vec();
        *store.tensor_mut(ad.enhance.wo) = Tensor::zeros(ew);
        let iw = store.tensor(ad.inject.wo).shape().to_vec();
        *store.tensor_mut(ad.inject.wo) = Tensor::zeros(iw);

        let mut rng = CounterRng::new(11);
        let vit = Tensor::new(vec![4, 8], (0..32).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let prior = Tensor::zeros(vec![4, 8]);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let vi = tape.constant(&vit).unwrap();
        let pi = tape.constant(&prior).unwrap();
        let (v2, p2) = enc.adapters[0].forward(&mut tape, &staged, vi, pi).unwrap();
        assert_eq!(tape.data(v2), vit.data());
        assert_eq!(tape.data(p2), prior.data());
    }

    #[test]
    fn prior_tokenize_pools_blocks() {
        let mut cfg = tiny_cfg();
        cfg.c0 = 1;
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 12, &cfg);
        // 16x16 map of 6 channels: block value = grid row index.
        let mut data = vec![0.0f64; 16 * 16 * 6];
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..6 {
                    data[(y * 16 + x) * 6 + c] = (y / 8) as f64 * 10.0 + c as f64;
                }
            }
        }
        let m = Tensor::new(vec![16, 16, 6], data).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let mi = tape.constant(&m).unwrap();
        let pooled = tape.avg_pool2d(mi, 8).unwrap();
        // Hand-pooled: constant per block, so the mean equals the value.
        for gy in 0..2 {
            for gx in 0..2 {
                for c in 0..6 {
                    let v = tape.data(pooled)[(gy * 2 + gx) * 6 + c];
                    assert!((v - (gy as f64 * 10.0 + c as f64)).abs() < 1e-12);
                }
            }
        }
        let tokens = enc.prior_tokenize(&mut tape, &staged, mi).unwrap();
        assert_eq!(tape.shape(tokens), &[4, 8]);
    }

    #[test]
    fn mask_head_zero_init_gives_half_probability() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 13, &cfg);
        let mut rng = CounterRng::new(14);
        let img = rand_image(&mut rng, 16, 16);
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let ii = tape.constant(&img).unwrap();
        let out = enc.forward(&mut tape, &staged, ii, None).unwrap();
        assert_eq!(tape.shape(out.pseudo_logits), &[16, 16]);
        assert!(tape.data(out.pseudo_logits).iter().all(|&v| v == 0.0));
        let probs = tape.sigmoid(out.pseudo_logits).unwrap();
        assert!(tape.data(probs).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn default_config_shapes() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 15, &cfg);
        let mut rng = CounterRng::new(16);
        let img = rand_image(&mut rng, 32, 32);
        let prior_map = Tensor::new(
            vec![32, 32, 96],
            (0..32 * 32 * 96).map(|_| rng.range(-0.1, 0.1)).collect::<Vec<_>>(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape, |_| false).unwrap();
        let ii = tape.constant(&img).unwrap();
        let mi = tape.constant(&prior_map).unwrap();
        let pt = enc.prior_tokenize(&mut tape, &staged, mi).unwrap();
        assert_eq!(tape.shape(pt), &[16, 64]);
        let out = enc.forward(&mut tape, &staged, ii, Some(pt)).unwrap();
        assert_eq!(tape.shape(out.embeddings), &[4, 4, 64]);
        assert_eq!(tape.shape(out.pseudo_logits), &[32, 32]);
    }

    #[test]
    fn gamma_zero_encoder_equals_prior_free_backbone() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 17, &cfg);
        let mut rng = CounterRng::new(18);
        let img = rand_image(&mut rng, 16, 16);
        let prior_tokens = Tensor::new(vec![4, 8], (0..32).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();

        let run = |with_prior: bool| {
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape, |_| false).unwrap();
            let ii = tape.constant(&img).unwrap();
            let p = with_prior.then(|| tape.constant(&prior_tokens).unwrap());
            let out = enc.forward(&mut tape, &staged, ii, p).unwrap();
            tape.data(out.embeddings).to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn adapter_injection_gradcheck() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = VitEncoder::init(&mut store, 19, &cfg);
        let mut rng = CounterRng::new(20);
        let vit = Tensor::new(vec![3, 8], (0..24).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        let prior = Tensor::new(vec![3, 8], (0..24).map(|_| rng.range(-1.0, 1.0)).collect::<Vec<_>>()).unwrap();
        // Open the gate so its path is exercised.
        *store.tensor_mut(enc.adapters[0].gamma) = Tensor::new(vec![1], vec![0.37]).unwrap();
        let err = gradcheck_store(
            &mut store,
            |e| e.group == ParamGroup::Adapter,
            |tape, staged| {
                let vi = tape.constant(&vit)?;
                let pi = tape.constant(&prior)?;
                let (v2, p2) = enc.adapters[0].forward(tape, staged, vi, pi)?;
                let joined = tape.concat(&[v2, p2], 0)?;
                let sq = tape.mul(joined, joined)?;
                tape.sum(sq)
            },
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "adapter fd err {err}");
    }
}
