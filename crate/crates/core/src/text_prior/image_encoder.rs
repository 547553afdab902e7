//! Patch-embedding ViT encoder. Backbone weights are frozen; the query and value
//! projections of every attention block carry LoRA adapters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Var};
use crate::error::{ensure, Error, Result};
use crate::lora::LoraLinear;
use crate::nn::{Attention, Ctx, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore, Projection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub lora_rank: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { image_size: 224, patch: 16, dim: 96, depth: 2, heads: 4, mlp_ratio: 4, lora_rank: 4 }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.patch > 0 && self.image_size % self.patch == 0,
            Error::Config(format!("image size {} is not a multiple of patch {}", self.image_size, self.patch))
        );
        ensure!(
            self.heads > 0 && self.dim % self.heads == 0,
            Error::Config(format!("width {} not divisible by {} heads", self.dim, self.heads))
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: EncoderConfig,
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl ImageEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let p2 = config.patch * config.patch;
        let g = ParamGroup::Backbone;
        let patch_weight = store.normal("encoder.patch.weight", &[d, p2], (1.0 / p2 as f64).sqrt() * 4.0, g, false, rng);
        let patch_bias = store.filled("encoder.patch.bias", &[d, 1], 0.0, g, false);
        let pos = store.normal("encoder.pos", &[config.tokens(), d], 0.5, g, false, rng);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = format!("encoder.block{i}");
            let attn = Attention {
                q: Projection::Lora(LoraLinear::new(store, &format!("{name}.attn.q"), d, d, config.lora_rank, rng)?),
                k: Projection::Plain(Linear::new(store, &format!("{name}.attn.k"), d, d, g, false, rng)),
                v: Projection::Lora(LoraLinear::new(store, &format!("{name}.attn.v"), d, d, config.lora_rank, rng)?),
                out: Linear::new(store, &format!("{name}.attn.out"), d, d, g, false, rng),
                heads: config.heads,
                dim: d,
            };
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d, g, false),
                attn,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d, g, false),
                mlp: Mlp::new(store, &format!("{name}.mlp"), (d, d * config.mlp_ratio, d), g, false, rng),
            });
        }
        let norm = LayerNorm::new(store, "encoder.norm", d, g, false);
        Ok(Self { config, patch_weight, patch_bias, pos, blocks, norm })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        ensure!(
            shape.len() == 4 && shape[1] == 1 && shape[2] == s && shape[3] == s,
            Error::Shape(format!("encoder expects (B, 1, {s}, {s}) input, got {shape:?}"))
        );
        Ok(())
    }

    /// `(B, 1, S, S)` image to `f_sam (B, C, S/p, S/p)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        self.check_input(ctx.g.shape(image))?;
        let b = ctx.g.shape(image)[0];
        let (d, grid) = (self.config.dim, self.config.grid());
        let cols = ctx.g.unfold(image, self.config.patch, self.config.patch, 0);
        let w = ctx.p(self.patch_weight);
        let x = ctx.g.shared_matmul(w, cols, false);
        let bias = ctx.p(self.patch_bias);
        let x = ctx.g.add(x, bias);
        let x = ctx.g.permute(x, &[0, 2, 1]);
        let pos = ctx.p(self.pos);
        let mut x = ctx.g.add(x, pos);
        for block in &self.blocks {
            let h = block.norm1.forward(ctx, x);
            let h = block.attn.forward(ctx, h, h, h);
            x = ctx.g.add(x, h);
            let h = block.norm2.forward(ctx, x);
            let h = block.mlp.forward(ctx, h);
            x = ctx.g.add(x, h);
        }
        let x = self.norm.forward(ctx, x);
        let x = ctx.g.permute(x, &[0, 2, 1]);
        Ok(ctx.g.reshape(x, &[b, d, grid, grid]))
    }

    pub fn lora_layers(&self) -> Vec<&LoraLinear> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.attn.q, &b.attn.v])
            .filter_map(|p| match p {
                Projection::Lora(l) => Some(l),
                Projection::Plain(_) => None,
            })
            .collect()
    }
}
