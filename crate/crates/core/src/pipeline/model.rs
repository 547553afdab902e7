//! The assembled segmentation network.

use ndarray::{Array1, Array3, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, ModelConfig, PromptSourceConfig};
use crate::autodiff::{Real, Var};
use crate::decoder_fusion::{FusionConfig, MaskDecoder, MultiLevelFusion, UpsampleStage};
use crate::error::{ensure, Error, Result};
use crate::nn::{Conv1x1, Ctx, Mlp, ParamGroup, ParamId, ParamStore};
use crate::text_prior::{
    generate_prompts, HashTextEncoder, ImageEncoder, LlmClient, LlmConfig, PriorAligner, PromptMode, TextPrompt,
};
use crate::{ORGANS, NUM_CLASSES};

/// Floor inside the log that turns refined probabilities into low-path logits.
pub const PROB_FLOOR: f64 = 1e-6;
const HEAD_WIDTH: usize = 32;

/// Text prompts for every organ according to the config. LLM mode without an
/// endpoint in the environment falls back to templates.
pub fn organ_prompts(source: PromptSourceConfig, cache: Option<std::path::PathBuf>) -> Result<Vec<TextPrompt>> {
    match (source, LlmConfig::from_env()) {
        (PromptSourceConfig::Llm, Some(mut cfg)) => {
            cfg.cache_path = cache;
            let client = LlmClient::new(cfg)?;
            generate_prompts(&ORGANS, PromptMode::Client(&client))
        }
        _ => generate_prompts(&ORGANS, PromptMode::Template),
    }
}

/// Mean text embedding over the organ prompts.
pub fn pooled_text(prompts: &[TextPrompt], dim: usize) -> Result<Array1<f64>> {
    let emb = HashTextEncoder::new(dim)?.encode::<f64>(prompts)?;
    Ok(emb.values.mean_axis(Axis(0)).expect("non-empty prompts"))
}

/// Upsampling head from the refined 56x56 masks and the fusion map to 224x224 logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub reduce: Conv1x1,
    pub up1: UpsampleStage,
    pub up2: UpsampleStage,
    pub mix: Conv1x1,
    pub out: Conv1x1,
    pub image_skip: bool,
}

impl Head {
    fn new<T: Real>(store: &mut ParamStore<T>, c_in: usize, image_skip: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let g = ParamGroup::Head;
        let w = HEAD_WIDTH;
        let last = w / 4;
        Ok(Self {
            reduce: Conv1x1::new(store, "head.reduce", c_in, w, g, rng),
            up1: UpsampleStage::with_out(store, "head.up1", w, w / 2, g, rng)?,
            up2: UpsampleStage::with_out(store, "head.up2", w / 2, last, g, rng)?,
            mix: Conv1x1::new(store, "head.mix", last + usize::from(image_skip), last, g, rng),
            out: Conv1x1::new(store, "head.out", last, NUM_CLASSES, g, rng),
            image_skip,
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, masks: Var, f_fusion: Var, image: Var) -> Result<Var> {
        let x = ctx.g.concat(&[masks, f_fusion], 1);
        let x = self.reduce.forward(ctx, x);
        let x = ctx.g.gelu(x);
        let x = self.up1.forward(ctx, x)?;
        let x = self.up2.forward(ctx, x)?;
        let x = if self.image_skip { ctx.g.concat(&[x, image], 1) } else { x };
        let x = self.mix.forward(ctx, x);
        let x = ctx.g.gelu(x);
        Ok(self.out.forward(ctx, x))
    }
}

#[derive(Clone, Debug)]
pub struct PgSeg {
    pub config: ModelConfig,
    pub ablation: Ablation,
    pub encoder: ImageEncoder,
    /// Frozen pooled prompt embedding `(1, d_text)`; only with the prior.
    pub text: Option<ParamId>,
    pub aligner: Option<PriorAligner>,
    pub decoder: MaskDecoder,
    pub fusion: MultiLevelFusion,
    pub token_mlp: Mlp,
    pub refiner: Option<crate::mask_optimizer::Refiner>,
    pub head: Head,
}

/// Forward-pass handles.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    /// `(B, N, 56, 56)` log-probabilities of the refined masks.
    pub low: Var,
    /// `(B, N, 224, 224)` head logits.
    pub high: Var,
    pub m0: Var,
    pub refined: Var,
    pub f_fusion: Var,
    pub guide: Option<Var>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl PgSeg {
    /// Builds the model and its parameters. Each module draws from its own RNG
    /// stream, so disabling one module leaves the others' initial weights unchanged.
    pub fn new<T: Real>(
        config: &ModelConfig,
        ablation: Ablation,
        text: &Array1<f64>,
        seed: u64,
    ) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        ensure!(
            text.len() == config.text_dim,
            Error::Shape(format!("text embedding has {} features, config says {}", text.len(), config.text_dim))
        );
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let encoder = ImageEncoder::new(&mut store, enc.clone(), &mut stream(seed, 1))?;
        let (text_id, aligner) = if ablation.fgmpa {
            let value = ArrayD::from_shape_vec(IxDyn(&[1, text.len()]), text.iter().map(|&v| T::lit(v)).collect())
                .expect("row");
            let id = store.add("prior.text", value, ParamGroup::Prior, false);
            let aligner = PriorAligner::new(&mut store, enc.dim, config.text_dim, enc.tokens(), &mut stream(seed, 2));
            (Some(id), Some(aligner))
        } else {
            (None, None)
        };
        let decoder =
            MaskDecoder::new(&mut store, config.decoder.clone(), config.classes, enc.tokens(), &mut stream(seed, 3))?;
        let fusion_cfg = FusionConfig {
            trans_channels: config.decoder.trans_channels,
            guide_channels: enc.dim,
            use_mlff: ablation.mlff,
            use_guide: ablation.fgmpa,
        };
        let cf = fusion_cfg.fusion_channels();
        let fusion = MultiLevelFusion::new(&mut store, fusion_cfg, &mut stream(seed, 4))?;
        let d = config.decoder.dim;
        let token_mlp =
            Mlp::new(&mut store, "decoder.token_mlp", (d, d, cf), ParamGroup::Decoder, true, &mut stream(seed, 5));
        let refiner = ablation
            .imo
            .then(|| crate::mask_optimizer::Refiner::new(&mut store, config.classes, cf, d, &mut stream(seed, 6)));
        let head = Head::new(&mut store, config.classes + cf, config.head_image_skip, &mut stream(seed, 7))?;
        let model = Self {
            config: config.clone(),
            ablation,
            encoder,
            text: text_id,
            aligner,
            decoder,
            fusion,
            token_mlp,
            refiner,
            head,
        };
        Ok((model, store))
    }

    pub fn refine_steps(&self) -> usize {
        if self.refiner.is_some() { self.config.refine_steps } else { 0 }
    }

    /// `(B, 1, S, S)` image to both prediction paths.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<ModelOutputs> {
        let f_sam = self.encoder.forward(ctx, image)?;
        let b = ctx.g.shape(image)[0];
        let guide = match (&self.aligner, self.text) {
            (Some(aligner), Some(text)) => {
                let t = ctx.p(text);
                let zeros = ctx.g.constant(ArrayD::zeros(IxDyn(&[b, self.config.text_dim])));
                let f_text = ctx.g.add(zeros, t);
                Some(aligner.forward(ctx, f_sam, f_text)?.guide)
            }
            _ => None,
        };
        let dec = self.decoder.forward(ctx, f_sam)?;
        let f_fusion = self.fusion.forward(ctx, dec.f_trans, guide)?;
        let fs = ctx.g.shape(f_fusion).to_vec();
        let (cf, h, w) = (fs[1], fs[2], fs[3]);
        let emb = self.token_mlp.forward(ctx, dec.tokens);
        let flat = ctx.g.reshape(f_fusion, &[b, cf, h * w]);
        let m0 = ctx.g.bmm(emb, flat, false);
        let m0 = ctx.g.sigmoid(m0);
        let m0 = ctx.g.reshape(m0, &[b, self.config.classes, h, w]);
        let refined = match &self.refiner {
            Some(r) => r.forward(ctx, m0, f_fusion, dec.tokens, self.config.refine_steps)?,
            None => m0,
        };
        let low = ctx.g.add_scalar(refined, T::lit(PROB_FLOOR));
        let low = ctx.g.ln(low);
        let high = self.head.forward(ctx, refined, f_fusion, image)?;
        Ok(ModelOutputs { low, high, m0, refined, f_fusion, guide })
    }

    /// Graph-free prediction: per-pixel argmax of the high-resolution logits,
    /// plus the guide matrix when the prior is active.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: &ArrayD<T>) -> Result<Prediction<T>> {
        self.encoder.check_input(images.shape())?;
        let mut ctx = Ctx::frozen(store);
        let x = ctx.g.constant(images.clone());
        let out = self.forward(&mut ctx, x)?;
        let logits = ctx.g.value(out.high);
        let labels = argmax_classes(logits);
        let guide = out.guide.map(|g| ctx.g.value(g).clone());
        Ok(Prediction { labels, logits: logits.clone(), guide })
    }
}

pub struct Prediction<T> {
    /// `(B, S, S)` class ids.
    pub labels: Array3<u8>,
    pub logits: ArrayD<T>,
    pub guide: Option<ArrayD<T>>,
}

/// Argmax over axis 1 of `(B, N, H, W)`. Ties go to the lower class id.
pub fn argmax_classes<T: Real>(logits: &ArrayD<T>) -> Array3<u8> {
    let s = logits.shape();
    let (b, n, h, w) = (s[0], s[1], s[2], s[3]);
    Array3::from_shape_fn((b, h, w), |(bi, y, x)| {
        let mut best = 0;
        for c in 1..n {
            if logits[[bi, c, y, x]] > logits[[bi, best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}
