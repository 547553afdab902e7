//! Mask-token transformer decoder and multi-level feature fusion: two learned
//! upsampling stages plus deformably aligned injection of the guide matrix.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{Attention, Conv1x1, ConvTranspose2x2, Ctx, LayerNorm, Linear, Mlp, ParamGroup, ParamId, ParamStore, Projection};

pub const MAX_OFFSET: f64 = 2.0;
const DEFORM_KERNEL: usize = 3;

/// Transformer output map `(B, C0, h, w)`, `C0` divisible by 4.
#[derive(Clone, Debug, PartialEq)]
pub struct TransFeature<T>(Array4<T>);

impl<T: Real> TransFeature<T> {
    pub fn new(values: Array4<T>) -> Result<Self> {
        ensure!(
            values.dim().1 % 4 == 0,
            Error::Config(format!("transformer width {} is not divisible by 4", values.dim().1))
        );
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array4<T> {
        &self.0
    }
}

/// Fused map `(B, C0/4, 4h, 4w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeature<T>(Array4<T>);

impl<T: Real> FusedFeature<T> {
    pub fn new(values: Array4<T>) -> Result<Self> {
        ensure!(values.iter().all(|v| v.is_finite()), Error::Numeric("fused feature has non-finite values".into()));
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array4<T> {
        &self.0
    }
}

fn attention<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Attention {
    let g = ParamGroup::Decoder;
    let lin = |store: &mut ParamStore<T>, part: &str, rng: &mut _| Linear::new(store, &format!("{name}.{part}"), dim, dim, g, true, rng);
    Attention {
        q: Projection::Plain(lin(store, "q", rng)),
        k: Projection::Plain(lin(store, "k", rng)),
        v: Projection::Plain(lin(store, "v", rng)),
        out: lin(store, "out", rng),
        heads,
        dim,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Channels of `F_trans`.
    pub trans_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { dim: 96, depth: 2, heads: 4, mlp_ratio: 4, trans_channels: 256 }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_t2i: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_i2t: Attention,
    pub norm4: LayerNorm,
}

/// Two-way transformer between learned per-class mask tokens and the image
/// tokens of `f_sam`.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub config: DecoderConfig,
    pub mask_tokens: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub trans_proj: Linear,
}

/// Decoder outputs: per-class mask encodings `(B, N, D)` and `F_trans (B, C0, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub tokens: Var,
    pub f_trans: Var,
}

impl MaskDecoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: DecoderConfig,
        classes: usize,
        image_tokens: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = config.dim;
        ensure!(
            config.heads > 0 && d % config.heads == 0,
            Error::Config(format!("decoder width {d} not divisible by {} heads", config.heads))
        );
        ensure!(
            config.trans_channels % 4 == 0,
            Error::Config(format!("transformer width {} is not divisible by 4", config.trans_channels))
        );
        let g = ParamGroup::Decoder;
        let mask_tokens = store.normal("decoder.mask_tokens", &[classes, d], 1.0, g, true, rng);
        let pos = store.normal("decoder.pos", &[image_tokens, d], 0.02, g, true, rng);
        let blocks = (0..config.depth)
            .map(|i| {
                let n = format!("decoder.block{i}");
                DecoderBlock {
                    self_attn: attention(store, &format!("{n}.self_attn"), d, config.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, g, true),
                    cross_t2i: attention(store, &format!("{n}.cross_t2i"), d, config.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, g, true),
                    mlp: Mlp::new(store, &format!("{n}.mlp"), (d, d * config.mlp_ratio, d), g, true, rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d, g, true),
                    cross_i2t: attention(store, &format!("{n}.cross_i2t"), d, config.heads, rng),
                    norm4: LayerNorm::new(store, &format!("{n}.norm4"), d, g, true),
                }
            })
            .collect();
        let trans_proj = Linear::new(store, "decoder.trans_proj", d, config.trans_channels, g, true, rng);
        Ok(Self { config, mask_tokens, pos, blocks, trans_proj })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_sam: Var) -> Result<DecoderOutput> {
        let s = ctx.g.shape(f_sam).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let pos_shape = ctx.store().value(self.pos).shape().to_vec();
        ensure!(
            c == self.config.dim && pos_shape[0] == h * w,
            Error::Shape(format!("decoder expects (B, {}, L = {}) features, got {s:?}", self.config.dim, pos_shape[0]))
        );
        let img = ctx.g.reshape(f_sam, &[b, c, h * w]);
        let mut img = ctx.g.permute(img, &[0, 2, 1]);
        let pos = ctx.p(self.pos);
        let tok = ctx.p(self.mask_tokens);
        let n = ctx.store().value(self.mask_tokens).shape()[0];
        let zeros = ctx.g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[b, n, c])));
        let mut t = ctx.g.add(zeros, tok);
        for blk in &self.blocks {
            let a = blk.self_attn.forward(ctx, t, t, t);
            let x = ctx.g.add(t, a);
            t = blk.norm1.forward(ctx, x);
            let keys = ctx.g.add(img, pos);
            let a = blk.cross_t2i.forward(ctx, t, keys, img);
            let x = ctx.g.add(t, a);
            t = blk.norm2.forward(ctx, x);
            let m = blk.mlp.forward(ctx, t);
            let x = ctx.g.add(t, m);
            t = blk.norm3.forward(ctx, x);
            let queries = ctx.g.add(img, pos);
            let a = blk.cross_i2t.forward(ctx, queries, t, t);
            let x = ctx.g.add(img, a);
            img = blk.norm4.forward(ctx, x);
        }
        let f = self.trans_proj.forward(ctx, img);
        let f = ctx.g.permute(f, &[0, 2, 1]);
        let f_trans = ctx.g.reshape(f, &[b, self.config.trans_channels, h, w]);
        Ok(DecoderOutput { tokens: t, f_trans })
    }
}

/// Stride-2 transposed convolution halving the channels, then channel layer
/// norm and GELU.
#[derive(Clone, Debug)]
pub struct UpsampleStage {
    pub deconv: ConvTranspose2x2,
    pub norm: LayerNorm,
}

impl UpsampleStage {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, group: ParamGroup, rng: &mut impl Rng) -> Result<Self> {
        ensure!(c_in % 2 == 0, Error::Config(format!("upsampling stage needs an even channel count, got {c_in}")));
        Self::with_out(store, name, c_in, c_in / 2, group, rng)
    }

    /// Stage with an explicit output width (used by the prediction head).
    pub fn with_out<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        ensure!(c_out > 0, Error::Config(format!("upsampling stage from {c_in} channels has no output channels")));
        Ok(Self {
            deconv: ConvTranspose2x2::new(store, &format!("{name}.deconv"), c_in, c_out, group, rng),
            norm: LayerNorm::channels(store, &format!("{name}.norm"), c_out, group, true),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.deconv.c_in,
            Error::Shape(format!("upsampling stage expects {} channels, got {s:?}", self.deconv.c_in))
        );
        let y = self.deconv.forward(ctx, x);
        let y = self.norm.forward(ctx, y);
        Ok(ctx.g.gelu(y))
    }
}

/// Bilinear resize of the guide to the fusion grid, then a depthwise
/// deformable 3x3 convolution whose offsets come from a 1x1 convolution.
#[derive(Clone, Debug)]
pub struct GuideAligner {
    pub offset: Conv1x1,
    /// `(C, 9, 1)` per-channel taps.
    pub weight: ParamId,
    /// `(C, 1, 1)`.
    pub bias: ParamId,
    pub channels: usize,
}

impl GuideAligner {
    /// Offsets start at zero and every channel starts as the identity tap.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Fusion;
        let taps = DEFORM_KERNEL * DEFORM_KERNEL;
        let offset = Conv1x1::new(store, &format!("{name}.offset"), channels, 2 * taps, g, rng);
        store.value_mut(offset.weight).fill(T::zero());
        let mut w = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&[channels, taps, 1]));
        for c in 0..channels {
            w[[c, taps / 2, 0]] = T::one();
        }
        let weight = store.add(format!("{name}.weight"), w, g, true);
        let bias = store.filled(format!("{name}.bias"), &[channels, 1, 1], 0.0, g, true);
        Self { offset, weight, bias, channels }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, guide: Var, target: (usize, usize)) -> Result<Var> {
        let s = ctx.g.shape(guide).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.channels,
            Error::Shape(format!("aligner expects {} guide channels, got {s:?}", self.channels))
        );
        ensure!(
            target.0 >= s[2] && target.1 >= s[3],
            Error::Argument(format!("alignment target {target:?} is smaller than the guide {:?}", (s[2], s[3])))
        );
        let (c, (h, w)) = (s[1], target);
        let r = ctx.g.resize_bilinear(guide, h, w);
        let off = self.offset.forward(ctx, r);
        let off = ctx.g.clamp(off, T::lit(-MAX_OFFSET), T::lit(MAX_OFFSET));
        let wt = ctx.p(self.weight);
        let wt = ctx.g.reshape(wt, &[c, DEFORM_KERNEL * DEFORM_KERNEL]);
        let y = ctx.g.deform_depthwise(r, off, wt, DEFORM_KERNEL);
        let bias = ctx.p(self.bias);
        Ok(ctx.g.add(y, bias))
    }
}

/// `ψ`: 1x1 channel map followed by a per-channel scale (zero at init) and shift.
#[derive(Clone, Debug)]
pub struct GuideInjection {
    pub map: Conv1x1,
    pub scale: ParamId,
    pub shift: ParamId,
}

impl GuideInjection {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Prior;
        Self {
            map: Conv1x1::new(store, &format!("{name}.map"), c_in, c_out, g, rng),
            scale: store.filled(format!("{name}.scale"), &[c_out, 1, 1], 0.0, g, true),
            shift: store.filled(format!("{name}.shift"), &[c_out, 1, 1], 0.0, g, true),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, g: Var) -> Var {
        let y = self.map.forward(ctx, g);
        let scale = ctx.p(self.scale);
        let y = ctx.g.mul(y, scale);
        let shift = ctx.p(self.shift);
        ctx.g.add(y, shift)
    }
}

/// `F_fusion = φ(F_up2) + ψ(g_aligned)`. Without an injection (or without a
/// guide) only the image path remains.
pub fn fuse<T: Real>(
    ctx: &mut Ctx<'_, T>,
    phi: Option<&Conv1x1>,
    psi: Option<&GuideInjection>,
    f_up2: Var,
    g_aligned: Option<Var>,
) -> Result<Var> {
    let image = match phi {
        Some(phi) => phi.forward(ctx, f_up2),
        None => f_up2,
    };
    let (Some(psi), Some(g)) = (psi, g_aligned) else {
        return Ok(image);
    };
    let (a, b) = (ctx.g.shape(f_up2).to_vec(), ctx.g.shape(g).to_vec());
    ensure!(
        a.len() == 4 && b.len() == 4 && a[0] == b[0] && a[2..] == b[2..],
        Error::Shape(format!("fusion inputs disagree spatially: {a:?} vs {b:?}"))
    );
    let guide = psi.forward(ctx, g);
    Ok(ctx.g.add(image, guide))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub trans_channels: usize,
    pub guide_channels: usize,
    pub use_mlff: bool,
    pub use_guide: bool,
}

impl FusionConfig {
    pub fn fusion_channels(&self) -> usize {
        self.trans_channels / 4
    }
}

/// The full fusion branch from `F_trans` (and optionally `G`) to `F_fusion`.
#[derive(Clone, Debug)]
pub struct MultiLevelFusion {
    pub config: FusionConfig,
    pub up1: Option<UpsampleStage>,
    pub up2: Option<UpsampleStage>,
    pub phi: Option<Conv1x1>,
    pub align: Option<GuideAligner>,
    pub psi: Option<GuideInjection>,
}

impl MultiLevelFusion {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        let c0 = config.trans_channels;
        ensure!(c0 % 4 == 0, Error::Config(format!("transformer width {c0} is not divisible by 4")));
        let cf = config.fusion_channels();
        let g = ParamGroup::Fusion;
        let (up1, up2, phi, align) = if config.use_mlff {
            let up1 = UpsampleStage::new(store, "fusion.up1", c0, g, rng)?;
            let up2 = UpsampleStage::new(store, "fusion.up2", c0 / 2, g, rng)?;
            let phi = Conv1x1::new(store, "fusion.phi", cf, cf, g, rng);
            let align = config.use_guide.then(|| GuideAligner::new(store, "fusion.align", config.guide_channels, rng));
            (Some(up1), Some(up2), Some(phi), align)
        } else {
            (None, None, None, None)
        };
        let psi = config.use_guide.then(|| GuideInjection::new(store, "prior.psi", config.guide_channels, cf, rng));
        Ok(Self { config, up1, up2, phi, align, psi })
    }

    /// `(B, C0, h, w)` → `(B, C0/4, 4h, 4w)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_trans: Var, guide: Option<Var>) -> Result<Var> {
        let s = ctx.g.shape(f_trans).to_vec();
        ensure!(
            s.len() == 4 && s[1] == self.config.trans_channels,
            Error::Shape(format!("fusion expects {} transformer channels, got {s:?}", self.config.trans_channels))
        );
        let (h, w) = (4 * s[2], 4 * s[3]);
        let f_up = match (&self.up1, &self.up2) {
            (Some(up1), Some(up2)) => {
                let x = up1.forward(ctx, f_trans)?;
                up2.forward(ctx, x)?
            }
            _ => {
                // Fixed interpolation and a grouped channel mean in place of the learned stages.
                let cf = self.config.fusion_channels();
                let x = ctx.g.resize_bilinear(f_trans, h, w);
                let x = ctx.g.reshape(x, &[s[0], cf, 4, h, w]);
                ctx.g.mean_axis(x, 2)
            }
        };
        let aligned = match (guide, &self.align) {
            (Some(gd), Some(align)) => Some(align.forward(ctx, gd, (h, w))?),
            (Some(gd), None) => {
                let gs = ctx.g.shape(gd).to_vec();
                ensure!(h >= gs[2] && w >= gs[3], Error::Argument("guide larger than the fusion grid".into()));
                Some(ctx.g.resize_bilinear(gd, h, w))
            }
            (None, _) => None,
        };
        fuse(ctx, self.phi.as_ref(), self.psi.as_ref(), f_up, aligned)
    }
}

#[cfg(test)]
mod tests {
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck::check_model;

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let n = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run<F: FnOnce(&mut Ctx<'_, f64>) -> Var>(store: &ParamStore<f64>, f: F) -> ArrayD<f64> {
        let mut ctx = Ctx::frozen(store);
        let v = f(&mut ctx);
        ctx.g.value(v).clone()
    }

    #[test]
    fn stages_halve_channels_and_double_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let up1 = UpsampleStage::new(&mut store, "a", 256, ParamGroup::Fusion, &mut rng).unwrap();
        let up2 = UpsampleStage::new(&mut store, "b", 128, ParamGroup::Fusion, &mut rng).unwrap();
        let x = rand_array(&[1, 256, 14, 14], &mut rng);
        let y = run(&store, |ctx| {
            let x = ctx.g.constant(x);
            up1.forward(ctx, x).unwrap()
        });
        assert_eq!(y.shape(), &[1, 128, 28, 28]);
        let z = run(&store, |ctx| {
            let y = ctx.g.constant(y);
            up2.forward(ctx, y).unwrap()
        });
        assert_eq!(z.shape(), &[1, 64, 56, 56]);
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn odd_channels_are_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let r = UpsampleStage::new(&mut store, "a", 7, ParamGroup::Fusion, &mut rng);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_input_gives_norm_of_bias_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let up = UpsampleStage::new(&mut store, "a", 4, ParamGroup::Fusion, &mut rng).unwrap();
        // With zero input the deconvolution returns its bias at every pixel.
        let bias = [0.3, -0.2];
        for (c, b) in bias.iter().enumerate() {
            store.value_mut(up.deconv.bias)[[c, 0, 0]] = *b;
        }
        let y = run(&store, |ctx| {
            let x = ctx.g.constant(ArrayD::zeros(IxDyn(&[1, 4, 3, 3])));
            up.forward(ctx, x).unwrap()
        });
        // LN over two channels with values (0.3, -0.2) maps them to ±1 (up to eps).
        let inv = 1.0 / (0.0625f64 + 1e-5).sqrt();
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        for (c, expect) in [gelu(0.25 * inv), gelu(-0.25 * inv)].iter().enumerate() {
            for v in y.slice(ndarray::s![0, c, .., ..]).iter() {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_taps_with_zero_offsets_reduce_to_resize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let al = GuideAligner::new(&mut store, "al", 64, &mut rng);
        let g = rand_array(&[1, 64, 14, 14], &mut rng);
        let (a, r) = {
            let mut ctx = Ctx::frozen(&store);
            let gv = ctx.g.constant(g);
            let a = al.forward(&mut ctx, gv, (56, 56)).unwrap();
            let r = ctx.g.resize_bilinear(gv, 56, 56);
            (ctx.g.value(a).clone(), ctx.g.value(r).clone())
        };
        assert_eq!(a.shape(), &[1, 64, 56, 56]);
        let diff = (&a - &r).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn zero_offsets_equal_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let al = GuideAligner::new(&mut store, "al", 3, &mut rng);
        let w = rand_array(&[3, 9, 1], &mut rng);
        *store.value_mut(al.weight) = w.clone();
        let g = rand_array(&[1, 3, 4, 5], &mut rng);
        let out = run(&store, |ctx| {
            let gv = ctx.g.constant(g.clone());
            al.forward(ctx, gv, (8, 10)).unwrap()
        });
        let r = run(&store, |ctx| {
            let gv = ctx.g.constant(g.clone());
            ctx.g.resize_bilinear(gv, 8, 10)
        });
        // Direct depthwise 3x3 correlation with zero padding.
        for c in 0..3 {
            for y in 0..8i64 {
                for x in 0..10i64 {
                    let mut acc = 0.0;
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if (0..8).contains(&sy) && (0..10).contains(&sx) {
                                acc += w[[c, (ky * 3 + kx) as usize, 0]] * r[[0, c, sy as usize, sx as usize]];
                            }
                        }
                    }
                    assert!((out[[0, c, y as usize, x as usize]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_guide_gives_constant_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let al = GuideAligner::new(&mut store, "al", 2, &mut rng);
        *store.value_mut(al.weight) = rand_array(&[2, 9, 1], &mut rng);
        let out = run(&store, |ctx| {
            let gv = ctx.g.constant(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 0.7));
            al.forward(ctx, gv, (12, 12)).unwrap()
        });
        for c in 0..2 {
            let first = out[[0, c, 1, 1]];
            for y in 1..11 {
                for x in 1..11 {
                    assert!((out[[0, c, y, x]] - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shrinking_target_is_an_argument_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let al = GuideAligner::new(&mut store, "al", 2, &mut rng);
        let mut ctx = Ctx::frozen(&store);
        let gv = ctx.g.constant(ArrayD::zeros(IxDyn(&[1, 2, 8, 8])));
        assert!(matches!(al.forward(&mut ctx, gv, (4, 4)), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_scale_makes_fusion_the_image_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let phi = Conv1x1::new(&mut store, "phi", 4, 4, ParamGroup::Fusion, &mut rng);
        let psi = GuideInjection::new(&mut store, "psi", 3, 4, &mut rng);
        let a = rand_array(&[1, 4, 8, 8], &mut rng);
        let g = rand_array(&[1, 3, 8, 8], &mut rng);
        let (fused, image) = {
            let mut ctx = Ctx::frozen(&store);
            let av = ctx.g.constant(a);
            let gv = ctx.g.constant(g);
            let f = fuse(&mut ctx, Some(&phi), Some(&psi), av, Some(gv)).unwrap();
            let i = phi.forward(&mut ctx, av);
            (ctx.g.value(f).clone(), ctx.g.value(i).clone())
        };
        assert_eq!(fused, image);
    }

    #[test]
    fn fusion_is_the_sum_of_independent_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let phi = Conv1x1::new(&mut store, "phi", 4, 4, ParamGroup::Fusion, &mut rng);
        let psi = GuideInjection::new(&mut store, "psi", 4, 4, &mut rng);
        *store.value_mut(psi.scale) = rand_array(&[4, 1, 1], &mut rng);
        *store.value_mut(psi.shift) = rand_array(&[4, 1, 1], &mut rng);
        let a = rand_array(&[1, 4, 8, 8], &mut rng);
        let g = rand_array(&[1, 4, 8, 8], &mut rng);
        let fused = run(&store, |ctx| {
            let (av, gv) = (ctx.g.constant(a.clone()), ctx.g.constant(g.clone()));
            fuse(ctx, Some(&phi), Some(&psi), av, Some(gv)).unwrap()
        });
        let zero_guide = run(&store, |ctx| {
            let (av, gv) = (ctx.g.constant(a.clone()), ctx.g.constant(ArrayD::zeros(IxDyn(&[1, 4, 8, 8]))));
            fuse(ctx, Some(&phi), Some(&psi), av, Some(gv)).unwrap()
        });
        // Independent oracle for both paths.
        let pw = store.value(phi.weight);
        let (mw, sc, sh) = (store.value(psi.map.weight), store.value(psi.scale), store.value(psi.shift));
        let (pb, mb) = (store.value(phi.bias), store.value(psi.map.bias));
        for o in 0..4 {
            for y in 0..8 {
                for x in 0..8 {
                    let img: f64 = pb[[o, 0, 0]] + (0..4).map(|i| pw[[o, i]] * a[[0, i, y, x]]).sum::<f64>();
                    let map: f64 = mb[[o, 0, 0]] + (0..4).map(|i| mw[[o, i]] * g[[0, i, y, x]]).sum::<f64>();
                    let gd = sc[[o, 0, 0]] * map + sh[[o, 0, 0]];
                    assert!((fused[[0, o, y, x]] - img - gd).abs() < 1e-6);
                    let psi0 = sc[[o, 0, 0]] * mb[[o, 0, 0]] + sh[[o, 0, 0]];
                    assert!((fused[[0, o, y, x]] - zero_guide[[0, o, y, x]] - (gd - psi0)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn spatial_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let psi = GuideInjection::new(&mut store, "psi", 2, 2, &mut rng);
        let mut ctx = Ctx::frozen(&store);
        let a = ctx.g.constant(ArrayD::zeros(IxDyn(&[1, 2, 8, 8])));
        let g = ctx.g.constant(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])));
        assert!(matches!(fuse(&mut ctx, None, Some(&psi), a, Some(g)), Err(Error::Shape(_))));
    }

    #[test]
    fn both_stages_and_fusion_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut store = ParamStore::<f64>::new();
        let config = FusionConfig { trans_channels: 8, guide_channels: 3, use_mlff: true, use_guide: true };
        let mlff = MultiLevelFusion::new(&mut store, config, &mut rng).unwrap();
        // Move away from the zero-initialized start so every path carries gradient.
        let psi = mlff.psi.as_ref().unwrap();
        *store.value_mut(psi.scale) = rand_array(&[2, 1, 1], &mut rng);
        let al = mlff.align.as_ref().unwrap();
        *store.value_mut(al.offset.weight) = rand_array(&[18, 3], &mut rng).mapv(|v| 0.3 * v);
        *store.value_mut(al.offset.bias) = rand_array(&[18, 1, 1], &mut rng).mapv(|v| 0.2 * v + 0.31);
        let x = rand_array(&[1, 8, 4, 4], &mut rng);
        let g = rand_array(&[1, 3, 4, 4], &mut rng);
        let readout = rand_array(&[1, 2, 16, 16], &mut rng);
        for (name, r) in check_model(&store, &[x, g], 1e-5, |ctx, v| {
            let y = mlff.forward(ctx, v[0], Some(v[1])).unwrap();
            let w = ctx.g.constant(readout.clone());
            let y = ctx.g.mul(y, w);
            ctx.g.sum_all(y)
        }) {
            assert!(r.rel_error < 1e-4, "{name}: {r:?}");
        }
    }

    #[test]
    fn ablated_fusion_keeps_the_output_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (use_mlff, use_guide) in [(false, true), (true, false), (false, false)] {
            let mut store = ParamStore::<f64>::new();
            let config = FusionConfig { trans_channels: 8, guide_channels: 3, use_mlff, use_guide };
            let mlff = MultiLevelFusion::new(&mut store, config, &mut rng).unwrap();
            let y = run(&store, |ctx| {
                let x = ctx.g.constant(rand_array(&[2, 8, 3, 3], &mut rng));
                let g = ctx.g.constant(rand_array(&[2, 3, 3, 3], &mut rng));
                mlff.forward(ctx, x, Some(g)).unwrap()
            });
            assert_eq!(y.shape(), &[2, 2, 12, 12]);
        }
    }

    #[test]
    fn decoder_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f32>::new();
        let config = DecoderConfig { dim: 8, depth: 2, heads: 2, mlp_ratio: 2, trans_channels: 16 };
        let dec = MaskDecoder::new(&mut store, config, 9, 16, &mut rng).unwrap();
        let mut ctx = Ctx::frozen(&store);
        let f = ctx.g.constant(ArrayD::from_elem(IxDyn(&[2, 8, 4, 4]), 0.1f32));
        let out = dec.forward(&mut ctx, f).unwrap();
        assert_eq!(ctx.g.shape(out.tokens), &[2, 9, 8]);
        assert_eq!(ctx.g.shape(out.f_trans), &[2, 16, 4, 4]);
    }
}
