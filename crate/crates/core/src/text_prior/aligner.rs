//! Cross-modal prior: similarity gate, layer-normalized spatial attention and the
//! dual-normalized guide matrix.

use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix2, Ix3, Ix4};
use rand::Rng;

use super::image_encoder::ImageEncoder;
use super::text_encoder::TextEmbedding;
use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, Linear, ParamGroup, ParamId, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

/// Encoder output plus the pooled global embedding projected to text width.
#[derive(Clone, Debug)]
pub struct ImageFeatures<T> {
    pub f_sam: Array4<T>,
    pub f_img: Array2<T>,
}

/// Sigmoid gates `(B, 1, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityWeights<T>(pub Array3<T>);

/// Row-stochastic `(B, L, L)` attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix<T>(pub Array3<T>);

/// Normalized guide map `(B, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GuideMatrix<T>(pub Array4<T>);

/// Learnable scalar-to-`L` map applied to the cosine similarity:
/// `logit_l = weight_l · cos + bias_l`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityProjection<T> {
    pub weight: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Real> SimilarityProjection<T> {
    /// Every spatial logit equals the input similarity.
    pub fn identity(l: usize) -> Self {
        Self { weight: Array1::ones(l), bias: Array1::zeros(l) }
    }
}

/// Zero-norm rows are rejected up front instead of being masked with an epsilon.
fn check_rows_nonzero<T: Real>(m: &Array2<T>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n2 = row.iter().fold(T::zero(), |a, &v| a + v * v);
        ensure!(
            n2 > T::zero() && n2.is_finite(),
            Error::Normalization(format!("{what} row {i} has zero or non-finite norm"))
        );
    }
    Ok(())
}

/// Cosine similarity per batch row, projected to `L` logits and squashed:
/// `(B, d)` x `(B, d)` → `(B, 1, L)`.
pub fn similarity_graph<T: Real>(g: &mut Graph<T>, f_img: Var, f_text: Var, weight: Var, bias: Var) -> Var {
    let b = g.shape(f_img)[0];
    let dot = g.mul(f_img, f_text);
    let dot = g.sum_axis(dot, 1);
    let a2 = g.mul(f_img, f_img);
    let a2 = g.sum_axis(a2, 1);
    let t2 = g.mul(f_text, f_text);
    let t2 = g.sum_axis(t2, 1);
    let n2 = g.mul(a2, t2);
    let inv = g.powf(n2, T::lit(-0.5));
    let cos = g.mul(dot, inv);
    let cos = g.reshape(cos, &[b, 1]);
    let logits = g.mul(cos, weight);
    let logits = g.add(logits, bias);
    let gates = g.sigmoid(logits);
    let l = g.shape(gates)[1];
    g.reshape(gates, &[b, 1, l])
}

/// `softmax(LN(F) LN(F)ᵀ / √C)` on `f_sam (B, C, H, W)`.
pub fn attention_graph<T: Real>(g: &mut Graph<T>, f_sam: Var) -> Var {
    let s = g.shape(f_sam).to_vec();
    let (b, c, l) = (s[0], s[1], s[2] * s[3]);
    let f = g.reshape(f_sam, &[b, c, l]);
    let f = g.permute(f, &[0, 2, 1]);
    let fn_ = g.layer_norm(f, 2, T::lit(NORM_EPS));
    let logits = g.bmm(fn_, fn_, true);
    let logits = g.scale(logits, T::lit(1.0 / (c as f64).sqrt()));
    g.softmax(logits)
}

/// `Γ_spatial(Γ_channel((F + A F) ⊙ W_s))` reshaped back to `(B, C, H, W)`.
pub fn guide_graph<T: Real>(g: &mut Graph<T>, f_sam: Var, attn: Var, gates: Var) -> Var {
    let s = g.shape(f_sam).to_vec();
    let (b, c, l) = (s[0], s[1], s[2] * s[3]);
    let f = g.reshape(f_sam, &[b, c, l]);
    let f = g.permute(f, &[0, 2, 1]);
    let af = g.bmm(attn, f, false);
    let sum = g.add(f, af);
    let gates = g.reshape(gates, &[b, l, 1]);
    let x = g.mul(sum, gates);
    let x = g.layer_norm(x, 2, T::lit(NORM_EPS));
    let x = g.layer_norm(x, 1, T::lit(NORM_EPS));
    let x = g.permute(x, &[0, 2, 1]);
    g.reshape(x, &[b, c, s[2], s[3]])
}

/// Prior aligner parameters: the global image projection and the similarity
/// projection `P`.
#[derive(Clone, Debug)]
pub struct PriorAligner {
    pub image_proj: Linear,
    pub sim_weight: ParamId,
    pub sim_bias: ParamId,
    pub tokens: usize,
}

impl PriorAligner {
    pub fn new<T: Real>(store: &mut ParamStore<T>, channels: usize, text_dim: usize, tokens: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Prior;
        let image_proj = Linear::new(store, "prior.image_proj", channels, text_dim, g, true, rng);
        let sim_weight = store.filled("prior.sim.weight", &[tokens], 1.0, g, true);
        let sim_bias = store.filled("prior.sim.bias", &[tokens], 0.0, g, true);
        Self { image_proj, sim_weight, sim_bias, tokens }
    }

    /// Global average pool over space, then the learned projection: `(B, d_text)`.
    pub fn image_embedding<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_sam: Var) -> Var {
        let s = ctx.g.shape(f_sam).to_vec();
        let f = ctx.g.reshape(f_sam, &[s[0], s[1], s[2] * s[3]]);
        let pooled = ctx.g.mean_axis(f, 2);
        self.image_proj.forward(ctx, pooled)
    }

    /// Full prior: `(f_img, W_s, A, G)` for a batch.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f_sam: Var, f_text: Var) -> Result<PriorVars> {
        let f_img = self.image_embedding(ctx, f_sam);
        check_rows_nonzero(&to2(ctx.g.value(f_img))?, "image embedding")?;
        check_rows_nonzero(&to2(ctx.g.value(f_text))?, "text embedding")?;
        let w = ctx.p(self.sim_weight);
        let b = ctx.p(self.sim_bias);
        let gates = similarity_graph(&mut ctx.g, f_img, f_text, w, b);
        let attn = attention_graph(&mut ctx.g, f_sam);
        let guide = guide_graph(&mut ctx.g, f_sam, attn, gates);
        Ok(PriorVars { f_img, gates, attn, guide })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub f_img: Var,
    pub gates: Var,
    pub attn: Var,
    pub guide: Var,
}

fn to2<T: Real>(a: &ndarray::ArrayD<T>) -> Result<Array2<T>> {
    a.clone().into_dimensionality::<Ix2>().map_err(|_| Error::Shape(format!("expected a matrix, got {:?}", a.shape())))
}

/// Runs the encoder and the global projection on a `(B, 1, S, S)` image.
pub fn encode_image<T: Real>(
    store: &ParamStore<T>,
    encoder: &ImageEncoder,
    aligner: &PriorAligner,
    image: &Array4<T>,
) -> Result<ImageFeatures<T>> {
    let mut ctx = Ctx::frozen(store);
    let x = ctx.g.constant(image.clone().into_dyn());
    let f_sam = encoder.forward(&mut ctx, x)?;
    let f_img = aligner.image_embedding(&mut ctx, f_sam);
    Ok(ImageFeatures {
        f_sam: ctx.g.value(f_sam).clone().into_dimensionality::<Ix4>().expect("rank-4"),
        f_img: ctx.g.value(f_img).clone().into_dimensionality::<Ix2>().expect("rank-2"),
    })
}

pub fn similarity_weights<T: Real>(
    f_img: &Array2<T>,
    f_text: &TextEmbedding<T>,
    projection: &SimilarityProjection<T>,
) -> Result<SimilarityWeights<T>> {
    ensure!(
        f_img.dim() == f_text.values.dim(),
        Error::Shape(format!("image embedding {:?} vs text embedding {:?}", f_img.dim(), f_text.values.dim()))
    );
    ensure!(
        projection.weight.len() == projection.bias.len(),
        Error::Shape("projection weight and bias lengths differ".into())
    );
    check_rows_nonzero(f_img, "image embedding")?;
    check_rows_nonzero(&f_text.values, "text embedding")?;
    let mut g = Graph::new();
    let a = g.constant(f_img.clone().into_dyn());
    let t = g.constant(f_text.values.clone().into_dyn());
    let w = g.constant(projection.weight.clone().into_dyn());
    let b = g.constant(projection.bias.clone().into_dyn());
    let out = similarity_graph(&mut g, a, t, w, b);
    Ok(SimilarityWeights(g.value(out).clone().into_dimensionality::<Ix3>().expect("rank-3")))
}

pub fn spatial_attention<T: Real>(f_sam: &Array4<T>) -> Result<AttentionMatrix<T>> {
    let (_, c, h, w) = f_sam.dim();
    ensure!(c > 0 && h * w > 0, Error::Shape(format!("degenerate feature map {:?}", f_sam.dim())));
    let mut g = Graph::new();
    let f = g.constant(f_sam.clone().into_dyn());
    let a = attention_graph(&mut g, f);
    Ok(AttentionMatrix(g.value(a).clone().into_dimensionality::<Ix3>().expect("rank-3")))
}

pub fn guide_matrix<T: Real>(
    f_sam: &Array4<T>,
    attn: &AttentionMatrix<T>,
    gates: &SimilarityWeights<T>,
) -> Result<GuideMatrix<T>> {
    let (b, _, h, w) = f_sam.dim();
    let l = h * w;
    ensure!(
        attn.0.dim() == (b, l, l),
        Error::Shape(format!("attention {:?} does not match feature map with L = {l}", attn.0.dim()))
    );
    ensure!(
        gates.0.dim() == (b, 1, l),
        Error::Shape(format!("similarity weights {:?} do not match L = {l}", gates.0.dim()))
    );
    let mut g = Graph::new();
    let f = g.constant(f_sam.clone().into_dyn());
    let a = g.constant(attn.0.clone().into_dyn());
    let s = g.constant(gates.0.clone().into_dyn());
    let out = guide_graph(&mut g, f, a, s);
    Ok(GuideMatrix(g.value(out).clone().into_dimensionality::<Ix4>().expect("rank-4")))
}

impl<T: Real> GuideMatrix<T> {
    /// Channel mean of `|G|` per batch item: `(B, H, W)`.
    pub fn energy(&self) -> Array3<T> {
        self.0.mapv(|v| v.abs()).mean_axis(Axis(1)).expect("channels")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn text(rows: Array2<f64>) -> TextEmbedding<f64> {
        TextEmbedding { values: rows }
    }

    #[test]
    fn parallel_orthogonal_antiparallel_gates() {
        let l = 5;
        let p = SimilarityProjection::identity(l);
        let v = ndarray::array![[1.0, 2.0, -0.5]];
        let cases = [
            (v.clone(), 1.0 / (1.0 + (-1.0f64).exp())),
            (ndarray::array![[2.0, -1.0, 0.0]], 0.5),
            (v.mapv(|x| -3.0 * x), 1.0 / (1.0 + 1.0f64.exp())),
        ];
        for (t, expected) in cases {
            let w = similarity_weights(&v, &text(t), &p).unwrap();
            assert_eq!(w.0.dim(), (1, 1, l));
            for &x in w.0.iter() {
                assert!((x - expected).abs() < 1e-12, "{x} vs {expected}");
            }
        }
        assert!((1.0 / (1.0 + (-1.0f64).exp()) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn zero_norm_row_is_normalization_error() {
        let p = SimilarityProjection::<f64>::identity(3);
        let r = similarity_weights(&ndarray::array![[0.0, 0.0]], &text(ndarray::array![[1.0, 0.0]]), &p);
        assert!(matches!(r, Err(Error::Normalization(_))));
    }

    #[test]
    fn single_site_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = spatial_attention(&rand4((2, 4, 1, 1), &mut rng)).unwrap();
        assert!(a.0.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_map_gives_uniform_attention() {
        let f = Array4::from_shape_fn((1, 3, 2, 2), |(_, c, _, _)| c as f64 * 0.7 - 0.3);
        let a = spatial_attention(&f).unwrap();
        for &v in a.0.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn random_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = spatial_attention(&rand4((1, 6, 3, 3), &mut rng)).unwrap();
        for row in a.0.index_axis(Axis(0), 0).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn guide_is_spatially_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand4((2, 4, 3, 3), &mut rng);
        let a = spatial_attention(&f).unwrap();
        let w = SimilarityWeights(Array3::from_shape_fn((2, 1, 9), |_| rng.random_range(0.1..0.9)));
        let g = guide_matrix(&f, &a, &w).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let plane = g.0.index_axis(Axis(0), b).index_axis(Axis(0), c).to_owned();
                let mean = plane.mean().unwrap();
                let var = plane.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                assert!(mean.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn constant_gates_are_normalized_away() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = rand4((1, 5, 2, 3), &mut rng);
        let a = spatial_attention(&f).unwrap();
        let ones = guide_matrix(&f, &a, &SimilarityWeights(Array3::ones((1, 1, 6)))).unwrap();
        let scaled = guide_matrix(&f, &a, &SimilarityWeights(Array3::from_elem((1, 1, 6), 0.37))).unwrap();
        let diff = (&ones.0 - &scaled.0).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn identity_attention_doubles_the_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = rand4((1, 3, 2, 2), &mut rng);
        let gates = Array3::from_shape_fn((1, 1, 4), |(_, _, l)| 0.2 + 0.1 * l as f64);
        let mut g = Graph::<f64>::new();
        let fv = g.constant(f.clone().into_dyn());
        let eye = g.constant(Array3::from_shape_fn((1, 4, 4), |(_, i, j)| if i == j { 1.0 } else { 0.0 }).into_dyn());
        // Pre-normalization term: (F + A F) ⊙ W_s in (B, L, C) layout.
        let flat = g.reshape(fv, &[1, 3, 4]);
        let flat = g.permute(flat, &[0, 2, 1]);
        let af = g.bmm(eye, flat, false);
        let sum = g.add(flat, af);
        let gv = g.constant(gates.clone().into_shape_with_order((1, 4, 1)).unwrap().into_dyn());
        let pre = g.mul(sum, gv);
        let pre = g.value(pre);
        for l in 0..4 {
            for c in 0..3 {
                let expected = 2.0 * f[[0, c, l / 2, l % 2]] * gates[[0, 0, l]];
                assert!((pre[[0, l, c]] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mismatched_attention_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand4((1, 3, 2, 2), &mut rng);
        let a = AttentionMatrix(Array3::from_elem((1, 3, 3), 1.0 / 3.0));
        let w = SimilarityWeights(Array3::from_elem((1, 1, 4), 0.5));
        assert!(matches!(guide_matrix(&f, &a, &w), Err(Error::Shape(_))));
    }
}
