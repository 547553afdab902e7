//! Low-rank adaptation of frozen linear layers.
//!
//! A frozen `W (d_out, d_in)` is augmented with `scale · up · down` where
//! `down (r, d_in)` starts as small noise and `up (d_out, r)` starts at zero, so
//! an untrained adapter is an exact no-op.

use ndarray::{Array2, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, Linear, ParamGroup, ParamId, ParamStore};

pub const DEFAULT_RANK: usize = 4;
pub const DOWN_INIT_STD: f64 = 0.01;

/// Trainable elements of one adapter: `r · (d_in + d_out)`.
pub fn adapter_param_count(d_in: usize, d_out: usize, rank: usize) -> usize {
    rank * (d_in + d_out)
}

fn check_rank(d_in: usize, d_out: usize, rank: usize) -> Result<()> {
    ensure!(
        rank >= 1 && rank <= d_in.min(d_out),
        Error::Config(format!("LoRA rank {rank} must lie in 1..={} for a {d_out}x{d_in} layer", d_in.min(d_out)))
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub down: Array2<T>,
    pub up: Array2<T>,
    pub rank: usize,
    pub scale: T,
    merged: bool,
}

impl<T: Real> LoraAdapter<T> {
    pub fn new(d_in: usize, d_out: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        check_rank(d_in, d_out, rank)?;
        let dist = Normal::new(0.0, DOWN_INIT_STD).expect("finite std");
        let down = Array2::from_shape_fn((rank, d_in), |_| T::lit(dist.sample(rng)));
        Ok(Self { down, up: Array2::zeros((d_out, rank)), rank, scale: T::one(), merged: false })
    }

    pub fn from_parts(down: Array2<T>, up: Array2<T>, scale: T) -> Result<Self> {
        let rank = down.nrows();
        ensure!(
            up.ncols() == rank,
            Error::Shape(format!("up is {:?} but down has rank {rank}", up.dim()))
        );
        check_rank(down.ncols(), up.nrows(), rank)?;
        Ok(Self { down, up, rank, scale, merged: false })
    }

    pub fn d_in(&self) -> usize {
        self.down.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.up.nrows()
    }

    fn check_weight(&self, w: &Array2<T>) -> Result<()> {
        ensure!(
            w.dim() == (self.d_out(), self.d_in()),
            Error::Shape(format!("frozen weight {:?} vs adapter ({}, {})", w.dim(), self.d_out(), self.d_in()))
        );
        Ok(())
    }

    /// `ΔW = scale · up · down`.
    pub fn delta(&self) -> Array2<T> {
        self.up.dot(&self.down) * self.scale
    }

    /// `y = x Wᵀ + scale · x downᵀ upᵀ`. The frozen weight is only read.
    pub fn apply(&self, frozen: &Array2<T>, x: &Array2<T>) -> Result<Array2<T>> {
        self.check_weight(frozen)?;
        ensure!(
            x.ncols() == self.d_in(),
            Error::Shape(format!("input has {} features, adapter expects {}", x.ncols(), self.d_in()))
        );
        let base = x.dot(&frozen.t());
        let low = x.dot(&self.down.t()).dot(&self.up.t());
        Ok(base + low * self.scale)
    }

    /// Folds the adapter into a copy of the frozen weight. Merging again before
    /// [`LoraAdapter::reset_merge`] is an error.
    pub fn merge(&mut self, frozen: &Array2<T>) -> Result<Array2<T>> {
        self.check_weight(frozen)?;
        ensure!(!self.merged, Error::State("adapter already merged; reset before merging again".into()));
        self.merged = true;
        Ok(frozen + &self.delta())
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn reset_merge(&mut self) {
        self.merged = false;
    }
}

/// Frozen linear layer plus a trainable low-rank adapter, as a graph layer.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraLinear {
    /// Registers a frozen `d_in -> d_out` layer in the backbone group and its
    /// adapter in the adapter group.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_rank(d_in, d_out, rank)?;
        let base = Linear::new(store, name, d_in, d_out, ParamGroup::Backbone, false, rng);
        let down = store.normal(format!("{name}.lora_down"), &[rank, d_in], DOWN_INIT_STD, ParamGroup::Adapter, true, rng);
        let up = store.filled(format!("{name}.lora_up"), &[d_out, rank], 0.0, ParamGroup::Adapter, true);
        Ok(Self { base, down, up, rank, scale: 1.0 })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.base.forward(ctx, x);
        let shape = ctx.g.shape(x).to_vec();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = ctx.g.reshape(x, &[rows, self.base.d_in]);
        let down = ctx.p(self.down);
        let up = ctx.p(self.up);
        let h = ctx.g.matmul(flat, down, true);
        let delta = ctx.g.matmul(h, up, true);
        let delta = ctx.g.scale(delta, T::lit(self.scale));
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.base.d_out;
        let delta = ctx.g.reshape(delta, &out_shape);
        ctx.g.add(y, delta)
    }

    /// Snapshot of the adapter as a standalone [`LoraAdapter`].
    pub fn adapter<T: Real>(&self, store: &ParamStore<T>) -> LoraAdapter<T> {
        let down = store.value(self.down).clone().into_dimensionality::<Ix2>().expect("rank-2");
        let up = store.value(self.up).clone().into_dimensionality::<Ix2>().expect("rank-2");
        LoraAdapter::from_parts(down, up, T::lit(self.scale)).expect("consistent adapter")
    }

    pub fn frozen_weight<T: Real>(&self, store: &ParamStore<T>) -> Array2<T> {
        store.value(self.base.weight).clone().into_dimensionality::<Ix2>().expect("rank-2")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_up_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let adapter = LoraAdapter::<f64>::new(8, 6, 4, &mut rng).unwrap();
        let w = random_matrix(6, 8, &mut rng);
        let x = random_matrix(3, 8, &mut rng);
        assert_eq!(adapter.apply(&w, &x).unwrap(), x.dot(&w.t()));
    }

    #[test]
    fn zero_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut adapter = LoraAdapter::<f64>::new(8, 8, 4, &mut rng).unwrap();
        adapter.up = random_matrix(8, 4, &mut rng);
        adapter.scale = 0.0;
        let w = random_matrix(8, 8, &mut rng);
        let x = random_matrix(5, 8, &mut rng);
        assert_eq!(adapter.apply(&w, &x).unwrap(), x.dot(&w.t()));
    }

    #[test]
    fn rank_violation_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(LoraAdapter::<f64>::new(3, 16, 4, &mut rng), Err(Error::Config(_))));
        assert!(matches!(LoraAdapter::<f64>::new(16, 16, 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn merge_matches_unmerged_and_guards_double_merge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut adapter = LoraAdapter::<f64>::new(16, 16, 4, &mut rng).unwrap();
        adapter.up = random_matrix(16, 4, &mut rng);
        let w = random_matrix(16, 16, &mut rng);
        let w_before = w.clone();
        let x = random_matrix(7, 16, &mut rng);
        let unmerged = adapter.apply(&w, &x).unwrap();
        let merged = adapter.merge(&w).unwrap();
        let diff = (&x.dot(&merged.t()) - &unmerged).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff <= 1e-6, "max diff {diff}");
        assert_eq!(w, w_before);
        assert!(matches!(adapter.merge(&w), Err(Error::State(_))));
        adapter.reset_merge();
        assert!(adapter.merge(&w).is_ok());
    }

    #[test]
    fn merge_with_zero_up_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut adapter = LoraAdapter::<f32>::new(12, 10, 4, &mut rng).unwrap();
        let w = Array2::from_shape_fn((10, 12), |(i, j)| (i * 12 + j) as f32 * 0.01);
        assert_eq!(adapter.merge(&w).unwrap(), w);
    }

    #[test]
    fn graph_layer_matches_standalone_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let layer = LoraLinear::new(&mut store, "proj", 6, 5, 4, &mut rng).unwrap();
        *store.value_mut(layer.up) = random_matrix(5, 4, &mut rng).into_dyn();
        let x = random_matrix(3, 6, &mut rng);
        let mut ctx = Ctx::new(&store);
        let xv = ctx.g.constant(x.clone().into_dyn());
        let y = layer.forward(&mut ctx, xv);
        let bias = store.value(layer.base.bias.unwrap()).clone().into_dimensionality::<ndarray::Ix1>().unwrap();
        let expected = layer.adapter(&store).apply(&layer.frozen_weight(&store), &x).unwrap() + &bias;
        let got = ctx.g.value(y).clone().into_dimensionality::<Ix2>().unwrap();
        let diff = (&got - &expected).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff < 1e-12);
        assert_eq!(store.trainable_count(), adapter_param_count(6, 5, 4));
    }
}
