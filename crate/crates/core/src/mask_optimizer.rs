//! Iterative mask refinement with per-class dynamic kernels.
//!
//! A hypernetwork maps each class's mask encoding to a gate over the input
//! channels of a shared base kernel. Each step convolves `[M ⊕ F_fusion]` with
//! the gated kernels and adds a clipped sigmoid residual to the mask.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix4, IxDyn};
use rand::Rng;

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Error, Result};
use crate::nn::{Ctx, Linear, Mlp, ParamGroup, ParamId, ParamStore};

pub const KERNEL: usize = 3;
pub const DEFAULT_STEPS: usize = 3;
pub const LAMBDA_INIT: f64 = 0.1;

/// One encoding per class token, `(N_cls, C_enc)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEncoding<T>(pub Array2<T>);

/// Shared kernel `(C_in, C_out, K, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseKernel<T>(pub Array4<T>);

/// Gated copy of the base kernel, `(C_in, C_out, K, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicKernel<T>(pub Array4<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct MaskState<T> {
    /// `(B, N_cls, H, W)`, every value in `[0, 1]`.
    pub probs: Array4<T>,
    pub step: usize,
    pub lambda_step: T,
}

impl<T: Real> MaskState<T> {
    pub fn new(probs: Array4<T>, lambda_step: T) -> Result<Self> {
        ensure!(
            probs.iter().all(|&v| v >= T::zero() && v <= T::one()),
            Error::Validation("mask probabilities must lie in [0, 1]".into())
        );
        Ok(Self { probs, step: 0, lambda_step })
    }
}

impl<T: Real> BaseKernel<T> {
    pub fn c_in(&self) -> usize {
        self.0.dim().0
    }

    pub fn c_out(&self) -> usize {
        self.0.dim().1
    }
}

/// `Ω = gate ⊙ W_base`, scaling input-channel slice `i` by `gate[i]`.
pub fn gate_kernel<T: Real>(gate: &Array1<T>, base: &BaseKernel<T>) -> Result<DynamicKernel<T>> {
    ensure!(
        gate.len() == base.c_in(),
        Error::Shape(format!("gate has {} entries but the base kernel has {} input channels", gate.len(), base.c_in()))
    );
    let mut out = base.0.clone();
    for (mut slice, &g) in out.axis_iter_mut(Axis(0)).zip(gate) {
        slice.mapv_inplace(|v| v * g);
    }
    Ok(DynamicKernel(out))
}

/// Gate MLP `C_enc → 2·C_in → C_in`. The last bias starts at one and the last
/// weight small, so initial kernels are close to the base kernel.
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    pub mlp: Mlp,
    pub c_enc: usize,
    pub c_in: usize,
}

impl HyperNetwork {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_enc: usize, c_in: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Refiner;
        let mlp = Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), c_enc, 2 * c_in, g, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 2 * c_in, c_in, g, true, rng),
        };
        store.value_mut(mlp.fc2.weight).mapv_inplace(|v| v * T::lit(0.1));
        store.value_mut(mlp.fc2.bias.expect("bias")).fill(T::one());
        Self { mlp, c_enc, c_in }
    }

    /// `(B, N, C_enc)` encodings to `(B, N, C_in)` gates.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, m: Var) -> Result<Var> {
        let s = ctx.g.shape(m).to_vec();
        ensure!(
            s.last() == Some(&self.c_enc),
            Error::Shape(format!("mask encoding width {:?} does not match the hypernetwork input {}", s.last(), self.c_enc))
        );
        Ok(self.mlp.forward(ctx, m))
    }
}

/// Dynamic kernel for one encoding row: MLP then channel gating.
pub fn hyper_kernel<T: Real>(
    store: &ParamStore<T>,
    hyper: &HyperNetwork,
    m: &Array1<T>,
    base: &BaseKernel<T>,
) -> Result<DynamicKernel<T>> {
    let mut ctx = Ctx::frozen(store);
    let x = ctx.g.constant(m.clone().into_shape_with_order((1, 1, m.len())).expect("row").into_dyn());
    let gate = hyper.forward(&mut ctx, x)?;
    let gate = ctx.g.value(gate).iter().copied().collect::<Array1<T>>();
    gate_kernel(&gate, base)
}

/// Graph form of one step. `kernels` is `(B, N, C_in·K·K)`, `cols_f` the
/// unfolded fusion map `(B, C_f·K·K, H·W)` and `bias` `(N, 1)`.
pub fn refine_step_graph<T: Real>(g: &mut Graph<T>, m: Var, cols_f: Var, kernels: Var, bias: Var, lambda: Var) -> Var {
    let s = g.shape(m).to_vec();
    let cols_m = g.unfold(m, KERNEL, 1, KERNEL / 2);
    let cols = g.concat(&[cols_m, cols_f], 1);
    let conv = g.bmm(kernels, cols, false);
    let conv = g.add(conv, bias);
    let delta = g.sigmoid(conv);
    let delta = g.reshape(delta, &s);
    let step = g.mul(delta, lambda);
    let next = g.add(m, step);
    g.clamp(next, T::zero(), T::one())
}

/// One step with the convolution split into the mask part, `k_mask`
/// `(B, N, N·K·K)`, and a precomputed fusion part plus bias `(B, N, H·W)`.
/// Equal to [`refine_step_graph`] on the concatenated columns.
pub fn refine_step_split<T: Real>(g: &mut Graph<T>, m: Var, k_mask: Var, fixed: Var, lambda: Var) -> Var {
    let s = g.shape(m).to_vec();
    let cols_m = g.unfold(m, KERNEL, 1, KERNEL / 2);
    let conv = g.bmm(k_mask, cols_m, false);
    let conv = g.add(conv, fixed);
    let delta = g.sigmoid(conv);
    let delta = g.reshape(delta, &s);
    let step = g.mul(delta, lambda);
    let next = g.add(m, step);
    g.clamp(next, T::zero(), T::one())
}

/// Per-sample kernels from gates `(B, N, C_in)` and `W_base` stored `(N, C_in, K·K)`.
pub fn gated_kernels_graph<T: Real>(g: &mut Graph<T>, gates: Var, base: Var) -> Var {
    let s = g.shape(gates).to_vec();
    let (b, n, c_in) = (s[0], s[1], s[2]);
    let gates = g.reshape(gates, &[b, n, c_in, 1]);
    let k = g.mul(gates, base);
    g.reshape(k, &[b, n, c_in * KERNEL * KERNEL])
}

/// Learnable refiner: hypernetwork, base kernel, residual bias and step size.
#[derive(Clone, Debug)]
pub struct Refiner {
    pub hyper: HyperNetwork,
    /// `(N, C_in, K·K)`; class `c` is output channel `c` of the base kernel.
    pub base: ParamId,
    /// `(N, 1)`.
    pub bias: ParamId,
    /// `(1,)`.
    pub lambda: ParamId,
    pub classes: usize,
    pub fusion_channels: usize,
}

impl Refiner {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        classes: usize,
        fusion_channels: usize,
        c_enc: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let c_in = classes + fusion_channels;
        let g = ParamGroup::Refiner;
        let hyper = HyperNetwork::new(store, "refiner.hyper", c_enc, c_in, rng);
        let std = (1.0 / (c_in * KERNEL * KERNEL) as f64).sqrt();
        let base = store.normal("refiner.base", &[classes, c_in, KERNEL * KERNEL], std, g, true, rng);
        let bias = store.filled("refiner.bias", &[classes, 1], 0.0, g, true);
        let lambda = store.filled("refiner.lambda", &[1], LAMBDA_INIT, g, true);
        Self { hyper, base, bias, lambda, classes, fusion_channels }
    }

    pub fn c_in(&self) -> usize {
        self.classes + self.fusion_channels
    }

    /// `T` refinement steps from `m0 (B, N, H, W)` given `f_fusion (B, C_f, H, W)`
    /// and mask encodings `(B, N, C_enc)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, m0: Var, f_fusion: Var, tokens: Var, steps: usize) -> Result<Var> {
        let (ms, fs) = (ctx.g.shape(m0).to_vec(), ctx.g.shape(f_fusion).to_vec());
        ensure!(
            ms.len() == 4 && fs.len() == 4 && ms[0] == fs[0] && ms[2..] == fs[2..],
            Error::Shape(format!("mask {ms:?} and fusion map {fs:?} disagree"))
        );
        ensure!(
            ms[1] == self.classes && fs[1] == self.fusion_channels,
            Error::Shape(format!("refiner expects {} classes and {} fusion channels", self.classes, self.fusion_channels))
        );
        let lambda = ctx.p(self.lambda);
        ensure!(ctx.g.scalar(lambda).is_finite(), Error::State("refinement step size is not finite".into()));
        if steps == 0 {
            return Ok(m0);
        }
        let cols_f = ctx.g.unfold(f_fusion, KERNEL, 1, KERNEL / 2);
        let base = ctx.p(self.base);
        let bias = ctx.p(self.bias);
        // The kernels depend only on the encodings, so they and the fusion-map
        // half of the convolution are shared by every step.
        let gates = self.hyper.forward(ctx, tokens)?;
        let kernels = gated_kernels_graph(&mut ctx.g, gates, base);
        let km = self.classes * KERNEL * KERNEL;
        let k_mask = ctx.g.narrow(kernels, 2, 0, km);
        let k_fusion = ctx.g.narrow(kernels, 2, km, self.fusion_channels * KERNEL * KERNEL);
        let fixed = ctx.g.bmm(k_fusion, cols_f, false);
        let fixed = ctx.g.add(fixed, bias);
        let mut m = m0;
        for _ in 0..steps {
            m = refine_step_split(&mut ctx.g, m, k_mask, fixed, lambda);
        }
        Ok(m)
    }

    pub fn base_kernel<T: Real>(&self, store: &ParamStore<T>) -> BaseKernel<T> {
        let w = store.value(self.base);
        let (n, c_in) = (self.classes, self.c_in());
        BaseKernel(Array4::from_shape_fn((c_in, n, KERNEL, KERNEL), |(i, c, ky, kx)| w[[c, i, ky * KERNEL + kx]]))
    }

    pub fn lambda<T: Real>(&self, store: &ParamStore<T>) -> T {
        store.value(self.lambda)[[0]]
    }
}

fn check_state<T: Real>(state: &MaskState<T>) -> Result<()> {
    ensure!(state.lambda_step.is_finite(), Error::State(format!("step size {} is not finite", state.lambda_step.as_f64())));
    Ok(())
}

/// `M ← Clip(M + λ·ΔM)` for a given residual.
pub fn apply_residual<T: Real>(state: &MaskState<T>, delta: &Array4<T>) -> Result<MaskState<T>> {
    check_state(state)?;
    ensure!(
        delta.dim() == state.probs.dim(),
        Error::Shape(format!("residual {:?} vs mask {:?}", delta.dim(), state.probs.dim()))
    );
    let lam = state.lambda_step;
    let mut probs = state.probs.clone();
    probs.zip_mut_with(delta, |m, &d| *m = (*m + lam * d).max(T::zero()).min(T::one()));
    Ok(MaskState { probs, step: state.step + 1, lambda_step: lam })
}

/// One refinement step with explicit per-class kernels (`kernels[c]` supplies
/// output channel `c`) and residual bias.
pub fn refine_step<T: Real>(
    state: &MaskState<T>,
    f_fusion: &Array4<T>,
    kernels: &[DynamicKernel<T>],
    bias: &Array1<T>,
) -> Result<MaskState<T>> {
    check_state(state)?;
    let (b, n, h, w) = state.probs.dim();
    let (fb, cf, fh, fw) = f_fusion.dim();
    ensure!(
        (b, h, w) == (fb, fh, fw),
        Error::Shape(format!("mask {:?} and fusion map {:?} disagree", state.probs.dim(), f_fusion.dim()))
    );
    ensure!(
        kernels.len() == n && bias.len() == n,
        Error::Shape(format!("{} kernels and {} biases for {n} classes", kernels.len(), bias.len()))
    );
    let c_in = n + cf;
    for k in kernels {
        ensure!(
            k.0.dim() == (c_in, n, KERNEL, KERNEL),
            Error::Shape(format!("kernel {:?} expected ({c_in}, {n}, {KERNEL}, {KERNEL})", k.0.dim()))
        );
    }
    let kk = KERNEL * KERNEL;
    let flat = ArrayD::from_shape_fn(IxDyn(&[b, n, c_in * kk]), |ix| {
        let (c, r) = (ix[1], ix[2]);
        let (i, tap) = (r / kk, r % kk);
        kernels[c].0[[i, c, tap / KERNEL, tap % KERNEL]]
    });
    let mut g = Graph::new();
    let m = g.constant(state.probs.clone().into_dyn());
    let f = g.constant(f_fusion.clone().into_dyn());
    let cols_f = g.unfold(f, KERNEL, 1, KERNEL / 2);
    let k = g.constant(flat);
    let bv = g.constant(bias.clone().into_shape_with_order((n, 1)).expect("column").into_dyn());
    let lam = g.constant(ArrayD::from_elem(IxDyn(&[1]), state.lambda_step));
    let out = refine_step_graph(&mut g, m, cols_f, k, bv, lam);
    Ok(MaskState {
        probs: g.value(out).clone().into_dimensionality::<Ix4>().expect("rank-4"),
        step: state.step + 1,
        lambda_step: state.lambda_step,
    })
}

/// `steps` applications of [`refine_step`]; `steps = 0` returns the input.
pub fn refine<T: Real>(
    init: &MaskState<T>,
    f_fusion: &Array4<T>,
    kernels: &[DynamicKernel<T>],
    bias: &Array1<T>,
    steps: i64,
) -> Result<MaskState<T>> {
    ensure!(steps >= 0, Error::Argument(format!("iteration count {steps} is negative")));
    let mut state = init.clone();
    for _ in 0..steps {
        state = refine_step(&state, f_fusion, kernels, bias)?;
    }
    Ok(state)
}
