use ndarray::{concatenate, s, Array2, ArrayD, ArrayView2, ArrayView3, Axis, Ix2, Ix3, IxDyn, Slice};

use super::kernels::{self, ConvGeom};
use super::{Graph, Op, Real, Var};

/// Sum `g` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to<T: Real>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &n) in shape.iter().enumerate() {
        if n == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn std_layout<T: Real>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn view2<T>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

fn view3<T>(a: &ArrayD<T>) -> ArrayView3<'_, T> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // 0.5·(1 + tanh(u)) = σ(2u), which needs one exp instead of a tanh.
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044_715);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    let y = x * s;
    let dy = s + T::lit(2.0) * x * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(x).mapv(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = std_layout(self.value(a) + self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = std_layout(self.value(a) - self.value(b));
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = std_layout(self.value(a) * self.value(b));
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = std_layout(self.value(a) / self.value(b));
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn powf(&mut self, x: Var, p: T) -> Var {
        self.unary(x, |v| v.powf(p), Op::Powf(x, p))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Ln(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    /// Elementwise clamp; the gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp(x, lo, hi))
    }

    /// `a (m,k) · b (k,n)`, or `a · bᵀ` with `b (n,k)` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = view2(self.value(a));
        let bv = view2(self.value(b));
        let value = if trans_b { av.dot(&bv.t()) } else { av.dot(&bv) };
        self.push(value.into_dyn(), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched `(N,m,k) · (N,k,n)`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = view3(self.value(a));
        let bv = view3(self.value(b));
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        let outs: Vec<Array2<T>> = av
            .outer_iter()
            .zip(bv.outer_iter())
            .map(|(x, y)| if trans_b { x.dot(&y.t()) } else { x.dot(&y) })
            .collect();
        let views: Vec<_> = outs.iter().map(|o| o.view().insert_axis(Axis(0))).collect();
        let value = concatenate(Axis(0), &views).expect("bmm concat").into_dyn();
        self.push(std_layout(value), Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// One weight matrix applied to every batch item: `w (m,k) · x[b] (k,n)`.
    /// With `trans_w`, `w` is stored as `(k,m)`.
    pub fn shared_matmul(&mut self, w: Var, x: Var, trans_w: bool) -> Var {
        let wv = view2(self.value(w));
        let wv = if trans_w { wv.reversed_axes() } else { wv };
        let xv = view3(self.value(x));
        let (nb, _, n) = xv.dim();
        let m = wv.shape()[0];
        let mut out = ndarray::Array3::<T>::zeros((nb, m, n));
        for (mut o, xb) in out.outer_iter_mut().zip(xv.outer_iter()) {
            ndarray::linalg::general_mat_mul(T::one(), &wv, &xb, T::zero(), &mut o);
        }
        self.push(out.into_dyn(), Op::SharedMatMul { w, x, trans_w }, &[w, x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().into_shape_with_order(IxDyn(shape)).expect("reshape size");
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self.value(x).clone().permuted_axes(IxDyn(axes));
        self.push(std_layout(value), Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(std_layout(value), Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self.value(x).slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
        self.push(std_layout(value), Op::Narrow { x, axis, start }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sum over one axis, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self.value(x).sum_axis(Axis(axis));
        self.push(std_layout(value), Op::SumAxis(x, axis), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let n = self.shape(x)[axis];
        let s = self.sum_axis(x, axis);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let last = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last) {
            let m = lane.fold(T::neg_infinity(), |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let z: T = lane.sum();
            lane.mapv_inplace(|v| v / z);
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalize to zero mean and unit variance along `axis` (no affine).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Var {
        let xv = self.value(x);
        let mean = xv.mean_axis(Axis(axis)).expect("non-empty axis").insert_axis(Axis(axis));
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(axis)).expect("non-empty axis").insert_axis(Axis(axis));
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = std_layout(&centered * &inv_std);
        self.push(xhat.clone(), Op::LayerNorm { x, axis, xhat, inv_std }, &[x])
    }

    /// im2col: `(B,C,H,W)` to `(B, C*K*K, Ho*Wo)`.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let geom = ConvGeom { channels: shape[1], height: shape[2], width: shape[3], kernel, stride, pad };
        let (rows, l) = (geom.col_rows(), geom.out_len());
        let xs = self.value(x).as_slice().expect("standard layout");
        let per = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); shape[0] * rows * l];
        for b in 0..shape[0] {
            kernels::unfold_image(&xs[b * per..(b + 1) * per], &geom, &mut out[b * rows * l..(b + 1) * rows * l]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[shape[0], rows, l]), out).expect("unfold shape");
        self.push(value, Op::Unfold { x, geom }, &[x])
    }

    /// Deformable im2col with stride 1 and "same" padding for odd kernels.
    /// `offsets` is `(B, 2*K*K, H, W)` in `(dy, dx)` pairs per tap.
    pub fn deform_unfold(&mut self, x: Var, offsets: Var, kernel: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let geom = ConvGeom { channels: shape[1], height: shape[2], width: shape[3], kernel, stride: 1, pad: kernel / 2 };
        assert_eq!(
            self.shape(offsets),
            &[shape[0], 2 * geom.taps(), geom.out_h(), geom.out_w()],
            "offset field shape"
        );
        let (rows, l) = (geom.col_rows(), geom.out_len());
        let xs = self.value(x).as_slice().expect("standard layout");
        let os = self.value(offsets).as_slice().expect("standard layout");
        let per = geom.channels * geom.height * geom.width;
        let per_off = 2 * geom.taps() * l;
        let mut out = vec![T::zero(); shape[0] * rows * l];
        for b in 0..shape[0] {
            kernels::deform_unfold_image(
                &xs[b * per..(b + 1) * per],
                &os[b * per_off..(b + 1) * per_off],
                &geom,
                &mut out[b * rows * l..(b + 1) * rows * l],
            );
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[shape[0], rows, l]), out).expect("deform shape");
        self.push(value, Op::DeformUnfold { x, offsets, geom }, &[x, offsets])
    }

    /// Depthwise deformable convolution, stride 1 and same padding: `x (B, C, H, W)`,
    /// `offsets (B, 2K², H, W)` as `(dy, dx)` per tap, `weight (C, K²)`.
    /// Equals `deform_unfold`, a per-channel tap product and a sum over taps.
    pub fn deform_depthwise(&mut self, x: Var, offsets: Var, weight: Var, kernel: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let geom = ConvGeom { channels: shape[1], height: shape[2], width: shape[3], kernel, stride: 1, pad: kernel / 2 };
        assert_eq!(
            self.shape(offsets),
            &[shape[0], 2 * geom.taps(), geom.out_h(), geom.out_w()],
            "offset field shape"
        );
        assert_eq!(self.shape(weight), &[geom.channels, geom.taps()], "depthwise weight shape");
        let l = geom.out_len();
        let xs = self.value(x).as_slice().expect("standard layout");
        let os = self.value(offsets).as_slice().expect("standard layout");
        let ws = self.value(weight).as_slice().expect("standard layout");
        let (per, per_off, per_out) = (geom.channels * geom.height * geom.width, 2 * geom.taps() * l, geom.channels * l);
        let mut out = vec![T::zero(); shape[0] * per_out];
        for b in 0..shape[0] {
            kernels::deform_depthwise_image(
                &xs[b * per..(b + 1) * per],
                &os[b * per_off..(b + 1) * per_off],
                ws,
                &geom,
                &mut out[b * per_out..(b + 1) * per_out],
            );
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[shape[0], geom.channels, geom.out_h(), geom.out_w()]), out)
            .expect("deform shape");
        self.push(value, Op::DeformDepthwise { x, offsets, weight, geom }, &[x, offsets, weight])
    }

    /// `(B, 4C, H, W)` to `(B, C, 2H, 2W)`.
    pub fn pixel_shuffle2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s[1] % 4, 0, "pixel_shuffle2 needs channels divisible by 4");
        let c = s[1] / 4;
        let per = s[1] * s[2] * s[3];
        let xs = self.value(x).as_slice().expect("standard layout");
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..s[0] {
            kernels::pixel_shuffle2_image(&xs[b * per..(b + 1) * per], c, s[2], s[3], &mut out[b * per..(b + 1) * per]);
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[s[0], c, 2 * s[2], 2 * s[3]]), out).expect("shuffle shape");
        self.push(value, Op::PixelShuffle2(x), &[x])
    }

    /// Bilinear resize of the two trailing axes of `(B, C, H, W)`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        let rows = kernels::bilinear_matrix::<T>(out_h, s[2]);
        let cols = kernels::bilinear_matrix::<T>(out_w, s[3]);
        let xv = self.value(x);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[s[0], s[1], out_h, out_w]));
        for b in 0..s[0] {
            for c in 0..s[1] {
                let plane = xv.slice(s![b, c, .., ..]);
                let r = rows.dot(&plane).dot(&cols.t());
                out.slice_mut(s![b, c, .., ..]).assign(&r);
            }
        }
        self.push(out, Op::Resize { x, rows, cols }, &[x])
    }

    /// Mean pixel cross-entropy of `(B, N, H, W)` logits against class ids laid out `(B, H, W)`.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize]) -> Var {
        let lv = self.value(logits);
        let s = lv.shape().to_vec();
        let (nb, nc, hw) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(target.len(), nb * hw, "target size");
        let flat = lv.as_slice().expect("standard layout");
        let mut probs = vec![T::zero(); flat.len()];
        let mut total = T::zero();
        for b in 0..nb {
            for p in 0..hw {
                let at = |c: usize| (b * nc + c) * hw + p;
                let m = (0..nc).map(|c| flat[at(c)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..nc).map(|c| (flat[at(c)] - m).exp()).sum();
                for c in 0..nc {
                    probs[at(c)] = (flat[at(c)] - m).exp() / z;
                }
                let y = target[b * hw + p];
                total += z.ln() + m - flat[at(y)];
            }
        }
        let loss = total / T::lit((nb * hw) as f64);
        let probs = ArrayD::from_shape_vec(IxDyn(&s), probs).expect("probs shape");
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CrossEntropy { logits, probs, target: target.to_vec() },
            &[logits],
        )
    }

    /// Soft Dice loss `1 - mean_c (2 Σpy + eps)/(Σp + Σy + eps)` with per-class sums
    /// taken over the whole batch.
    pub fn dice_loss(&mut self, probs: Var, target: &[usize], eps: T) -> Var {
        let pv = self.value(probs);
        let s = pv.shape().to_vec();
        let (nb, nc, hw) = (s[0], s[1], s[2] * s[3]);
        assert_eq!(target.len(), nb * hw, "target size");
        let flat = pv.as_slice().expect("standard layout");
        let mut inter = vec![T::zero(); nc];
        let mut psum = vec![T::zero(); nc];
        let mut ysum = vec![T::zero(); nc];
        for b in 0..nb {
            for c in 0..nc {
                let plane = &flat[(b * nc + c) * hw..(b * nc + c + 1) * hw];
                for (p, &v) in plane.iter().enumerate() {
                    psum[c] += v;
                    if target[b * hw + p] == c {
                        inter[c] += v;
                        ysum[c] += T::one();
                    }
                }
            }
        }
        let denom: Vec<T> = (0..nc).map(|c| psum[c] + ysum[c] + eps).collect();
        let mean_dice = (0..nc).map(|c| (T::lit(2.0) * inter[c] + eps) / denom[c]).sum::<T>() / T::lit(nc as f64);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), T::one() - mean_dice),
            Op::DiceLoss { probs, target: target.to_vec(), eps, inter, denom },
            &[probs],
        )
    }

    pub(crate) fn backprop(&self, i: usize, g: ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                }
                self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to(g.mapv(|v| -v), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = std_layout(&g * self.value(*b));
                    self.accumulate(grads, *a, reduce_to(ga, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let gb = std_layout(&g * self.value(*a));
                    self.accumulate(grads, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let ga = std_layout(&g / bv);
                    self.accumulate(grads, *a, reduce_to(ga, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = std_layout(&(&g * out) / bv).mapv(|v| -v);
                    self.accumulate(grads, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.mapv(|v| v * *s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g),
            Op::Powf(x, p) => {
                let xv = self.value(*x);
                let gx = std_layout(&g * &xv.mapv(|v| *p * v.powf(*p - T::one())));
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = std_layout(&g * &out.mapv(|y| y * (T::one() - y)));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = std_layout(&g * &out.mapv(|y| T::one() - y * y));
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let mut gx = g;
                ndarray::Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| *gv *= gelu_parts(xv).1);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g;
                ndarray::Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                    if xv <= T::zero() {
                        *gv = T::zero();
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Ln(x) => {
                let gx = std_layout(&g / self.value(*x));
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = std_layout(&g * out);
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = std_layout(&g * &self.value(*x).mapv(|v| v.signum()));
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let mut gx = g;
                ndarray::Zip::from(&mut gx).and(self.value(*x)).for_each(|gv, &xv| {
                    if xv < *lo || xv > *hi {
                        *gv = T::zero();
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul { a, b, trans_b } => {
                let g2 = view2(&g);
                let av = view2(self.value(*a));
                let bv = view2(self.value(*b));
                if self.requires_grad(*a) {
                    let ga = if *trans_b { g2.dot(&bv) } else { g2.dot(&bv.t()) };
                    self.accumulate(grads, *a, ga.into_dyn());
                }
                if self.requires_grad(*b) {
                    let gb = if *trans_b { g2.t().dot(&av) } else { av.t().dot(&g2) };
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let g3 = view3(&g);
                let av = view3(self.value(*a));
                let bv = view3(self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = ndarray::Array3::<T>::zeros(av.raw_dim());
                    for (n, mut slot) in ga.outer_iter_mut().enumerate() {
                        let (gn, bn) = (g3.index_axis(Axis(0), n), bv.index_axis(Axis(0), n));
                        if *trans_b {
                            slot.assign(&gn.dot(&bn));
                        } else {
                            slot.assign(&gn.dot(&bn.t()));
                        }
                    }
                    self.accumulate(grads, *a, ga.into_dyn());
                }
                if self.requires_grad(*b) {
                    let mut gb = ndarray::Array3::<T>::zeros(bv.raw_dim());
                    for (n, mut slot) in gb.outer_iter_mut().enumerate() {
                        let (gn, an) = (g3.index_axis(Axis(0), n), av.index_axis(Axis(0), n));
                        if *trans_b {
                            slot.assign(&gn.t().dot(&an));
                        } else {
                            slot.assign(&an.t().dot(&gn));
                        }
                    }
                    self.accumulate(grads, *b, gb.into_dyn());
                }
            }
            Op::SharedMatMul { w, x, trans_w } => {
                let g3 = view3(&g);
                let wv = view2(self.value(*w));
                let xv = view3(self.value(*x));
                if self.requires_grad(*w) {
                    // Accumulate Σ_b g_b x_bᵀ (or its transpose) in place.
                    let mut gw = Array2::<T>::zeros(wv.raw_dim());
                    for (gb, xb) in g3.outer_iter().zip(xv.outer_iter()) {
                        if *trans_w {
                            ndarray::linalg::general_mat_mul(T::one(), &xb, &gb.t(), T::one(), &mut gw);
                        } else {
                            ndarray::linalg::general_mat_mul(T::one(), &gb, &xb.t(), T::one(), &mut gw);
                        }
                    }
                    self.accumulate(grads, *w, gw.into_dyn());
                }
                if self.requires_grad(*x) {
                    let wt = if *trans_w { wv } else { wv.reversed_axes() };
                    let mut gx = ndarray::Array3::<T>::zeros(xv.raw_dim());
                    for (mut slot, gb) in gx.outer_iter_mut().zip(g3.outer_iter()) {
                        ndarray::linalg::general_mat_mul(T::one(), &wt, &gb, T::zero(), &mut slot);
                    }
                    self.accumulate(grads, *x, gx.into_dyn());
                }
            }
            Op::Reshape(x) => {
                let gx = g.into_shape_with_order(self.value(*x).raw_dim()).expect("reshape grad");
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gx = std_layout(g.permuted_axes(IxDyn(&inverse)));
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let mut start = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        let part = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                        self.accumulate(grads, x, std_layout(part));
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = ArrayD::<T>::zeros(self.value(*x).raw_dim());
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len)).assign(&g);
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gv = *g.iter().next().expect("scalar grad");
                self.accumulate(grads, *x, ArrayD::from_elem(self.value(*x).raw_dim(), gv));
            }
            Op::SumAxis(x, axis) => {
                let shape = self.value(*x).raw_dim();
                let gx = g.insert_axis(Axis(*axis)).broadcast(shape).expect("broadcast").to_owned();
                self.accumulate(grads, *x, std_layout(gx));
            }
            Op::Softmax(x) => {
                let last = Axis(out.ndim() - 1);
                let gy = &g * out;
                let dot = gy.sum_axis(last).insert_axis(last);
                let gx = std_layout(&gy - &(out * &dot));
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, axis, xhat, inv_std } => {
                let ax = Axis(*axis);
                let mean_g = g.mean_axis(ax).expect("axis").insert_axis(ax);
                let mean_gx = (&g * xhat).mean_axis(ax).expect("axis").insert_axis(ax);
                let gx = std_layout(&(&(&g - &mean_g) - &(xhat * &mean_gx)) * inv_std);
                self.accumulate(grads, *x, gx);
            }
            Op::Unfold { x, geom } => {
                let s = self.shape(*x).to_vec();
                let per = geom.channels * geom.height * geom.width;
                let (rows, l) = (geom.col_rows(), geom.out_len());
                let gs = g.as_slice().expect("standard layout");
                let mut gx = vec![T::zero(); s[0] * per];
                for b in 0..s[0] {
                    kernels::fold_image(&gs[b * rows * l..(b + 1) * rows * l], geom, &mut gx[b * per..(b + 1) * per]);
                }
                self.accumulate(grads, *x, ArrayD::from_shape_vec(IxDyn(&s), gx).expect("fold shape"));
            }
            Op::DeformUnfold { x, offsets, geom } => {
                let s = self.shape(*x).to_vec();
                let os_shape = self.shape(*offsets).to_vec();
                let per = geom.channels * geom.height * geom.width;
                let (rows, l) = (geom.col_rows(), geom.out_len());
                let per_off = 2 * geom.taps() * l;
                let gs = g.as_slice().expect("standard layout");
                let xs = self.value(*x).as_slice().expect("standard layout");
                let os = self.value(*offsets).as_slice().expect("standard layout");
                let mut gx = vec![T::zero(); s[0] * per];
                let mut goff = vec![T::zero(); s[0] * per_off];
                for b in 0..s[0] {
                    kernels::deform_fold_image(
                        &gs[b * rows * l..(b + 1) * rows * l],
                        &xs[b * per..(b + 1) * per],
                        &os[b * per_off..(b + 1) * per_off],
                        geom,
                        &mut gx[b * per..(b + 1) * per],
                        &mut goff[b * per_off..(b + 1) * per_off],
                    );
                }
                self.accumulate(grads, *x, ArrayD::from_shape_vec(IxDyn(&s), gx).expect("shape"));
                self.accumulate(grads, *offsets, ArrayD::from_shape_vec(IxDyn(&os_shape), goff).expect("shape"));
            }
            Op::DeformDepthwise { x, offsets, weight, geom } => {
                let s = self.shape(*x).to_vec();
                let l = geom.out_len();
                let (per, per_off, per_out) = (geom.channels * geom.height * geom.width, 2 * geom.taps() * l, geom.channels * l);
                let gs = g.as_slice().expect("standard layout");
                let xs = self.value(*x).as_slice().expect("standard layout");
                let os = self.value(*offsets).as_slice().expect("standard layout");
                let ws = self.value(*weight).as_slice().expect("standard layout");
                let mut gx = vec![T::zero(); s[0] * per];
                let mut goff = vec![T::zero(); s[0] * per_off];
                let mut gw = vec![T::zero(); ws.len()];
                for b in 0..s[0] {
                    kernels::deform_depthwise_grad(
                        &gs[b * per_out..(b + 1) * per_out],
                        &xs[b * per..(b + 1) * per],
                        &os[b * per_off..(b + 1) * per_off],
                        ws,
                        geom,
                        &mut gx[b * per..(b + 1) * per],
                        &mut goff[b * per_off..(b + 1) * per_off],
                        &mut gw,
                    );
                }
                let os_shape = self.shape(*offsets).to_vec();
                let w_shape = self.shape(*weight).to_vec();
                self.accumulate(grads, *x, ArrayD::from_shape_vec(IxDyn(&s), gx).expect("shape"));
                self.accumulate(grads, *offsets, ArrayD::from_shape_vec(IxDyn(&os_shape), goff).expect("shape"));
                self.accumulate(grads, *weight, ArrayD::from_shape_vec(IxDyn(&w_shape), gw).expect("shape"));
            }
            Op::PixelShuffle2(x) => {
                let s = self.shape(*x).to_vec();
                let c = s[1] / 4;
                let per = s[1] * s[2] * s[3];
                let gs = g.as_slice().expect("standard layout");
                let mut gx = vec![T::zero(); gs.len()];
                for b in 0..s[0] {
                    kernels::pixel_unshuffle2_image(&gs[b * per..(b + 1) * per], c, s[2], s[3], &mut gx[b * per..(b + 1) * per]);
                }
                self.accumulate(grads, *x, ArrayD::from_shape_vec(IxDyn(&s), gx).expect("shape"));
            }
            Op::Resize { x, rows, cols } => {
                let s = self.shape(*x).to_vec();
                let mut gx = ArrayD::<T>::zeros(IxDyn(&s));
                for b in 0..s[0] {
                    for c in 0..s[1] {
                        let plane = g.slice(s![b, c, .., ..]);
                        let r = rows.t().dot(&plane).dot(cols);
                        gx.slice_mut(s![b, c, .., ..]).assign(&r);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, probs, target } => {
                let gv = *g.iter().next().expect("scalar grad");
                let s = probs.shape();
                let (nb, nc, hw) = (s[0], s[1], s[2] * s[3]);
                let scale = gv / T::lit((nb * hw) as f64);
                let mut gx = probs.mapv(|p| p * scale);
                let flat = gx.as_slice_mut().expect("standard layout");
                for b in 0..nb {
                    for p in 0..hw {
                        flat[(b * nc + target[b * hw + p]) * hw + p] -= scale;
                    }
                }
                self.accumulate(grads, *logits, gx);
            }
            Op::DiceLoss { probs, target, eps, inter, denom } => {
                let gv = *g.iter().next().expect("scalar grad");
                let pv = self.value(*probs);
                let s = pv.shape().to_vec();
                let (nb, nc, hw) = (s[0], s[1], s[2] * s[3]);
                let two = T::lit(2.0);
                let k = -gv / T::lit(nc as f64);
                let mut gx = vec![T::zero(); pv.len()];
                for b in 0..nb {
                    for c in 0..nc {
                        let d2 = denom[c] * denom[c];
                        let num = two * inter[c] + *eps;
                        let base = (b * nc + c) * hw;
                        for p in 0..hw {
                            let y = if target[b * hw + p] == c { T::one() } else { T::zero() };
                            gx[base + p] = k * (two * y * denom[c] - num) / d2;
                        }
                    }
                }
                self.accumulate(grads, *probs, ArrayD::from_shape_vec(IxDyn(&s), gx).expect("shape"));
            }
        }
    }
}
