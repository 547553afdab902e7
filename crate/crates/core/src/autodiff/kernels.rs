//! Raw loops behind the spatial ops. All buffers are row-major NCHW slices.

use ndarray::Array2;

use super::Real;

/// Geometry of a sliding-window op over a `(C, H, W)` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Rows of the column matrix: `C * K * K`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.taps()
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// im2col for one image: `x` is `(C, H, W)`, `cols` is `(C*K*K, Ho*Wo)`.
pub(crate) fn unfold_image<T: Real>(x: &[T], geom: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let l = oh * ow;
    for c in 0..geom.channels {
        let plane = &x[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let out = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    let dst = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * geom.width..(iy as usize + 1) * geom.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        *d = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// col2im for one image, accumulating into `x`.
pub(crate) fn fold_image<T: Real>(cols: &[T], geom: &ConvGeom, x: &mut [T]) {
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let l = oh * ow;
    for c in 0..geom.channels {
        let plane = &mut x[c * geom.height * geom.width..(c + 1) * geom.height * geom.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let col = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * geom.width;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += col[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sample site: four corner indices (or `None` when outside) with weights
/// and the weight derivatives with respect to the y and x coordinates.
struct Site<T> {
    idx: [Option<usize>; 4],
    w: [T; 4],
    dwy: [T; 4],
    dwx: [T; 4],
}

fn site<T: Real>(py: T, px: T, h: usize, w: usize) -> Site<T> {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let y0 = y0f.to_isize().unwrap_or(isize::MIN / 2);
    let x0 = x0f.to_isize().unwrap_or(isize::MIN / 2);
    let one = T::one();
    let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
    let w4 = [(one - ly) * (one - lx), (one - ly) * lx, ly * (one - lx), ly * lx];
    let dwy = [-(one - lx), -lx, one - lx, lx];
    let dwx = [-(one - ly), one - ly, -ly, ly];
    let mut idx = [None; 4];
    for (slot, &(cy, cx)) in idx.iter_mut().zip(corners.iter()) {
        if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
            *slot = Some(cy as usize * w + cx as usize);
        }
    }
    Site { idx, w: w4, dwy, dwx }
}

/// Deformable im2col (stride 1). `offsets` is `(2*K*K, Ho, Wo)` holding `(dy, dx)`
/// per tap; samples outside the image read zero.
pub(crate) fn deform_unfold_image<T: Real>(x: &[T], offsets: &[T], geom: &ConvGeom, cols: &mut [T]) {
    let (h, w, k) = (geom.height, geom.width, geom.kernel);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let l = oh * ow;
    let hw = h * w;
    for t in 0..geom.taps() {
        let (ky, kx) = (t / k, t % k);
        let off_y = &offsets[(2 * t) * l..(2 * t + 1) * l];
        let off_x = &offsets[(2 * t + 1) * l..(2 * t + 2) * l];
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                let py = T::lit((oy + ky) as f64 - geom.pad as f64) + off_y[p];
                let px = T::lit((ox + kx) as f64 - geom.pad as f64) + off_x[p];
                let s = site(py, px, h, w);
                for c in 0..geom.channels {
                    let plane = &x[c * hw..(c + 1) * hw];
                    let mut acc = T::zero();
                    for j in 0..4 {
                        if let Some(i) = s.idx[j] {
                            acc += s.w[j] * plane[i];
                        }
                    }
                    cols[(c * geom.taps() + t) * l + p] = acc;
                }
            }
        }
    }
}

/// Backward of [`deform_unfold_image`]: accumulates into `gx` and `goff`.
pub(crate) fn deform_fold_image<T: Real>(
    gcols: &[T],
    x: &[T],
    offsets: &[T],
    geom: &ConvGeom,
    gx: &mut [T],
    goff: &mut [T],
) {
    let (h, w, k) = (geom.height, geom.width, geom.kernel);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let l = oh * ow;
    let hw = h * w;
    for t in 0..geom.taps() {
        let (ky, kx) = (t / k, t % k);
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                let py = T::lit((oy + ky) as f64 - geom.pad as f64) + offsets[(2 * t) * l + p];
                let px = T::lit((ox + kx) as f64 - geom.pad as f64) + offsets[(2 * t + 1) * l + p];
                let s = site(py, px, h, w);
                let mut gy = T::zero();
                let mut gxo = T::zero();
                for c in 0..geom.channels {
                    let g = gcols[(c * geom.taps() + t) * l + p];
                    if g == T::zero() {
                        continue;
                    }
                    for j in 0..4 {
                        if let Some(i) = s.idx[j] {
                            gx[c * hw + i] += g * s.w[j];
                            let v = x[c * hw + i];
                            gy += g * v * s.dwy[j];
                            gxo += g * v * s.dwx[j];
                        }
                    }
                }
                goff[(2 * t) * l + p] += gy;
                goff[(2 * t + 1) * l + p] += gxo;
            }
        }
    }
}

/// Sample sites of every (tap, output position) pair, tap-major.
fn deform_sites<T: Real>(offsets: &[T], geom: &ConvGeom) -> Vec<Site<T>> {
    let (h, w, k) = (geom.height, geom.width, geom.kernel);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let l = oh * ow;
    let mut sites = Vec::with_capacity(geom.taps() * l);
    for t in 0..geom.taps() {
        let (ky, kx) = (t / k, t % k);
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                let py = T::lit((oy + ky) as f64 - geom.pad as f64) + offsets[(2 * t) * l + p];
                let px = T::lit((ox + kx) as f64 - geom.pad as f64) + offsets[(2 * t + 1) * l + p];
                sites.push(site(py, px, h, w));
            }
        }
    }
    sites
}

/// Depthwise deformable convolution (stride 1) of one image:
/// `out[c, p] = Σ_t w[c, t] · x_c(p + k_t + off_t(p))`, with `w` laid out `(C, K*K)`.
pub(crate) fn deform_depthwise_image<T: Real>(x: &[T], offsets: &[T], wt: &[T], geom: &ConvGeom, out: &mut [T]) {
    let (l, hw, taps) = (geom.out_len(), geom.height * geom.width, geom.taps());
    let sites = deform_sites(offsets, geom);
    for c in 0..geom.channels {
        let plane = &x[c * hw..(c + 1) * hw];
        let row = &mut out[c * l..(c + 1) * l];
        for t in 0..taps {
            let wct = wt[c * taps + t];
            for (o, s) in row.iter_mut().zip(&sites[t * l..(t + 1) * l]) {
                let mut acc = T::zero();
                for j in 0..4 {
                    if let Some(i) = s.idx[j] {
                        acc += s.w[j] * plane[i];
                    }
                }
                *o += wct * acc;
            }
        }
    }
}

/// Backward of [`deform_depthwise_image`]: accumulates into `gx`, `goff` and `gw`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_depthwise_grad<T: Real>(
    gout: &[T],
    x: &[T],
    offsets: &[T],
    wt: &[T],
    geom: &ConvGeom,
    gx: &mut [T],
    goff: &mut [T],
    gw: &mut [T],
) {
    let (l, hw, taps) = (geom.out_len(), geom.height * geom.width, geom.taps());
    let sites = deform_sites(offsets, geom);
    for c in 0..geom.channels {
        let plane = &x[c * hw..(c + 1) * hw];
        let gplane = &mut gx[c * hw..(c + 1) * hw];
        let grow = &gout[c * l..(c + 1) * l];
        for t in 0..taps {
            let wct = wt[c * taps + t];
            let (goy, gox) = goff[2 * t * l..(2 * t + 2) * l].split_at_mut(l);
            let mut gw_acc = T::zero();
            for p in 0..l {
                let go = grow[p];
                if go == T::zero() {
                    continue;
                }
                let s = &sites[t * l + p];
                let g = go * wct;
                let (mut sample, mut gy, mut gxo) = (T::zero(), T::zero(), T::zero());
                for j in 0..4 {
                    if let Some(i) = s.idx[j] {
                        let v = plane[i];
                        sample += s.w[j] * v;
                        gplane[i] += g * s.w[j];
                        gy += v * s.dwy[j];
                        gxo += v * s.dwx[j];
                    }
                }
                goy[p] += g * gy;
                gox[p] += g * gxo;
                gw_acc += go * sample;
            }
            gw[c * taps + t] += gw_acc;
        }
    }
}

/// Depth-to-space by 2: `(4C, H, W)` with channel `4c + 2dy + dx` into `(C, 2H, 2W)`.
pub(crate) fn pixel_shuffle2_image<T: Real>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for sub in 0..4 {
            let (dy, dx) = (sub / 2, sub % 2);
            let src = &x[(4 * ch + sub) * h * w..(4 * ch + sub + 1) * h * w];
            for y in 0..h {
                let row = &mut out[ch * oh * ow + (2 * y + dy) * ow..];
                for xx in 0..w {
                    row[2 * xx + dx] = src[y * w + xx];
                }
            }
        }
    }
}

pub(crate) fn pixel_unshuffle2_image<T: Real>(g: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for sub in 0..4 {
            let (dy, dx) = (sub / 2, sub % 2);
            let dst = &mut out[(4 * ch + sub) * h * w..(4 * ch + sub + 1) * h * w];
            for y in 0..h {
                let row = &g[ch * oh * ow + (2 * y + dy) * ow..];
                for xx in 0..w {
                    dst[y * w + xx] = row[2 * xx + dx];
                }
            }
        }
    }
}

/// 1-D linear interpolation matrix `(out, in)` with half-pixel centers and edge
/// clamping (the `align_corners = false` convention).
pub fn bilinear_matrix<T: Real>(out: usize, input: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((out, input));
    let scale = input as f64 / out as f64;
    for i in 0..out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += T::lit(1.0 - frac);
        m[[i, i1]] += T::lit(frac);
    }
    m
}
