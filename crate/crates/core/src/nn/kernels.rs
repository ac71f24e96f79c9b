//! Forward and backward kernels on raw tensors.
//!
//! Everything here is a pure function; the autograd graph in [`super::graph`]
//! strings them together. Convolutions lower to GEMM via im2col.

use crate::tensor::Tensor;

/// `c = a · b + beta · c` for row-major `m×k` and `k×n` operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            padding,
            dilation,
        }
    }

    /// "Same" padding for odd kernels at the given dilation.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvGeom::new(kernel, stride, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn out_size(&self, n: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        assert!(
            n + 2 * self.padding >= span,
            "input size {n} too small for kernel span {span}"
        );
        (n + 2 * self.padding - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &Tensor, g: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let (c, h, w) = x.chw();
    let k = g.kernel;
    let p = ho * wo;
    let mut col = vec![0.0; c * k * k * p];
    let xd = x.data();
    for ci in 0..c {
        let plane = &xd[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 && dx >= 0 && (wo as isize + dx) <= w as isize {
                        drow.copy_from_slice(&src[dx as usize..dx as usize + wo]);
                        continue;
                    }
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], shape: (usize, usize, usize), g: ConvGeom, ho: usize, wo: usize) -> Tensor {
    let (c, h, w) = shape;
    let k = g.kernel;
    let p = ho * wo;
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        let plane = &mut od[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * p..(row + 1) * p];
                let dy = (ky * g.dilation) as isize - g.padding as isize;
                let dx = (kx * g.dilation) as isize - g.padding as isize;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x: [C,H,W]`, `weight: [O,C,k,k]`, `bias: [O]` → `[O,Ho,Wo]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Tensor {
    let (c, h, w) = x.chw();
    let ws = weight.shape();
    assert_eq!(ws.len(), 4, "conv weight must be [O,C,k,k]");
    assert_eq!(ws[1], c, "conv expects {} input channels, got {c}", ws[1]);
    assert_eq!((ws[2], ws[3]), (g.kernel, g.kernel));
    let o = ws[0];
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let p = ho * wo;
    let kk = c * g.kernel * g.kernel;
    let mut out = vec![0.0; o * p];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(p).enumerate() {
            chunk.fill(b.data()[oc]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(o, kk, p, weight.data(), kk, 1, x.data(), p, 1, beta, &mut out);
    } else {
        let col = im2col(x, g, ho, wo);
        gemm(o, kk, p, weight.data(), kk, 1, &col, p, 1, beta, &mut out);
    }
    Tensor::from_vec(&[o, ho, wo], out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads {
    let (c, h, w) = x.chw();
    let (o, ho, wo) = grad_out.chw();
    let p = ho * wo;
    let kk = c * g.kernel * g.kernel;
    let go = grad_out.data();

    let bias: Vec<f64> = go.chunks(p).map(|ch| ch.iter().sum()).collect();

    let col_owned;
    let col: &[f64] = if g.is_pointwise() {
        x.data()
    } else {
        col_owned = im2col(x, g, ho, wo);
        &col_owned
    };
    // dW[O,K] = dY[O,P] · col[K,P]^T
    let mut dw = vec![0.0; o * kk];
    gemm(o, p, kk, go, p, 1, col, 1, p, 0.0, &mut dw);

    let input = need_input.then(|| {
        // dcol[K,P] = W[O,K]^T · dY[O,P]
        let mut dcol = vec![0.0; kk * p];
        gemm(kk, o, p, weight.data(), 1, kk, go, p, 1, 0.0, &mut dcol);
        if g.is_pointwise() {
            Tensor::from_vec(&[c, h, w], dcol)
        } else {
            col2im(&dcol, (c, h, w), g, ho, wo)
        }
    });
    ConvGrads {
        input,
        weight: Tensor::from_vec(weight.shape(), dw),
        bias: Tensor::from_vec(&[o], bias),
    }
}

/// Bilinear read of a `h×w` plane at continuous `(x, y)`, coordinates clamped
/// into the plane. Returns the value and the four corner taps
/// `(index, weight)` for scattering gradients.
#[inline]
pub(crate) fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor();
    let y0 = yc.floor();
    let fx = xc - x0;
    let fy = yc - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

#[inline]
pub(crate) fn bilinear_sample(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor();
    let y0 = yc.floor();
    let fx = xc - x0;
    let fy = yc - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let top = (1.0 - fx) * plane[y0 * w + x0] + fx * plane[y0 * w + x1];
    let bottom = (1.0 - fx) * plane[y1 * w + x0] + fx * plane[y1 * w + x1];
    (1.0 - fy) * top + fy * bottom
}

/// Partial derivatives of [`bilinear_sample`] with respect to `x` and `y`.
/// Zero along an axis whose coordinate was clamped.
#[inline]
pub(crate) fn bilinear_coord_grad(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> (f64, f64) {
    let inside_x = x >= 0.0 && x <= (w - 1) as f64;
    let inside_y = y >= 0.0 && y <= (h - 1) as f64;
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor();
    let y0 = yc.floor();
    let fx = xc - x0;
    let fy = yc - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (a, b, c, d) = (
        plane[y0 * w + x0],
        plane[y0 * w + x1],
        plane[y1 * w + x0],
        plane[y1 * w + x1],
    );
    let gx = if inside_x && x1 != x0 {
        (1.0 - fy) * (b - a) + fy * (d - c)
    } else {
        0.0
    };
    let gy = if inside_y && y1 != y0 {
        (1.0 - fx) * (c - a) + fx * (d - b)
    } else {
        0.0
    };
    (gx, gy)
}

/// Backward warp: output `(y,x)` samples `img` at `(x + u, y + v)`, border clamped.
pub fn warp(img: &Tensor, flow: &Tensor) -> Tensor {
    let (c, h, w) = img.chw();
    assert_eq!(flow.shape(), &[2, h, w], "flow shape must match image");
    let (fu, fv) = (flow.plane(0), flow.plane(1));
    let mut out = Tensor::zeros(&[c, h, w]);
    let od = out.data_mut();
    for ci in 0..c {
        let plane = img.plane(ci);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                od[ci * h * w + i] =
                    bilinear_sample(plane, h, w, x as f64 + fu[i], y as f64 + fv[i]);
            }
        }
    }
    out
}

pub fn warp_backward(
    img: &Tensor,
    flow: &Tensor,
    grad_out: &Tensor,
    need_img: bool,
    need_flow: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (c, h, w) = img.chw();
    let (fu, fv) = (flow.plane(0), flow.plane(1));
    let go = grad_out.data();
    let mut gi = need_img.then(|| Tensor::zeros(&[c, h, w]));
    let mut gf = need_flow.then(|| Tensor::zeros(&[2, h, w]));
    for ci in 0..c {
        let plane = img.plane(ci);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let g = go[ci * h * w + i];
                if g == 0.0 {
                    continue;
                }
                let (sx, sy) = (x as f64 + fu[i], y as f64 + fv[i]);
                if let Some(gi) = gi.as_mut() {
                    let gd = gi.data_mut();
                    for (idx, wt) in bilinear_taps(h, w, sx, sy) {
                        gd[ci * h * w + idx] += g * wt;
                    }
                }
                if let Some(gf) = gf.as_mut() {
                    let (dx, dy) = bilinear_coord_grad(plane, h, w, sx, sy);
                    let fd = gf.data_mut();
                    fd[i] += g * dx;
                    fd[h * w + i] += g * dy;
                }
            }
        }
    }
    (gi, gf)
}

/// `f0, f1: [C,H,W]` → `[H·W, H, W]`, entry `(p, q) = <f0[:,p], f1[:,q]> · scale`.
pub fn correlation(f0: &Tensor, f1: &Tensor, scale: f64) -> Tensor {
    let (c, h, w) = f0.chw();
    assert_eq!(f0.shape(), f1.shape(), "correlation needs equal feature shapes");
    let p = h * w;
    let mut out = vec![0.0; p * p];
    // out[P,Q] = f0^T[P,C] · f1[C,Q]
    gemm(p, c, p, f0.data(), 1, p, f1.data(), p, 1, 0.0, &mut out);
    if scale != 1.0 {
        for v in &mut out {
            *v *= scale;
        }
    }
    Tensor::from_vec(&[p, h, w], out)
}

pub fn correlation_backward(
    f0: &Tensor,
    f1: &Tensor,
    grad_out: &Tensor,
    scale: f64,
) -> (Tensor, Tensor) {
    let (c, h, w) = f0.chw();
    let p = h * w;
    let go = grad_out.data();
    // df0[C,P] = f1[C,Q] · dC^T[Q,P]
    let mut d0 = vec![0.0; c * p];
    gemm(c, p, p, f1.data(), p, 1, go, 1, p, 0.0, &mut d0);
    // df1[C,Q] = f0[C,P] · dC[P,Q]
    let mut d1 = vec![0.0; c * p];
    gemm(c, p, p, f0.data(), p, 1, go, p, 1, 0.0, &mut d1);
    let mut d0 = Tensor::from_vec(&[c, h, w], d0);
    let mut d1 = Tensor::from_vec(&[c, h, w], d1);
    d0.scale_assign(scale);
    d1.scale_assign(scale);
    (d0, d1)
}

/// Non-overlapping `k×k` average pooling over the last two axes of `[N,H,W]`.
pub fn avg_pool(x: &Tensor, k: usize) -> Tensor {
    let (n, h, w) = x.chw();
    let (ho, wo) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(&[n, ho, wo]);
    let od = out.data_mut();
    for ni in 0..n {
        let plane = x.plane(ni);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += plane[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                od[(ni * ho + oy) * wo + ox] = s * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(input_shape: &[usize], grad_out: &Tensor, k: usize) -> Tensor {
    let (n, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (_, ho, wo) = grad_out.chw();
    let inv = 1.0 / (k * k) as f64;
    let mut gi = Tensor::zeros(&[n, h, w]);
    let gd = gi.data_mut();
    let go = grad_out.data();
    for ni in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = go[(ni * ho + oy) * wo + ox] * inv;
                for dy in 0..k {
                    for dx in 0..k {
                        gd[(ni * h + oy * k + dy) * w + ox * k + dx] += g;
                    }
                }
            }
        }
    }
    gi
}

/// Window `[start, end)` of adaptive pooling bin `i` out of `bins` over length `n`.
#[inline]
pub(crate) fn adaptive_window(i: usize, bins: usize, n: usize) -> (usize, usize) {
    let start = (i * n) / bins;
    let end = ((i + 1) * n).div_ceil(bins);
    (start, end)
}

/// Adaptive average pooling of `[C,H,W]` to `[C,bins,bins]`.
pub fn adaptive_avg_pool(x: &Tensor, bins: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let mut out = Tensor::zeros(&[c, bins, bins]);
    let od = out.data_mut();
    for ci in 0..c {
        let plane = x.plane(ci);
        for by in 0..bins {
            let (y0, y1) = adaptive_window(by, bins, h);
            for bx in 0..bins {
                let (x0, x1) = adaptive_window(bx, bins, w);
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += plane[y * w + x];
                    }
                }
                od[(ci * bins + by) * bins + bx] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor, bins: usize) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let mut gi = Tensor::zeros(&[c, h, w]);
    let gd = gi.data_mut();
    let go = grad_out.data();
    for ci in 0..c {
        for by in 0..bins {
            let (y0, y1) = adaptive_window(by, bins, h);
            for bx in 0..bins {
                let (x0, x1) = adaptive_window(bx, bins, w);
                let g = go[(ci * bins + by) * bins + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        gd[(ci * h + y) * w + x] += g;
                    }
                }
            }
        }
    }
    gi
}

#[inline]
fn resize_taps(dst: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, t)
}

/// Bilinear resize of `[C,h,w]` to `[C,H,W]` with half-pixel centers.
pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = x.chw();
    let ys: Vec<_> = (0..out_h).map(|y| resize_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| resize_taps(x, w, out_w)).collect();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let od = out.data_mut();
    for ci in 0..c {
        let plane = x.plane(ci);
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = (1.0 - tx) * plane[y0 * w + x0] + tx * plane[y0 * w + x1];
                let bot = (1.0 - tx) * plane[y1 * w + x0] + tx * plane[y1 * w + x1];
                od[(ci * out_h + oy) * out_w + ox] = (1.0 - ty) * top + ty * bot;
            }
        }
    }
    out
}

pub fn upsample_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (_, out_h, out_w) = grad_out.chw();
    let ys: Vec<_> = (0..out_h).map(|y| resize_taps(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| resize_taps(x, w, out_w)).collect();
    let mut gi = Tensor::zeros(&[c, h, w]);
    let gd = gi.data_mut();
    let go = grad_out.data();
    for ci in 0..c {
        let plane = &mut gd[ci * h * w..(ci + 1) * h * w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = go[(ci * out_h + oy) * out_w + ox];
                plane[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                plane[y0 * w + x1] += g * (1.0 - ty) * tx;
                plane[y1 * w + x0] += g * ty * (1.0 - tx);
                plane[y1 * w + x1] += g * ty * tx;
            }
        }
    }
    gi
}

/// Number of taps per level in a lookup window of radius `r`.
pub fn window_len(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

/// Samples each pyramid level on a `(2r+1)²` grid around `coords / 2^level`.
///
/// `levels[l]: [H·W, H_l, W_l]`, `coords: [2,H,W]` (x then y, level-0 units).
/// Output channel `l·(2r+1)² + (dy+r)·(2r+1) + (dx+r)`.
pub fn lookup(levels: &[&Tensor], coords: &Tensor, radius: usize) -> Tensor {
    let (_, h, w) = coords.chw();
    let win = window_len(radius);
    let r = radius as isize;
    let mut out = Tensor::zeros(&[levels.len() * win, h, w]);
    let od = out.data_mut();
    let (cx, cy) = (coords.plane(0), coords.plane(1));
    for (l, lvl) in levels.iter().enumerate() {
        let (n, lh, lw) = lvl.chw();
        assert_eq!(n, h * w, "pyramid level has wrong source count");
        let s = (1u64 << l) as f64;
        for p in 0..h * w {
            let plane = lvl.plane(p);
            let (x, y) = (cx[p] / s, cy[p] / s);
            let mut ch = l * win;
            for dy in -r..=r {
                for dx in -r..=r {
                    od[ch * h * w + p] =
                        bilinear_sample(plane, lh, lw, x + dx as f64, y + dy as f64);
                    ch += 1;
                }
            }
        }
    }
    out
}

/// Gradient of [`lookup`] with respect to each level (coordinates are constants).
pub fn lookup_backward(
    level_shapes: &[Vec<usize>],
    coords: &Tensor,
    radius: usize,
    grad_out: &Tensor,
) -> Vec<Tensor> {
    let (_, h, w) = coords.chw();
    let win = window_len(radius);
    let r = radius as isize;
    let go = grad_out.data();
    let (cx, cy) = (coords.plane(0), coords.plane(1));
    level_shapes
        .iter()
        .enumerate()
        .map(|(l, shape)| {
            let (lh, lw) = (shape[1], shape[2]);
            let mut g = Tensor::zeros(shape);
            let gd = g.data_mut();
            let s = (1u64 << l) as f64;
            for p in 0..h * w {
                let base = p * lh * lw;
                let (x, y) = (cx[p] / s, cy[p] / s);
                let mut ch = l * win;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let gv = go[ch * h * w + p];
                        if gv != 0.0 {
                            for (idx, wt) in
                                bilinear_taps(lh, lw, x + dx as f64, y + dy as f64)
                            {
                                gd[base + idx] += gv * wt;
                            }
                        }
                        ch += 1;
                    }
                }
            }
            g
        })
        .collect()
}

/// Softmax over the 9 neighbor logits of each `factor×factor` sub-pixel.
///
/// `logits: [9·f²,h,w]`, channel `k·f² + dy·f + dx` → weights with the same layout.
pub fn convex_softmax(logits: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = logits.chw();
    let ff = factor * factor;
    assert_eq!(c, 9 * ff, "mask needs 9·factor² channels");
    let mut out = Tensor::zeros(&[c, h, w]);
    let ld = logits.data();
    let od = out.data_mut();
    let hw = h * w;
    for s in 0..ff {
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for k in 0..9 {
                m = m.max(ld[(k * ff + s) * hw + p]);
            }
            let mut z = 0.0;
            for k in 0..9 {
                let e = (ld[(k * ff + s) * hw + p] - m).exp();
                od[(k * ff + s) * hw + p] = e;
                z += e;
            }
            for k in 0..9 {
                od[(k * ff + s) * hw + p] /= z;
            }
        }
    }
    out
}

#[inline]
fn neighbor(i: usize, k: usize, n: usize) -> usize {
    (i as isize + k as isize - 1).clamp(0, n as isize - 1) as usize
}

/// Convex upsampling: each fine pixel is the weighted sum of the 3×3 coarse
/// neighborhood (edge-replicated), with flow values scaled by `factor`.
pub fn convex_combine(flow: &Tensor, weights: &Tensor, factor: usize) -> Tensor {
    let (fc, h, w) = flow.chw();
    let ff = factor * factor;
    let hw = h * w;
    let (fh, fw) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[fc, fh, fw]);
    let od = out.data_mut();
    let wd = weights.data();
    let scale = factor as f64;
    for c in 0..fc {
        let plane = flow.plane(c);
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let s = dy * factor + dx;
                        let mut acc = 0.0;
                        for k in 0..9 {
                            let (ky, kx) = (k / 3, k % 3);
                            let nb = neighbor(i, ky, h) * w + neighbor(j, kx, w);
                            acc += wd[(k * ff + s) * hw + p] * plane[nb];
                        }
                        od[(c * fh + i * factor + dy) * fw + j * factor + dx] = scale * acc;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `convex_combine(flow, convex_softmax(logits))` wrt flow and logits.
pub fn convex_upsample_backward(
    flow: &Tensor,
    weights: &Tensor,
    factor: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let (fc, h, w) = flow.chw();
    let ff = factor * factor;
    let hw = h * w;
    let fw = w * factor;
    let fh = h * factor;
    let scale = factor as f64;
    let wd = weights.data();
    let go = grad_out.data();
    let mut gflow = Tensor::zeros(&[fc, h, w]);
    let mut glogit = Tensor::zeros(weights.shape());
    let gfd = gflow.data_mut();
    let gld = glogit.data_mut();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let nbs: [usize; 9] =
                std::array::from_fn(|k| neighbor(i, k / 3, h) * w + neighbor(j, k % 3, w));
            for dy in 0..factor {
                for dx in 0..factor {
                    let s = dy * factor + dx;
                    let mut gk = [0.0; 9];
                    for c in 0..fc {
                        let g = go[(c * fh + i * factor + dy) * fw + j * factor + dx] * scale;
                        let plane = flow.plane(c);
                        for k in 0..9 {
                            gk[k] += g * plane[nbs[k]];
                            gfd[c * hw + nbs[k]] += g * wd[(k * ff + s) * hw + p];
                        }
                    }
                    let dot: f64 = (0..9).map(|k| wd[(k * ff + s) * hw + p] * gk[k]).sum();
                    for k in 0..9 {
                        let wk = wd[(k * ff + s) * hw + p];
                        gld[(k * ff + s) * hw + p] = wk * (gk[k] - dot);
                    }
                }
            }
        }
    }
    (gflow, glogit)
}

/// Group normalization forward. Returns the output and the normalized input.
pub fn group_norm(
    x: &Tensor,
    groups: usize,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> (Tensor, Tensor, Vec<f64>) {
    let (c, h, w) = x.chw();
    assert_eq!(c % groups, 0, "{c} channels not divisible into {groups} groups");
    let cg = c / groups;
    let n = (cg * h * w) as f64;
    let mut xhat = Tensor::zeros(&[c, h, w]);
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut inv_std = Vec::with_capacity(groups);
    let span = cg * h * w;
    for gi in 0..groups {
        let xs = &x.data()[gi * span..(gi + 1) * span];
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        let xh = &mut xhat.data_mut()[gi * span..(gi + 1) * span];
        for (d, s) in xh.iter_mut().zip(xs) {
            *d = (s - mean) * is;
        }
    }
    let hw = h * w;
    for ci in 0..c {
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        let src = &xhat.data()[ci * hw..(ci + 1) * hw];
        let dst = &mut out.data_mut()[ci * hw..(ci + 1) * hw];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = g * s + b;
        }
    }
    (out, xhat, inv_std)
}

pub fn group_norm_backward(
    xhat: &Tensor,
    inv_std: &[f64],
    gamma: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (c, h, w) = xhat.chw();
    let groups = inv_std.len();
    let cg = c / groups;
    let hw = h * w;
    let go = grad_out.data();
    let xh = xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        for i in ci * hw..(ci + 1) * hw {
            dgamma[ci] += go[i] * xh[i];
            dbeta[ci] += go[i];
        }
    }
    let dx = need_input.then(|| {
        let mut dx = Tensor::zeros(&[c, h, w]);
        let dd = dx.data_mut();
        let n = (cg * hw) as f64;
        for gi in 0..groups {
            let (lo, hi) = (gi * cg * hw, (gi + 1) * cg * hw);
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in lo..hi {
                let d = go[i] * gamma.data()[i / hw];
                sum_d += d;
                sum_dx += d * xh[i];
            }
            let is = inv_std[gi];
            for i in lo..hi {
                let d = go[i] * gamma.data()[i / hw];
                dd[i] = is / n * (n * d - sum_d - xh[i] * sum_dx);
            }
        }
        dx
    });
    (
        dx,
        Tensor::from_vec(&[c], dgamma),
        Tensor::from_vec(&[c], dbeta),
    )
}
