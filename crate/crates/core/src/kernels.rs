//! Numeric kernels shared by the autodiff tape and the frozen encoders.
//!
//! All feature maps are single images laid out `C x H x W`; convolutions are
//! lowered to one gemm through an im2col buffer.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    /// Output extent of a forward convolution over an input of extent `n`.
    pub fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output extent of a transposed convolution over an input of extent `n`.
    pub fn transpose_out(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `x` (`c x h x w`) into a `(c*k*k) x (oh*ow)` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom) -> (Vec<T>, usize, usize) {
    let oh = g.conv_out(h);
    let ow = g.conv_out(w);
    let k = g.kernel;
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `c x h x w` image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: ConvGeom) -> Vec<T> {
    let oh = g.conv_out(h);
    let ow = g.conv_out(w);
    let k = g.kernel;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| dy[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}

/// Cross-correlation with weight `cout x cin x k x k`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let (cin, h, w) = x.chw();
    let cout = weight.shape()[0];
    debug_assert_eq!(weight.shape(), &[cout, cin, g.kernel, g.kernel]);
    let kk = cin * g.kernel * g.kernel;
    let (oh, ow) = (g.conv_out(h), g.conv_out(w));
    let mut out = vec![T::zero(); cout * oh * ow];
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x.data(), cin, h, w, g).0;
        &owned
    };
    let n = oh * ow;
    T::gemm(
        cout,
        kk,
        n,
        T::one(),
        weight.data(),
        kk as isize,
        1,
        cols,
        n as isize,
        1,
        T::zero(),
        &mut out,
        n as isize,
        1,
    );
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), n);
    }
    Tensor::from_vec(&[cout, oh, ow], out).expect("conv output shape")
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (cin, h, w) = x.chw();
    let (cout, oh, ow) = dy.chw();
    let kk = cin * g.kernel * g.kernel;
    let n = oh * ow;
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        x.data()
    } else {
        owned = im2col(x.data(), cin, h, w, g).0;
        &owned
    };
    // dW = dY * cols^T
    let mut dw = vec![T::zero(); cout * kk];
    T::gemm(
        cout,
        n,
        kk,
        T::one(),
        dy.data(),
        n as isize,
        1,
        cols,
        1,
        n as isize,
        T::zero(),
        &mut dw,
        kk as isize,
        1,
    );
    let input = need_input.then(|| {
        // dcols = W^T * dY
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            cout,
            n,
            T::one(),
            weight.data(),
            1,
            kk as isize,
            dy.data(),
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        let dx = if g.is_pointwise() {
            dcols
        } else {
            col2im(&dcols, cin, h, w, g)
        };
        Tensor::from_vec(&[cin, h, w], dx).expect("conv input grad shape")
    });
    ConvGrads {
        input,
        weight: Tensor::from_vec(weight.shape(), dw).expect("conv weight grad shape"),
        bias: Tensor::from_vec(&[cout], bias_grad(dy.data(), cout, n)).expect("bias grad shape"),
    }
}

/// Transposed convolution with weight `cin x cout x k x k`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (cin, h, w) = x.chw();
    let cout = weight.shape()[1];
    debug_assert_eq!(weight.shape(), &[cin, cout, g.kernel, g.kernel]);
    let ck = cout * g.kernel * g.kernel;
    let n = h * w;
    let (oh, ow) = (g.transpose_out(h), g.transpose_out(w));
    // cols = W^T * X, then fold onto the output grid.
    let mut cols = vec![T::zero(); ck * n];
    T::gemm(
        ck,
        cin,
        n,
        T::one(),
        weight.data(),
        1,
        ck as isize,
        x.data(),
        n as isize,
        1,
        T::zero(),
        &mut cols,
        n as isize,
        1,
    );
    let mut out = col2im(&cols, cout, oh, ow, g);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), oh * ow);
    }
    Tensor::from_vec(&[cout, oh, ow], out).expect("transposed conv output shape")
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (cin, h, w) = x.chw();
    let (cout, oh, ow) = dy.chw();
    let ck = cout * g.kernel * g.kernel;
    let n = h * w;
    let (dcols, ch, cw) = im2col(dy.data(), cout, oh, ow, g);
    debug_assert_eq!((ch, cw), (h, w));
    // dW = X * dcols^T
    let mut dw = vec![T::zero(); cin * ck];
    T::gemm(
        cin,
        n,
        ck,
        T::one(),
        x.data(),
        n as isize,
        1,
        &dcols,
        1,
        n as isize,
        T::zero(),
        &mut dw,
        ck as isize,
        1,
    );
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); cin * n];
        T::gemm(
            cin,
            ck,
            n,
            T::one(),
            weight.data(),
            ck as isize,
            1,
            &dcols,
            n as isize,
            1,
            T::zero(),
            &mut dx,
            n as isize,
            1,
        );
        Tensor::from_vec(&[cin, h, w], dx).expect("transposed conv input grad shape")
    });
    ConvGrads {
        input,
        weight: Tensor::from_vec(weight.shape(), dw).expect("weight grad shape"),
        bias: Tensor::from_vec(&[cout], bias_grad(dy.data(), cout, oh * ow)).expect("bias grad shape"),
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn group_stats<T: Scalar>(x: &[T], groups: usize, group_len: usize) -> Vec<(T, T)> {
    let eps = lit::<T>(GROUP_NORM_EPS);
    let inv_n = T::one() / T::from_usize(group_len).unwrap();
    (0..groups)
        .map(|gi| {
            let seg = &x[gi * group_len..(gi + 1) * group_len];
            let mean = seg.iter().copied().sum::<T>() * inv_n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .collect()
}

/// Per-image group normalization with per-channel affine parameters.
pub fn group_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, groups: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let per = c / groups;
    let plane = h * w;
    let stats = group_stats(x.data(), groups, per * plane);
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        let (mean, inv) = stats[ci / per];
        let (g, b) = (gamma.data()[ci], beta.data()[ci]);
        for i in ci * plane..(ci + 1) * plane {
            out[i] = (x.data()[i] - mean) * inv * g + b;
        }
    }
    Tensor::from_vec(x.shape(), out).expect("group norm shape")
}

pub struct GroupNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    groups: usize,
) -> GroupNormGrads<T> {
    let (c, h, w) = x.chw();
    let per = c / groups;
    let plane = h * w;
    let glen = per * plane;
    let stats = group_stats(x.data(), groups, glen);
    let n = T::from_usize(glen).unwrap();
    let xd = x.data();
    let dyd = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let (mean, inv) = stats[gi];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for ci in gi * per..(gi + 1) * per {
            let g = gamma.data()[ci];
            for i in ci * plane..(ci + 1) * plane {
                let xhat = (xd[i] - mean) * inv;
                dgamma[ci] = dgamma[ci] + dyd[i] * xhat;
                dbeta[ci] = dbeta[ci] + dyd[i];
                let dxhat = dyd[i] * g;
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            }
        }
        for ci in gi * per..(gi + 1) * per {
            let g = gamma.data()[ci];
            for i in ci * plane..(ci + 1) * plane {
                let xhat = (xd[i] - mean) * inv;
                let dxhat = dyd[i] * g;
                dx[i] = inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
    GroupNormGrads {
        input: Tensor::from_vec(x.shape(), dx).expect("gn grad shape"),
        gamma: Tensor::from_vec(&[c], dgamma).expect("gn gamma grad"),
        beta: Tensor::from_vec(&[c], dbeta).expect("gn beta grad"),
    }
}

/// Inference-time batch norm folded into a per-channel affine map.
pub fn channel_affine<T: Scalar>(x: &mut Tensor<T>, scale: &[T], shift: &[T]) {
    let (_, h, w) = x.chw();
    let plane = h * w;
    for (ci, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = *v * scale[ci] + shift[ci];
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// 3x3 stride-2 max pooling with padding 1.
pub fn max_pool_3x3_s2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let g = ConvGeom::new(3, 2, 1);
    let (oh, ow) = (g.conv_out(h), g.conv_out(w));
    let mut out = vec![T::neg_infinity(); c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = T::neg_infinity();
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        m = m.max(x.data()[(ci * h + iy as usize) * w + ix as usize]);
                    }
                }
                out[(ci * oh + oy) * ow + ox] = m;
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("pool shape")
}

/// Bilinear sample positions for resizing `n_in -> n_out` without corner alignment.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a single `h x w` plane (corner alignment disabled).
pub fn resize_bilinear_plane<T: Scalar>(src: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ty {
        let fy = lit::<T>(fy);
        for &(x0, x1, fx) in &tx {
            let fx = lit::<T>(fx);
            let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
            out.push(top * (T::one() - fy) + bot * fy);
        }
    }
    out
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (c, h, w) = x.chw();
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in x.data().chunks(h * w) {
        out.extend(resize_bilinear_plane(plane, h, w, oh, ow));
    }
    Tensor::from_vec(&[c, oh, ow], out).expect("resize shape")
}

/// Locations whose channel vector is shorter than this have cosine 0.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

/// Per-location cosine between the channel vectors of two `C x h x w` maps.
pub fn cosine_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (c, h, w) = a.chw();
    let plane = h * w;
    let (ad, bd) = (a.data(), b.data());
    let floor = lit::<T>(COSINE_NORM_FLOOR);
    let mut dot = vec![T::zero(); plane];
    let mut na = vec![T::zero(); plane];
    let mut nb = vec![T::zero(); plane];
    for ci in 0..c {
        let off = ci * plane;
        for p in 0..plane {
            let (x, y) = (ad[off + p], bd[off + p]);
            dot[p] = dot[p] + x * y;
            na[p] = na[p] + x * x;
            nb[p] = nb[p] + y * y;
        }
    }
    (0..plane)
        .map(|p| {
            let (ua, ub) = (na[p].sqrt(), nb[p].sqrt());
            if ua < floor || ub < floor {
                T::zero()
            } else {
                (dot[p] / (ua * ub)).max(-T::one()).min(T::one())
            }
        })
        .collect()
}

/// Gradient of `mean_p (1 - cos_p)` with respect to both inputs, scaled by `upstream`.
pub fn cosine_distance_mean_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    upstream: T,
) -> (Tensor<T>, Tensor<T>) {
    let (c, h, w) = a.chw();
    let plane = h * w;
    let (ad, bd) = (a.data(), b.data());
    let floor = lit::<T>(COSINE_NORM_FLOOR);
    let mut dot = vec![T::zero(); plane];
    let mut na = vec![T::zero(); plane];
    let mut nb = vec![T::zero(); plane];
    for ci in 0..c {
        let off = ci * plane;
        for p in 0..plane {
            let (x, y) = (ad[off + p], bd[off + p]);
            dot[p] = dot[p] + x * y;
            na[p] = na[p] + x * x;
            nb[p] = nb[p] + y * y;
        }
    }
    let scale = -upstream / T::from_usize(plane).unwrap();
    let mut da = vec![T::zero(); a.len()];
    let mut db = vec![T::zero(); b.len()];
    for p in 0..plane {
        let (ua, ub) = (na[p].sqrt(), nb[p].sqrt());
        if ua < floor || ub < floor {
            continue;
        }
        let inv = T::one() / (ua * ub);
        let cos = dot[p] * inv;
        let ka = cos / na[p];
        let kb = cos / nb[p];
        for ci in 0..c {
            let i = ci * plane + p;
            da[i] = scale * (bd[i] * inv - ka * ad[i]);
            db[i] = scale * (ad[i] * inv - kb * bd[i]);
        }
    }
    (
        Tensor::from_vec(a.shape(), da).expect("cos grad a"),
        Tensor::from_vec(b.shape(), db).expect("cos grad b"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (cin, h, wd) = x.chw();
        let cout = w.shape()[0];
        let (oh, ow) = (g.conv_out(h), g.conv_out(wd));
        let k = g.kernel;
        Tensor::from_fn(&[cout, oh, ow], |idx| {
            let co = idx / (oh * ow);
            let oy = (idx / ow) % oh;
            let ox = idx % ow;
            let mut s = 0.0;
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            s += x.data()[(ci * h + iy as usize) * wd + ix as usize]
                                * w.data()[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
            }
            s
        })
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        for g in [ConvGeom::new(3, 1, 1), ConvGeom::new(3, 2, 1), ConvGeom::new(1, 1, 0), ConvGeom::new(2, 2, 0)] {
            let x = Tensor::from_vec(&[3, 7, 6], pseudo(126, 1)).unwrap();
            let w = Tensor::from_vec(&[4, 3, g.kernel, g.kernel], pseudo(12 * g.kernel * g.kernel, 2)).unwrap();
            let fast = conv2d(&x, &w, None, g);
            let slow = naive_conv(&x, &w, g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), r> == <x, conv_t(r)> when both share the weight tensor.
        let g = ConvGeom::new(3, 2, 1);
        let x = Tensor::from_vec(&[2, 7, 7], pseudo(98, 3)).unwrap();
        let w = Tensor::from_vec(&[5, 2, 3, 3], pseudo(90, 4)).unwrap();
        let y = conv2d(&x, &w, None, g);
        assert_eq!(y.shape(), &[5, 4, 4]);
        let r = Tensor::from_vec(y.shape(), pseudo(y.len(), 5)).unwrap();
        let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let xt = conv_transpose2d(&r, &w, None, g);
        assert_eq!(xt.shape(), x.shape());
        let rhs: f64 = xt.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src = pseudo(16, 9);
        let same = resize_bilinear_plane(&src, 4, 4, 4, 4);
        for (a, b) in same.iter().zip(&src) {
            assert!((a - b).abs() < 1e-15);
        }
        let up = resize_bilinear_plane(&[2.5f64; 4], 2, 2, 8, 8);
        assert!(up.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn cosine_map_closed_forms() {
        let a = Tensor::from_vec(&[2, 1, 3], vec![1.0f64, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 3], vec![0.0f64, 1.0, -1.0, 1.0, 0.0, 0.0]).unwrap();
        let m = cosine_map(&a, &b);
        assert!(m[0].abs() < 1e-15);
        assert!((m[1] - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((m[2] + 1.0).abs() < 1e-15);
    }
}
