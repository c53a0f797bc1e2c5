//! Forward and backward kernels for the layers of the segmentation network.
//!
//! Every backward function accumulates parameter gradients into the supplied
//! buffers (`+=`) and returns a fresh input gradient.

use crate::nn::{Real, Tensor};

const SLAB_TARGET_COLUMNS: usize = 4096;
const SLAB_MAX_ELEMENTS: usize = 1 << 24;

fn slab_planes(k_rows: usize, dims: [usize; 3]) -> usize {
    let plane = dims[1] * dims[2];
    let want = SLAB_TARGET_COLUMNS.div_ceil(plane).max(1);
    let cap = (SLAB_MAX_ELEMENTS / (k_rows * plane).max(1)).max(1);
    want.min(cap).min(dims[0]).max(1)
}

/// Unfolds planes `[d0, d1)` of `x` into a `(cin·k³) × n` column matrix
/// for a zero-padded, stride-1 cubic kernel of odd size `k`.
fn im2col<T: Real>(x: &Tensor<T>, k: usize, d0: usize, d1: usize, col: &mut [T]) {
    let [nd, nw, nh] = x.dims();
    let r = (k / 2) as isize;
    let n = (d1 - d0) * nw * nh;
    for ci in 0..x.channels() {
        let xc = x.channel(ci);
        for od in 0..k {
            for ow in 0..k {
                for oh in 0..k {
                    let row = ((ci * k + od) * k + ow) * k + oh;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let shift = oh as isize - r;
                    for d in d0..d1 {
                        let sd = d as isize + od as isize - r;
                        for w in 0..nw {
                            let sw = w as isize + ow as isize - r;
                            let out = &mut dst[((d - d0) * nw + w) * nh..((d - d0) * nw + w + 1) * nh];
                            if sd < 0 || sd >= nd as isize || sw < 0 || sw >= nw as isize {
                                out.fill(T::ZERO);
                                continue;
                            }
                            let base = (sd as usize * nw + sw as usize) * nh;
                            let src = &xc[base..base + nh];
                            copy_shifted(out, src, shift);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn copy_shifted<T: Real>(out: &mut [T], src: &[T], shift: isize) {
    let len = out.len();
    let s = shift.unsigned_abs().min(len);
    if shift >= 0 {
        out[..len - s].copy_from_slice(&src[s..]);
        out[len - s..].fill(T::ZERO);
    } else {
        out[..s].fill(T::ZERO);
        out[s..].copy_from_slice(&src[..len - s]);
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
fn col2im<T: Real>(dx: &mut Tensor<T>, k: usize, d0: usize, d1: usize, col: &[T]) {
    let [nd, nw, nh] = dx.dims();
    let r = (k / 2) as isize;
    let n = (d1 - d0) * nw * nh;
    for ci in 0..dx.channels() {
        let xc = dx.channel_mut(ci);
        for od in 0..k {
            for ow in 0..k {
                for oh in 0..k {
                    let row = ((ci * k + od) * k + ow) * k + oh;
                    let src_rows = &col[row * n..(row + 1) * n];
                    let shift = oh as isize - r;
                    for d in d0..d1 {
                        let sd = d as isize + od as isize - r;
                        if sd < 0 || sd >= nd as isize {
                            continue;
                        }
                        for w in 0..nw {
                            let sw = w as isize + ow as isize - r;
                            if sw < 0 || sw >= nw as isize {
                                continue;
                            }
                            let g = &src_rows[((d - d0) * nw + w) * nh..((d - d0) * nw + w + 1) * nh];
                            let base = (sd as usize * nw + sw as usize) * nh;
                            let dst = &mut xc[base..base + nh];
                            // out[h] = src[h + shift]  =>  dst[h + shift] += g[h]
                            let s = shift.unsigned_abs().min(nh);
                            if shift >= 0 {
                                for (a, &b) in dst[s..].iter_mut().zip(&g[..nh - s]) {
                                    *a += b;
                                }
                            } else {
                                for (a, &b) in dst[..nh - s].iter_mut().zip(&g[s..]) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cubic convolution, stride 1, zero padding `k / 2`.
///
/// `weight` is row-major `cout × (cin·k³)`; `bias` has `cout` entries.
pub fn conv3d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
) -> Tensor<T> {
    let cin = x.channels();
    let kk = cin * k * k * k;
    assert_eq!(weight.len(), cout * kk, "conv weight shape");
    let dims = x.dims();
    let vox = x.voxels();
    let mut y = Tensor::zeros(cout, dims);
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            y.channel_mut(co).fill(bv);
        }
    }
    let beta = if bias.is_some() { T::ONE } else { T::ZERO };
    if k == 1 {
        T::gemm(cout, cin, vox, T::ONE, weight, cin as isize, 1, x.data(), vox as isize, 1, beta, y.data_mut(), vox as isize, 1);
        return y;
    }
    let plane = dims[1] * dims[2];
    let planes = slab_planes(kk, dims);
    let mut col = vec![T::ZERO; kk * planes * plane];
    let mut d0 = 0;
    while d0 < dims[0] {
        let d1 = (d0 + planes).min(dims[0]);
        let n = (d1 - d0) * plane;
        im2col(x, k, d0, d1, &mut col[..kk * n]);
        T::gemm(
            cout,
            kk,
            n,
            T::ONE,
            weight,
            kk as isize,
            1,
            &col[..kk * n],
            n as isize,
            1,
            beta,
            &mut y.data_mut()[d0 * plane..],
            vox as isize,
            1,
        );
        d0 = d1;
    }
    y
}

/// Backward pass of [`conv3d_forward`]. Returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    k: usize,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let cin = x.channels();
    let cout = dy.channels();
    let kk = cin * k * k * k;
    let dims = x.dims();
    let vox = x.voxels();
    assert_eq!(dy.dims(), dims, "conv backward dims");
    assert_eq!(dweight.len(), cout * kk, "conv dweight shape");
    if let Some(db) = dbias {
        for (co, g) in db.iter_mut().enumerate() {
            *g += dy.channel(co).iter().copied().sum::<T>();
        }
    }
    if k == 1 {
        // dW += dy · xᵀ
        T::gemm(cout, vox, cin, T::ONE, dy.data(), vox as isize, 1, x.data(), 1, vox as isize, T::ONE, dweight, cin as isize, 1);
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(cin, dims);
        T::gemm(cin, cout, vox, T::ONE, weight, 1, cin as isize, dy.data(), vox as isize, 1, T::ZERO, dx.data_mut(), vox as isize, 1);
        return Some(dx);
    }
    let plane = dims[1] * dims[2];
    let planes = slab_planes(kk, dims);
    let mut col = vec![T::ZERO; kk * planes * plane];
    let mut dcol = if need_dx { vec![T::ZERO; kk * planes * plane] } else { Vec::new() };
    let mut dx = need_dx.then(|| Tensor::zeros(cin, dims));
    let mut d0 = 0;
    while d0 < dims[0] {
        let d1 = (d0 + planes).min(dims[0]);
        let n = (d1 - d0) * plane;
        im2col(x, k, d0, d1, &mut col[..kk * n]);
        let dy_slab = &dy.data()[d0 * plane..];
        T::gemm(cout, n, kk, T::ONE, dy_slab, vox as isize, 1, &col[..kk * n], 1, n as isize, T::ONE, dweight, kk as isize, 1);
        if let Some(dx) = dx.as_mut() {
            T::gemm(kk, cout, n, T::ONE, weight, 1, kk as isize, dy_slab, vox as isize, 1, T::ZERO, &mut dcol[..kk * n], n as isize, 1);
            col2im(dx, k, d0, d1, &dcol[..kk * n]);
        }
        d0 = d1;
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// Masks `dy` by the positivity of the ReLU output `y`.
pub fn relu_backward_inplace<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if v <= T::ZERO {
            *g = T::ZERO;
        }
    }
}

/// 2×2×2 max pooling, stride 2. Returns the output and, per output element,
/// the flat within-channel index of the selected input (first maximum wins).
pub fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [nd, nw, nh] = x.dims();
    assert!(nd % 2 == 0 && nw % 2 == 0 && nh % 2 == 0, "maxpool needs even dims");
    let od = [nd / 2, nw / 2, nh / 2];
    let mut y = Tensor::zeros(x.channels(), od);
    let mut arg = vec![0u32; x.channels() * od[0] * od[1] * od[2]];
    let mut o = 0;
    for c in 0..x.channels() {
        let xc = x.channel(c);
        for d in 0..od[0] {
            for w in 0..od[1] {
                for h in 0..od[2] {
                    let mut best = T::ZERO;
                    let mut best_i = usize::MAX;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let i = ((2 * d + a) * nw + 2 * w + b) * nh + 2 * h + e;
                                if best_i == usize::MAX || xc[i] > best {
                                    best = xc[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Tensor<T>, arg: &[u32], in_dims: [usize; 3]) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.channels(), in_dims);
    let per = dy.voxels();
    for c in 0..dy.channels() {
        let g = dy.channel(c);
        let idx = &arg[c * per..(c + 1) * per];
        let dxc = dx.channel_mut(c);
        for (&gv, &i) in g.iter().zip(idx) {
            dxc[i as usize] += gv;
        }
    }
    dx
}

/// Linear interpolation taps for resampling `n_in` samples to `n_out`
/// (half-pixel centres, source coordinate clamped to the valid range).
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub w_hi: f64,
}

pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

fn resample_axis<T: Real>(x: &Tensor<T>, axis: usize, n_out: usize) -> Tensor<T> {
    let dims = x.dims();
    let n_in = dims[axis];
    let mut od = dims;
    od[axis] = n_out;
    let outer: usize = x.channels() * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let taps = linear_taps(n_in, n_out);
    let mut y = Tensor::zeros(x.channels(), od);
    let xs = x.data();
    let ys = y.data_mut();
    for o in 0..outer {
        let src = &xs[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut ys[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, tap) in taps.iter().enumerate() {
            let w1 = T::from_f64(tap.w_hi);
            let w0 = T::ONE - w1;
            let a = &src[tap.lo * inner..(tap.lo + 1) * inner];
            let b = &src[tap.hi * inner..(tap.hi + 1) * inner];
            for ((out, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                *out = w0 * va + w1 * vb;
            }
        }
    }
    y
}

fn resample_axis_backward<T: Real>(dy: &Tensor<T>, axis: usize, n_in: usize) -> Tensor<T> {
    let dims = dy.dims();
    let n_out = dims[axis];
    let mut id = dims;
    id[axis] = n_in;
    let outer: usize = dy.channels() * dims[..axis].iter().product::<usize>();
    let inner: usize = dims[axis + 1..].iter().product();
    let taps = linear_taps(n_in, n_out);
    let mut dx = Tensor::zeros(dy.channels(), id);
    let gs = dy.data();
    let xs = dx.data_mut();
    for o in 0..outer {
        let g = &gs[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut xs[o * n_in * inner..(o + 1) * n_in * inner];
        for (j, tap) in taps.iter().enumerate() {
            let w1 = T::from_f64(tap.w_hi);
            let w0 = T::ONE - w1;
            for i in 0..inner {
                let gv = g[j * inner + i];
                dst[tap.lo * inner + i] += w0 * gv;
                dst[tap.hi * inner + i] += w1 * gv;
            }
        }
    }
    dx
}

/// Separable trilinear resize to `out_dims`; identity when dims match.
pub fn resize_trilinear<T: Real>(x: &Tensor<T>, out_dims: [usize; 3]) -> Tensor<T> {
    let mut cur = x.clone();
    for axis in 0..3 {
        if cur.dims()[axis] != out_dims[axis] {
            cur = resample_axis(&cur, axis, out_dims[axis]);
        }
    }
    cur
}

/// Adjoint of [`resize_trilinear`].
pub fn resize_trilinear_backward<T: Real>(dy: &Tensor<T>, in_dims: [usize; 3]) -> Tensor<T> {
    let out_dims = dy.dims();
    let mut cur = dy.clone();
    for axis in (0..3).rev() {
        if in_dims[axis] != out_dims[axis] {
            cur = resample_axis_backward(&cur, axis, in_dims[axis]);
        }
    }
    cur
}

/// Per-voxel normalizing exponential over channels.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.channels();
    let n = x.voxels();
    let mut y = x.clone();
    let src = x.data();
    let dst = y.data_mut();
    for i in 0..n {
        let mut m = src[i];
        for k in 1..c {
            m = m.max(src[k * n + i]);
        }
        let mut s = T::ZERO;
        for k in 0..c {
            let e = (src[k * n + i] - m).exp();
            dst[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            dst[k * n + i] /= s;
        }
    }
    y
}

pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let c = y.channels();
    let n = y.voxels();
    let mut dx = Tensor::zeros(c, y.dims());
    let (ys, gs) = (y.data(), dy.data());
    let out = dx.data_mut();
    for i in 0..n {
        let mut dot = T::ZERO;
        for k in 0..c {
            dot += ys[k * n + i] * gs[k * n + i];
        }
        for k in 0..c {
            out[k * n + i] = ys[k * n + i] * (gs[k * n + i] - dot);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, dims: [usize; 3]) -> Tensor<f64> {
        let n = c * dims[0] * dims[1] * dims[2];
        Tensor::from_vec(c, dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct zero-padded convolution.
    fn conv_naive(x: &Tensor<f64>, w: &[f64], b: &[f64], cout: usize, k: usize) -> Tensor<f64> {
        let [nd, nw, nh] = x.dims();
        let r = (k / 2) as isize;
        let mut y = Tensor::zeros(cout, x.dims());
        for co in 0..cout {
            for d in 0..nd {
                for ww in 0..nw {
                    for h in 0..nh {
                        let mut s = b[co];
                        for ci in 0..x.channels() {
                            for a in 0..k {
                                for bb in 0..k {
                                    for e in 0..k {
                                        let (sd, sw, sh) = (
                                            d as isize + a as isize - r,
                                            ww as isize + bb as isize - r,
                                            h as isize + e as isize - r,
                                        );
                                        if sd < 0 || sw < 0 || sh < 0 || sd >= nd as isize || sw >= nw as isize || sh >= nh as isize {
                                            continue;
                                        }
                                        let wi = (((co * x.channels() + ci) * k + a) * k + bb) * k + e;
                                        s += w[wi] * x.at(ci, sd as usize, sw as usize, sh as usize);
                                    }
                                }
                            }
                        }
                        *y.at_mut(co, d, ww, h) = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, dims) in &[(2, 3, 3, [4, 5, 6]), (3, 2, 1, [3, 3, 2]), (1, 2, 3, [2, 2, 2])] {
            let x = random_tensor(&mut rng, cin, dims);
            let w: Vec<f64> = (0..cout * cin * k * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv3d_forward(&x, &w, Some(&b), cout, k);
            let slow = conv_naive(&x, &w, &b, cout, k);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> linear in x and w: check both gradients by
        // finite differences on the scalar <dy, y>.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cin, cout, k, dims) = (2, 2, 3, [3, 4, 3]);
        let x = random_tensor(&mut rng, cin, dims);
        let w: Vec<f64> = (0..cout * cin * 27).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = vec![0.3, -0.2];
        let dy = random_tensor(&mut rng, cout, dims);
        let obj = |x: &Tensor<f64>, w: &[f64], b: &[f64]| -> f64 {
            let y = conv3d_forward(x, w, Some(b), cout, k);
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; 2];
        let dx = conv3d_backward(&x, &w, &dy, k, &mut dw, Some(&mut db), true).unwrap();
        let h = 1e-6;
        for i in [0, 7, 30, 53] {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (obj(&x, &wp, &b) - obj(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw[i]);
        }
        for i in [0, 11, 40, 71] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (obj(&xp, &w, &b) - obj(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.data()[i]).abs() < 1e-6);
        }
        let sum0: f64 = dy.channel(0).iter().sum();
        assert!((db[0] - sum0).abs() < 1e-12);
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 2, [3, 5, 4]);
        let out = [6, 4, 7];
        let y = resize_trilinear(&x, out);
        let g = random_tensor(&mut rng, 2, out);
        let dx = resize_trilinear_backward(&g, x.dims());
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn resize_to_same_dims_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, 1, [4, 4, 4]);
        assert_eq!(resize_trilinear(&x, [4, 4, 4]), x);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, [2, 2, 2], vec![0.0, 5.0, 1.0, 2.0, 3.0, 4.0, -1.0, 0.5]).unwrap();
        let (y, arg) = maxpool2_forward(&x);
        assert_eq!(y.data(), &[5.0]);
        let dx = maxpool2_backward(&Tensor::filled(1, [1, 1, 1], 2.0), &arg, [2, 2, 2]);
        assert_eq!(dx.data()[1], 2.0);
        assert_eq!(dx.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, 3, [2, 1, 2]);
        let g = random_tensor(&mut rng, 3, [2, 1, 2]);
        let obj = |x: &Tensor<f64>| -> f64 {
            softmax_channels(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let y = softmax_channels(&x);
        let dx = softmax_channels_backward(&y, &g);
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (obj(&xp) - obj(&xm)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
    }
}
