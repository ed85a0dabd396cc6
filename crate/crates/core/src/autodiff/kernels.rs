//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All kernels write disjoint output rows per task, so the parallel and
//! sequential dispatch in [`crate::parallel`] produce bit-identical results.

use crate::parallel;

/// `out += A' * B'` where `A'` is `a` (shape `ra x ca`) optionally transposed,
/// likewise `B'`. Panics if the inner dimensions disagree; shape checking
/// happens at the op layer.
#[allow(clippy::too_many_arguments)]
pub fn matmul_acc(
    a: &[f64],
    ra: usize,
    ca: usize,
    ta: bool,
    b: &[f64],
    rb: usize,
    cb: usize,
    tb: bool,
    out: &mut [f64],
) {
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(k, k2, "matmul inner dimensions");
    assert_eq!(out.len(), m * n, "matmul output size");
    if m == 0 || n == 0 {
        return;
    }
    parallel::for_each_chunk(out, n, |i, row| {
        for kk in 0..k {
            let aik = if ta { a[kk * ca + i] } else { a[i * ca + kk] };
            if aik == 0.0 {
                continue;
            }
            if tb {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += aik * b[j * cb + kk];
                }
            } else {
                let brow = &b[kk * cb..kk * cb + n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r += aik * bv;
                }
            }
        }
    });
}

/// Decompose `shape` around `axis` into (outer, axis_len, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

/// Numerically stabilized softmax along `axis`, written into `out`.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize, out: &mut [f64]) {
    let (outer, len, inner) = axis_extents(shape, axis);
    let stride = len * inner;
    parallel::for_each_chunk(out, stride.max(1), |o, chunk| {
        let base = o * stride;
        for i in 0..inner {
            let mut mx = f64::NEG_INFINITY;
            for a in 0..len {
                mx = mx.max(x[base + a * inner + i]);
            }
            let mut z = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner + i] - mx).exp();
                chunk[a * inner + i] = e;
                z += e;
            }
            for a in 0..len {
                chunk[a * inner + i] /= z;
            }
        }
    });
    debug_assert_eq!(outer * stride, out.len());
}

/// Backward of [`softmax_axis`]: `dx = s * (g - sum(g * s))` per lane.
pub fn softmax_axis_backward(
    s: &[f64],
    grad_out: &[f64],
    shape: &[usize],
    axis: usize,
    dx: &mut [f64],
) {
    let (_, len, inner) = axis_extents(shape, axis);
    let stride = len * inner;
    parallel::for_each_chunk(dx, stride.max(1), |o, chunk| {
        let base = o * stride;
        for i in 0..inner {
            let mut dot = 0.0;
            for a in 0..len {
                let idx = base + a * inner + i;
                dot += grad_out[idx] * s[idx];
            }
            for a in 0..len {
                let idx = base + a * inner + i;
                chunk[a * inner + i] += s[idx] * (grad_out[idx] - dot);
            }
        }
    });
}

/// Shape bookkeeping for a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub in_ch: usize,
    pub out_ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Convolution forward: `x [C,H,W]`, `w [OC, C, K, K]`, `b [OC]` -> `[OC, OH, OW]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], cs: &ConvShape, out: &mut [f64]) {
    let (oh, ow) = (cs.out_h(), cs.out_w());
    parallel::for_each_chunk(out, oh * ow, |oc, plane| {
        let wbase = oc * cs.in_ch * cs.kernel * cs.kernel;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..cs.in_ch {
                    for ky in 0..cs.kernel {
                        let iy = (oy * cs.stride + ky) as isize - cs.pad as isize;
                        if iy < 0 || iy >= cs.h as isize {
                            continue;
                        }
                        for kx in 0..cs.kernel {
                            let ix = (ox * cs.stride + kx) as isize - cs.pad as isize;
                            if ix < 0 || ix >= cs.w as isize {
                                continue;
                            }
                            acc += x[(ic * cs.h + iy as usize) * cs.w + ix as usize]
                                * w[wbase + (ic * cs.kernel + ky) * cs.kernel + kx];
                        }
                    }
                }
                plane[oy * ow + ox] = acc;
            }
        }
    });
}

/// Convolution backward. Returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    cs: &ConvShape,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (cs.out_h(), cs.out_w());
    let mut dx = vec![0.0; cs.in_ch * cs.h * cs.w];
    let mut dw = vec![0.0; cs.out_ch * cs.in_ch * cs.kernel * cs.kernel];
    let mut db = vec![0.0; cs.out_ch];

    // dw/db: each output channel only reads its own slice of grad_out.
    parallel::for_each_chunk(&mut dw, cs.in_ch * cs.kernel * cs.kernel, |oc, dwoc| {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(oc * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for ic in 0..cs.in_ch {
                    for ky in 0..cs.kernel {
                        let iy = (oy * cs.stride + ky) as isize - cs.pad as isize;
                        if iy < 0 || iy >= cs.h as isize {
                            continue;
                        }
                        for kx in 0..cs.kernel {
                            let ix = (ox * cs.stride + kx) as isize - cs.pad as isize;
                            if ix < 0 || ix >= cs.w as isize {
                                continue;
                            }
                            dwoc[(ic * cs.kernel + ky) * cs.kernel + kx] +=
                                g * x[(ic * cs.h + iy as usize) * cs.w + ix as usize];
                        }
                    }
                }
            }
        }
    });
    for oc in 0..cs.out_ch {
        let plane = &grad_out[oc * oh * ow..(oc + 1) * oh * ow];
        db[oc] = plane.iter().sum();
    }

    // dx in gather form: each input position sums over the output positions
    // whose receptive field covers it, keeping writes disjoint per task.
    parallel::for_each_chunk(&mut dx, cs.h * cs.w, |ic, plane| {
        for iy in 0..cs.h {
            for ix in 0..cs.w {
                let mut acc = 0.0;
                for ky in 0..cs.kernel {
                    let oy_num = iy as isize + cs.pad as isize - ky as isize;
                    if oy_num < 0 || oy_num % cs.stride as isize != 0 {
                        continue;
                    }
                    let oy = (oy_num / cs.stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..cs.kernel {
                        let ox_num = ix as isize + cs.pad as isize - kx as isize;
                        if ox_num < 0 || ox_num % cs.stride as isize != 0 {
                            continue;
                        }
                        let ox = (ox_num / cs.stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        for oc in 0..cs.out_ch {
                            acc += grad_out[(oc * oh + oy) * ow + ox]
                                * w[((oc * cs.in_ch + ic) * cs.kernel + ky) * cs.kernel + kx];
                        }
                    }
                }
                plane[iy * cs.w + ix] += acc;
            }
        }
    });

    (dx, dw, db)
}
