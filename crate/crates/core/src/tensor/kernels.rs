//! Raw buffer kernels shared by the tape ops and by tape-free code paths.

/// `c = a' * b' + beta * c` on row-major buffers, where `a'` is `m x k`
/// (stored transposed when `trans_a`) and `b'` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; the strides describe exactly the
    // row-major layouts of `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

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

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds `[C, H, W]` into `[C*k*k, Ho*Wo]` patches (zero padding).
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `[C, H, W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            drow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape of permuting `shape` by `perm` (output axis `i` is input
/// axis `perm[i]`).
pub fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Gathers `src` into `dst` so that `dst` is `src` permuted by `perm`.
pub fn permute(src: &[f64], shape: &[usize], perm: &[usize], dst: &mut [f64]) {
    let in_strides = strides(shape);
    let out_shape = permuted_shape(shape, perm);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut o = 0;
    while o < dst.len() {
        let mut off = offset;
        for d in &mut dst[o..o + inner] {
            *d = src[off];
            off += inner_step;
        }
        o += inner;
        // advance the odometer over all but the last axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Inverse permutation.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Source taps for one axis of a bilinear resize (half-pixel centers,
/// no corner alignment): `(i0, i1, frac)` per output index.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` stacked `[P, H, W]` planes.
pub fn resize_bilinear(
    src: &[f64],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let s = &src[p * in_h * in_w..(p + 1) * in_h * in_w];
        let d = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = s[y0 * in_w + x0] * (1.0 - fx) + s[y0 * in_w + x1] * fx;
                let bot = s[y1 * in_w + x0] * (1.0 - fx) + s[y1 * in_w + x1] * fx;
                d[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint(
    grad_out: &[f64],
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    grad_in: &mut [f64],
) {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    for p in 0..planes {
        let g = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut grad_in[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                d[y0 * in_w + x0] += v * (1.0 - fy) * (1.0 - fx);
                d[y0 * in_w + x1] += v * (1.0 - fy) * fx;
                d[y1 * in_w + x0] += v * fy * (1.0 - fx);
                d[y1 * in_w + x1] += v * fy * fx;
            }
        }
    }
}

/// Splits each `[C, H, W]` item into four `[C, H/2, W/2]` quadrants in
/// row-major window order. `merge == true` performs the inverse.
pub fn window_shuffle(
    src: &[f64],
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    merge: bool,
    dst: &mut [f64],
) {
    let (hh, hw) = (height / 2, width / 2);
    for b in 0..batch {
        for w in 0..4 {
            let (oy, ox) = ((w / 2) * hh, (w % 2) * hw);
            for c in 0..channels {
                for y in 0..hh {
                    let whole = ((b * channels + c) * height + oy + y) * width + ox;
                    let part = (((b * 4 + w) * channels + c) * hh + y) * hw;
                    if merge {
                        dst[whole..whole + hw].copy_from_slice(&src[part..part + hw]);
                    } else {
                        dst[part..part + hw].copy_from_slice(&src[whole..whole + hw]);
                    }
                }
            }
        }
    }
}
