use super::kernels::{self, ConvGeom};
use super::tape::{Grads, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

impl Tape {
    /// 2-D cross-correlation: `x [B, C, H, W]`, `w [O, C, k, k]`, optional
    /// `b [O]`; output extent `floor((H + 2 pad - k) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", xs, ws));
        }
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(Error::shape("conv2d bias", ws, self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: k,
            stride,
            pad,
        };
        let (batch, out_c) = (xs[0], ws[0]);
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane_in = xs[1] * xs[2] * xs[3];
        let plane_out = out_c * oh * ow;
        let mut out = vec![0.0; batch * plane_out];
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct {
            Vec::new()
        } else {
            vec![0.0; geom.col_rows() * geom.col_cols()]
        };
        for i in 0..batch {
            let xin = &tx.data()[i * plane_in..(i + 1) * plane_in];
            let src: &[f64] = if direct {
                xin
            } else {
                kernels::im2col(xin, &geom, &mut cols);
                &cols
            };
            kernels::gemm(
                out_c,
                geom.col_rows(),
                geom.col_cols(),
                tw.data(),
                false,
                src,
                false,
                &mut out[i * plane_out..(i + 1) * plane_out],
                0.0,
            );
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let value = Tensor::from_parts(vec![batch, out_c, oh, ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed convolution: `x [B, Cin, H, W]`, `w [Cin, Cout, k, k]`;
    /// output extent `(H - 1) * stride + k`, no implicit cropping.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("deconv2d stride must be positive".into()));
        }
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape("deconv2d", xs, ws));
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[1], ws[2]);
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return Err(Error::shape("deconv2d bias", ws, self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            channels: cout,
            height: (h - 1) * stride + k,
            width: (wd - 1) * stride + k,
            kernel: k,
            stride,
            pad: 0,
        };
        let plane_in = cin * h * wd;
        let plane_out = cout * geom.height * geom.width;
        let mut out = vec![0.0; batch * plane_out];
        let mut cols = vec![0.0; geom.col_rows() * h * wd];
        for i in 0..batch {
            // cols = W^T x, W viewed as [Cin, Cout*k*k]
            kernels::gemm(
                geom.col_rows(),
                cin,
                h * wd,
                tw.data(),
                true,
                &tx.data()[i * plane_in..(i + 1) * plane_in],
                false,
                &mut cols,
                0.0,
            );
            kernels::col2im(&cols, &geom, &mut out[i * plane_out..(i + 1) * plane_out]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.height * geom.width);
        }
        let value = Tensor::from_parts(vec![batch, cout, geom.height, geom.width], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Deconv2d { x, w, b, stride }, &inputs))
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let v = bias[i % c];
        chunk.iter_mut().for_each(|o| *o += v);
    }
}

fn bias_grad(g: &[f64], channels: usize, plane: usize, s: &mut [f64]) {
    for (i, chunk) in g.chunks(plane).enumerate() {
        s[i % channels] += chunk.iter().sum::<f64>();
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_conv2d(
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
    out: &Tensor,
    g: &[f64],
    grads: &mut Grads,
) {
    let (tx, tw) = (grads.value(x), grads.value(w));
    let (xs, ws) = (tx.shape().to_vec(), tw.shape().to_vec());
    let geom = ConvGeom {
        channels: xs[1],
        height: xs[2],
        width: xs[3],
        kernel: ws[2],
        stride,
        pad,
    };
    let (batch, out_c) = (xs[0], ws[0]);
    let plane_in = xs[1] * xs[2] * xs[3];
    let plane_out = out.numel() / batch;
    let (rows, ncols) = (geom.col_rows(), geom.col_cols());
    let direct = geom.kernel == 1 && stride == 1 && pad == 0;
    if let Some(b) = b {
        if let Some(s) = grads.slot(b) {
            bias_grad(g, out_c, ncols, s);
        }
    }
    let mut cols = vec![0.0; rows * ncols];
    if grads.slot(w).is_some() {
        let mut dw = vec![0.0; out_c * rows];
        for i in 0..batch {
            let xin = &tx.data()[i * plane_in..(i + 1) * plane_in];
            let src: &[f64] = if direct {
                xin
            } else {
                kernels::im2col(xin, &geom, &mut cols);
                &cols
            };
            // dW += dY * cols^T
            kernels::gemm(
                out_c,
                ncols,
                rows,
                &g[i * plane_out..(i + 1) * plane_out],
                false,
                src,
                true,
                &mut dw,
                1.0,
            );
        }
        grads.add(w, &dw);
    }
    if let Some(s) = grads.slot(x) {
        for i in 0..batch {
            let dst = &mut s[i * plane_in..(i + 1) * plane_in];
            let gy = &g[i * plane_out..(i + 1) * plane_out];
            if direct {
                kernels::gemm(rows, out_c, ncols, tw.data(), true, gy, false, dst, 1.0);
            } else {
                kernels::gemm(rows, out_c, ncols, tw.data(), true, gy, false, &mut cols, 0.0);
                kernels::col2im(&cols, &geom, dst);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn backward_deconv2d(
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    out: &Tensor,
    g: &[f64],
    grads: &mut Grads,
) {
    let (tx, tw) = (grads.value(x), grads.value(w));
    let (xs, ws) = (tx.shape().to_vec(), tw.shape().to_vec());
    let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let os = out.shape();
    let geom = ConvGeom {
        channels: ws[1],
        height: os[2],
        width: os[3],
        kernel: ws[2],
        stride,
        pad: 0,
    };
    let plane_in = cin * h * wd;
    let plane_out = out.numel() / batch;
    let rows = geom.col_rows();
    if let Some(b) = b {
        if let Some(s) = grads.slot(b) {
            bias_grad(g, ws[1], os[2] * os[3], s);
        }
    }
    let want_w = grads.slot(w).is_some();
    let want_x = grads.slot(x).is_some();
    let mut dw = if want_w { vec![0.0; cin * rows] } else { Vec::new() };
    let mut cols = vec![0.0; rows * h * wd];
    for i in 0..batch {
        kernels::im2col(&g[i * plane_out..(i + 1) * plane_out], &geom, &mut cols);
        if want_w {
            // dW += x * cols^T
            kernels::gemm(
                cin,
                h * wd,
                rows,
                &tx.data()[i * plane_in..(i + 1) * plane_in],
                false,
                &cols,
                true,
                &mut dw,
                1.0,
            );
        }
        if want_x {
            let s = grads.slot(x).unwrap();
            kernels::gemm(
                cin,
                rows,
                h * wd,
                tw.data(),
                false,
                &cols,
                false,
                &mut s[i * plane_in..(i + 1) * plane_in],
                1.0,
            );
        }
    }
    if want_w {
        grads.add(w, &dw);
    }
}
