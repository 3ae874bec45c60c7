use super::kernels;
use super::tape::{Grads, Op, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    /// Scalar node with value `value` whose derivative with respect to
    /// `e` is `dloss` (same length as `e`). Used for losses whose
    /// gradients have a closed form.
    pub fn scalar_with_grad(&mut self, e: Var, value: f64, dloss: Vec<f64>) -> Result<Var> {
        if dloss.len() != self.value(e).numel() {
            return Err(Error::shape("scalar_with_grad", self.value(e).shape(), &[dloss.len()]));
        }
        Ok(self.push(Tensor::scalar(value), Op::PrecomputedGrad { e, dloss }, &[e]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |x| k * x);
        self.push(v, Op::Scale(a, k), &[a])
    }

    /// Adds `bias[c]` along axis 1 of `x` viewed as `[outer, C, inner]`
    /// where `inner` is the product of all axes after the channel axis.
    /// For a rank-2 `[N, C]` input this is the usual row-broadcast bias.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let tb = self.value(bias);
        let c = *tx.shape().get(1).ok_or_else(|| Error::shape("add_bias", tx.shape(), tb.shape()))?;
        if tb.numel() != c {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias { x, bias, inner }, &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut c, 0.0);
        let out = Tensor::from_parts(vec![m, n], c);
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Batched matmul `[G, M, K] x [G, K, N] -> [G, M, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] || ta.shape()[2] != tb.shape()[1] {
            return Err(Error::shape("bmm", ta.shape(), tb.shape()));
        }
        let (g, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut c = vec![0.0; g * m * n];
        for i in 0..g {
            kernels::gemm(
                m,
                k,
                n,
                &ta.data()[i * m * k..],
                false,
                &tb.data()[i * k * n..],
                false,
                &mut c[i * m * n..],
                0.0,
            );
        }
        let out = Tensor::from_parts(vec![g, m, n], c);
        Ok(self.push(out, Op::Bmm(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut check: Vec<usize> = perm.to_vec();
        check.sort_unstable();
        if perm.len() != t.rank() || check.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::shape("permute", t.shape(), perm));
        }
        let mut dst = vec![0.0; t.numel()];
        kernels::permute(t.data(), t.shape(), perm, &mut dst);
        let out = Tensor::from_parts(kernels::permuted_shape(t.shape(), perm), dst);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Spatial crop of a `[B, C, H, W]` tensor.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || top + height > s[2] || left + width > s[3] {
            return Err(Error::shape("crop", s, &[top + height, left + width]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut data = Vec::with_capacity(planes * height * width);
        for p in 0..planes {
            for y in 0..height {
                let start = (p * h + top + y) * w + left;
                data.extend_from_slice(&t.data()[start..start + width]);
            }
        }
        let out = Tensor::from_parts(vec![s[0], s[1], height, width], data);
        Ok(self.push(out, Op::Crop { x, top, left }, &[x]))
    }

    /// Central crop to `height x width`.
    pub fn crop_center(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < height || s[3] < width {
            return Err(Error::shape("crop_center", &s, &[height, width]));
        }
        if s[2] == height && s[3] == width {
            return Ok(x);
        }
        self.crop(x, (s[2] - height) / 2, (s[3] - width) / 2, height, width)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        if let Some(k) = &mut self.kinks {
            k.extend(self.nodes[a.0].value.data().iter().map(|x| *x > 0.0));
        }
        self.push(v, Op::Relu(a), &[a])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let n = *t.shape().last().unwrap();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Bilinear resize (half-pixel centers) of a `[B, C, H, W]` tensor.
    pub fn resize_bilinear(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape("resize_bilinear", s, &[height, width]));
        }
        let data = kernels::resize_bilinear(t.data(), s[0] * s[1], s[2], s[3], height, width);
        let out = Tensor::from_parts(vec![s[0], s[1], height, width], data);
        Ok(self.push(out, Op::Resize(x), &[x]))
    }

    /// `[B, C, H, W] -> [4B, C, H/2, W/2]`, windows in row-major order per item.
    pub fn window_partition(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Partition {
                height: *s.get(2).unwrap_or(&0),
                width: *s.get(3).unwrap_or(&0),
                block: 2,
            });
        }
        let mut dst = vec![0.0; self.value(x).numel()];
        kernels::window_shuffle(self.value(x).data(), s[0], s[1], s[2], s[3], false, &mut dst);
        let out = Tensor::from_parts(vec![4 * s[0], s[1], s[2] / 2, s[3] / 2], dst);
        Ok(self.push(out, Op::Windows { x, merge: false }, &[x]))
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[0].is_multiple_of(4) {
            return Err(Error::shape("window_merge", &s, &[4]));
        }
        let (b, h, w) = (s[0] / 4, 2 * s[2], 2 * s[3]);
        let mut dst = vec![0.0; self.value(x).numel()];
        kernels::window_shuffle(self.value(x).data(), b, s[1], h, w, true, &mut dst);
        let out = Tensor::from_parts(vec![b, s[1], h, w], dst);
        Ok(self.push(out, Op::Windows { x, merge: true }, &[x]))
    }
}

pub(super) fn backward_mul(a: Var, b: Var, g: &[f64], grads: &mut Grads) {
    let (ta, tb) = (grads.value(a), grads.value(b));
    if let Some(s) = grads.slot(a) {
        for ((s, y), g) in s.iter_mut().zip(tb.data()).zip(g) {
            *s += g * y;
        }
    }
    if let Some(s) = grads.slot(b) {
        for ((s, x), g) in s.iter_mut().zip(ta.data()).zip(g) {
            *s += g * x;
        }
    }
}

pub(super) fn backward_add_bias(x: Var, bias: Var, inner: usize, g: &[f64], grads: &mut Grads) {
    grads.add(x, g);
    if let Some(s) = grads.slot(bias) {
        let c = s.len();
        for (i, gv) in g.iter().enumerate() {
            s[(i / inner) % c] += gv;
        }
    }
}

pub(super) fn backward_matmul(a: Var, b: Var, g: &[f64], grads: &mut Grads) {
    let (ta, tb) = (grads.value(a), grads.value(b));
    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
    if let Some(s) = grads.slot(a) {
        // dA = G * B^T
        kernels::gemm(m, n, k, g, false, tb.data(), true, s, 1.0);
    }
    if let Some(s) = grads.slot(b) {
        // dB = A^T * G
        kernels::gemm(k, m, n, ta.data(), true, g, false, s, 1.0);
    }
}

pub(super) fn backward_bmm(a: Var, b: Var, g: &[f64], grads: &mut Grads) {
    let (ta, tb) = (grads.value(a), grads.value(b));
    let (bg, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
    if let Some(s) = grads.slot(a) {
        for i in 0..bg {
            kernels::gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                false,
                &tb.data()[i * k * n..],
                true,
                &mut s[i * m * k..],
                1.0,
            );
        }
    }
    if let Some(s) = grads.slot(b) {
        for i in 0..bg {
            kernels::gemm(
                k,
                m,
                n,
                &ta.data()[i * m * k..],
                true,
                &g[i * m * n..],
                false,
                &mut s[i * k * n..],
                1.0,
            );
        }
    }
}

pub(super) fn backward_permute(a: Var, perm: &[usize], out: &Tensor, g: &[f64], grads: &mut Grads) {
    if let Some(s) = grads.slot(a) {
        let mut tmp = vec![0.0; g.len()];
        kernels::permute(g, out.shape(), &kernels::invert_perm(perm), &mut tmp);
        s.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    }
}

pub(super) fn backward_concat(inputs: &[Var], axis: usize, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let shape = out.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let total = shape[axis] * inner;
    let mut offset = 0;
    for &v in inputs {
        let chunk = grads.value(v).shape()[axis] * inner;
        if let Some(s) = grads.slot(v) {
            for o in 0..outer {
                let src = &g[o * total + offset..o * total + offset + chunk];
                s[o * chunk..(o + 1) * chunk]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        offset += chunk;
    }
}

pub(super) fn backward_crop(x: Var, top: usize, left: usize, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let s_in = grads.value(x).shape().to_vec();
    let (h, w) = (s_in[2], s_in[3]);
    let (oh, ow) = (out.shape()[2], out.shape()[3]);
    if let Some(s) = grads.slot(x) {
        for p in 0..s_in[0] * s_in[1] {
            for y in 0..oh {
                let dst = (p * h + top + y) * w + left;
                let src = (p * oh + y) * ow;
                s[dst..dst + ow].iter_mut().zip(&g[src..src + ow]).for_each(|(a, b)| *a += b);
            }
        }
    }
}

pub(super) fn backward_relu(a: Var, g: &[f64], grads: &mut Grads) {
    let t = grads.value(a);
    if let Some(s) = grads.slot(a) {
        for ((s, x), g) in s.iter_mut().zip(t.data()).zip(g) {
            if *x > 0.0 {
                *s += g;
            }
        }
    }
}

pub(super) fn backward_gelu(a: Var, g: &[f64], grads: &mut Grads) {
    let t = grads.value(a);
    if let Some(s) = grads.slot(a) {
        for ((s, x), g) in s.iter_mut().zip(t.data()).zip(g) {
            *s += g * gelu_grad(*x);
        }
    }
}

pub(super) fn backward_softmax(a: Var, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let n = *out.shape().last().unwrap();
    if let Some(s) = grads.slot(a) {
        for ((srow, yrow), grow) in s.chunks_mut(n).zip(out.data().chunks(n)).zip(g.chunks(n)) {
            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
            for ((s, y), g) in srow.iter_mut().zip(yrow).zip(grow) {
                *s += y * (g - dot);
            }
        }
    }
}

pub(super) fn backward_resize(x: Var, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let s_in = grads.value(x).shape().to_vec();
    if let Some(s) = grads.slot(x) {
        kernels::resize_bilinear_adjoint(
            g,
            s_in[0] * s_in[1],
            s_in[2],
            s_in[3],
            out.shape()[2],
            out.shape()[3],
            s,
        );
    }
}

pub(super) fn backward_windows(x: Var, merge: bool, out: &Tensor, g: &[f64], grads: &mut Grads) {
    let s_out = out.shape();
    if let Some(s) = grads.slot(x) {
        let mut tmp = vec![0.0; g.len()];
        if merge {
            // forward merged [4B,..] into [B,..]; adjoint partitions
            kernels::window_shuffle(g, s_out[0], s_out[1], s_out[2], s_out[3], false, &mut tmp);
        } else {
            kernels::window_shuffle(g, s_out[0] / 4, s_out[1], 2 * s_out[2], 2 * s_out[3], true, &mut tmp);
        }
        s.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_op;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let p = tape.matmul(i, i).unwrap();
        assert_eq!(tape.value(p), &Tensor::eye(2));
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let err = check_op(&[a, b], 7, |tape, v| tape.matmul(v[0], v[1]));
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let s = tape.softmax_rows(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
        let big = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let s = tape.softmax_rows(big).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 0.0]);
        let nan = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert!(matches!(tape.softmax_rows(nan), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 5], 3.0, &mut rng));
        let s = tape.softmax_rows(x).unwrap();
        for row in tape.value(s).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn elementwise_and_layout_gradchecks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let bias = Tensor::randn(&[3], 1.0, &mut rng);
        let cases: Vec<(&str, f64)> = vec![
            ("mul", check_op(&[a.clone(), b.clone()], 1, |t, v| t.mul(v[0], v[1]))),
            ("sub", check_op(&[a.clone(), b.clone()], 1, |t, v| t.sub(v[0], v[1]))),
            ("gelu", check_op(std::slice::from_ref(&a), 1, |t, v| Ok(t.gelu(v[0])))),
            ("sigmoid", check_op(std::slice::from_ref(&a), 1, |t, v| Ok(t.sigmoid(v[0])))),
            ("softmax", check_op(std::slice::from_ref(&a), 1, |t, v| t.softmax_rows(v[0]))),
            ("bias", check_op(&[a.clone(), bias], 1, |t, v| t.add_bias(v[0], v[1]))),
            ("permute", check_op(std::slice::from_ref(&a), 1, |t, v| t.permute(v[0], &[0, 2, 3, 1]))),
            ("concat", check_op(&[a.clone(), b.clone()], 1, |t, v| t.concat(&[v[0], v[1]], 1))),
            ("crop", check_op(std::slice::from_ref(&a), 1, |t, v| t.crop(v[0], 1, 0, 2, 3))),
            ("resize", check_op(std::slice::from_ref(&a), 1, |t, v| t.resize_bilinear(v[0], 7, 5))),
            ("partition", check_op(std::slice::from_ref(&a), 1, |t, v| t.window_partition(v[0]))),
            ("merge", check_op(std::slice::from_ref(&a), 1, |t, v| {
                let p = t.window_partition(v[0])?;
                let s = t.scale(p, 2.0);
                t.window_merge(s)
            })),
        ];
        for (name, err) in cases {
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn bmm_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let err = check_op(&[a, b], 2, |t, v| t.bmm(v[0], v[1]));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        // a second call accumulates
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        let y = tape.scale(x, 3.0);
        assert!(!tape.requires_grad(y));
    }
}
