//! Shape, reduction, attention and loss primitives on the tape.

use super::{Op, Tape, TensorRef};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Label value excluded from loss and metric computations.
pub const IGNORE_LABEL: u8 = 255;

impl<F: Scalar> Tape<F> {
    // ── matmul & transpose ───────────────────────────────────────────

    /// 2-d matrix product `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_finite("matmul", a)?;
        self.check_finite("matmul", b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                expected: vec![2],
                got: vec![sa.len(), sb.len()],
            });
        }
        if sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                axis: "inner (lhs cols vs rhs rows)",
                expected: sa[1],
                got: sb[0],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        super::conv::gemm(m, k, n, self.data(a), self.data(b), &mut data);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push_result(vec![m, n], data, rg, Some(Op::Matmul { a: a.0, b: b.0 })))
    }

    pub(crate) fn backward_matmul(&mut self, a: u32, b: u32, out: usize, g_out: &[F]) {
        let sa = self.entries[a as usize].shape.clone();
        let sb = self.entries[b as usize].shape.clone();
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let _ = out;
        if self.wants_grad(a) {
            // dA = G · Bᵀ
            let mut contrib = vec![F::zero(); m * k];
            super::conv::gemm_abt(m, n, k, g_out, &self.entries[b as usize].data.clone(), &mut contrib);
            self.accum(a, &contrib);
        }
        if self.wants_grad(b) {
            // dB = Aᵀ · G
            let mut contrib = vec![F::zero(); k * n];
            super::conv::gemm_atb(k, m, n, &self.entries[a as usize].data.clone(), g_out, &mut contrib);
            self.accum(b, &contrib);
        }
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("transpose", a)?;
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                expected: vec![2],
                got: vec![sa.len()],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![c, r], data, rg, Some(Op::Transpose { a: a.0 })))
    }

    pub(crate) fn backward_transpose(&mut self, a: u32, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let so = self.entries[out].shape.clone(); // [c, r]
        let (c, r) = (so[0], so[1]);
        let mut contrib = vec![F::zero(); r * c];
        for i in 0..c {
            for j in 0..r {
                contrib[j * c + i] = g_out[i * r + j];
            }
        }
        self.accum(a, &contrib);
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Softmax over the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, a: TensorRef) -> Result<TensorRef> {
        if self.shape(a).len() != 4 {
            return Err(Error::Shape {
                op: "softmax_channels",
                expected: vec![4],
                got: vec![self.shape(a).len()],
            });
        }
        self.softmax_axis(a, 1)
    }

    /// Row softmax of a 2-d tensor: every row sums to one.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        if self.shape(a).len() != 2 {
            return Err(Error::Shape {
                op: "softmax_rows",
                expected: vec![2],
                got: vec![self.shape(a).len()],
            });
        }
        self.softmax_axis(a, 1)
    }

    fn softmax_axis(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        self.check_finite("softmax", a)?;
        let shape = self.shape(a).to_vec();
        let l = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * l * inner + i;
                let mut mx = F::neg_infinity();
                for k in 0..l {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut sum = F::zero();
                for k in 0..l {
                    let e = (src[base + k * inner] - mx).exp();
                    data[base + k * inner] = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                for k in 0..l {
                    data[base + k * inner] *= inv;
                }
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(shape, data, rg, Some(Op::SoftmaxAxis { a: a.0, axis })))
    }

    pub(crate) fn backward_softmax(&mut self, a: u32, axis: usize, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let shape = self.entries[out].shape.clone();
        let l = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let p = self.entries[out].data.clone();
        let mut contrib = vec![F::zero(); p.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * l * inner + i;
                let mut dot = F::zero();
                for k in 0..l {
                    let idx = base + k * inner;
                    dot += g_out[idx] * p[idx];
                }
                for k in 0..l {
                    let idx = base + k * inner;
                    contrib[idx] = p[idx] * (g_out[idx] - dot);
                }
            }
        }
        self.accum(a, &contrib);
    }

    // ── pooling & resampling ─────────────────────────────────────────

    /// 2x2 average pooling, stride 2, on NCHW input with even extents.
    pub fn avg_pool2d(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("avg_pool2d", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "avg_pool2d", expected: vec![4], got: vec![s.len()] });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 {
            return Err(Error::Dimension { op: "avg_pool2d", axis: "height", expected: h / 2 * 2 + 2, got: h });
        }
        if w % 2 != 0 {
            return Err(Error::Dimension { op: "avg_pool2d", axis: "width", expected: w / 2 * 2 + 2, got: w });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(a);
        let mut data = vec![F::zero(); n * c * oh * ow];
        let quarter = F::c(0.25);
        for nc in 0..n * c {
            let sbase = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let i = sbase + (2 * y) * w + 2 * x;
                    data[obase + y * ow + x] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![n, c, oh, ow], data, rg, Some(Op::AvgPool2 { a: a.0 })))
    }

    pub(crate) fn backward_avg_pool2(&mut self, a: u32, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let so = self.entries[out].shape.clone();
        let (n, c, oh, ow) = (so[0], so[1], so[2], so[3]);
        let (h, w) = (oh * 2, ow * 2);
        let mut contrib = vec![F::zero(); n * c * h * w];
        let quarter = F::c(0.25);
        for nc in 0..n * c {
            let sbase = nc * h * w;
            let obase = nc * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let g = g_out[obase + y * ow + x] * quarter;
                    let i = sbase + (2 * y) * w + 2 * x;
                    contrib[i] += g;
                    contrib[i + 1] += g;
                    contrib[i + w] += g;
                    contrib[i + w + 1] += g;
                }
            }
        }
        self.accum(a, &contrib);
    }

    /// Bilinear upsampling by an integer factor with corner alignment, so
    /// input corner values are preserved exactly in the output corners.
    pub fn bilinear_upsample(&mut self, a: TensorRef, factor: usize) -> Result<TensorRef> {
        self.check_finite("bilinear_upsample", a)?;
        if factor == 0 {
            return Err(Error::Config("bilinear_upsample: factor must be >= 1".into()));
        }
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "bilinear_upsample", expected: vec![4], got: vec![s.len()] });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let ytab = axis_lerp_table::<F>(h, oh);
        let xtab = axis_lerp_table::<F>(w, ow);
        let src = self.data(a);
        let mut data = vec![F::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let sbase = nc * h * w;
            let obase = nc * oh * ow;
            for (y, &(y0, y1, fy)) in ytab.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xtab.iter().enumerate() {
                    let v00 = src[sbase + y0 * w + x0];
                    let v01 = src[sbase + y0 * w + x1];
                    let v10 = src[sbase + y1 * w + x0];
                    let v11 = src[sbase + y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    data[obase + y * ow + x] = top + (bot - top) * fy;
                }
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![n, c, oh, ow], data, rg, Some(Op::BilinearUp { a: a.0, factor })))
    }

    pub(crate) fn backward_bilinear(&mut self, a: u32, factor: usize, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let so = self.entries[out].shape.clone();
        let (n, c, oh, ow) = (so[0], so[1], so[2], so[3]);
        let (h, w) = (oh / factor, ow / factor);
        let ytab = axis_lerp_table::<F>(h, oh);
        let xtab = axis_lerp_table::<F>(w, ow);
        let mut contrib = vec![F::zero(); n * c * h * w];
        let one = F::one();
        for nc in 0..n * c {
            let sbase = nc * h * w;
            let obase = nc * oh * ow;
            for (y, &(y0, y1, fy)) in ytab.iter().enumerate() {
                for (x, &(x0, x1, fx)) in xtab.iter().enumerate() {
                    let g = g_out[obase + y * ow + x];
                    contrib[sbase + y0 * w + x0] += g * (one - fy) * (one - fx);
                    contrib[sbase + y0 * w + x1] += g * (one - fy) * fx;
                    contrib[sbase + y1 * w + x0] += g * fy * (one - fx);
                    contrib[sbase + y1 * w + x1] += g * fy * fx;
                }
            }
        }
        self.accum(a, &contrib);
    }

    // ── normalization ────────────────────────────────────────────────

    /// Instance normalization over the trailing two axes: per (n, c) map
    /// for NCHW input, the whole matrix for 2-d input. Parameter-free.
    pub fn instance_norm(&mut self, a: TensorRef, eps: F) -> Result<TensorRef> {
        self.check_finite("instance_norm", a)?;
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape { op: "instance_norm", expected: vec![2], got: vec![s.len()] });
        }
        let m = s[s.len() - 2] * s[s.len() - 1];
        let inst: usize = s[..s.len() - 2].iter().product::<usize>().max(1);
        let src = self.data(a);
        let mut data = vec![F::zero(); src.len()];
        let mut stats = Vec::with_capacity(inst);
        // Accumulate statistics in f64 so a constant map normalizes to an
        // exact zero regardless of the working precision.
        for g in 0..inst {
            let seg = &src[g * m..(g + 1) * m];
            let mut acc = 0.0f64;
            for &v in seg {
                acc += v.to_f64c();
            }
            let mean = F::c(acc / m as f64);
            let mut vacc = 0.0f64;
            for &v in seg {
                let d = (v - mean).to_f64c();
                vacc += d * d;
            }
            let var = F::c(vacc / m as f64);
            let inv_std = F::one() / (var + eps).sqrt();
            for (i, &v) in seg.iter().enumerate() {
                data[g * m + i] = (v - mean) * inv_std;
            }
            stats.push((mean, inv_std));
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(s, data, rg, Some(Op::InstanceNorm { a: a.0, stats })))
    }

    pub(crate) fn backward_instance_norm(
        &mut self,
        a: u32,
        stats: &[(F, F)],
        out: usize,
        g_out: &[F],
    ) {
        if !self.wants_grad(a) {
            return;
        }
        let y = self.entries[out].data.clone();
        let m = y.len() / stats.len();
        let inv_m = F::one() / F::c(m as f64);
        let mut contrib = vec![F::zero(); y.len()];
        for (g, &(_mean, inv_std)) in stats.iter().enumerate() {
            let base = g * m;
            let mut g_mean = F::zero();
            let mut gy_mean = F::zero();
            for i in 0..m {
                g_mean += g_out[base + i];
                gy_mean += g_out[base + i] * y[base + i];
            }
            g_mean *= inv_m;
            gy_mean *= inv_m;
            for i in 0..m {
                contrib[base + i] = inv_std * (g_out[base + i] - g_mean - y[base + i] * gy_mean);
            }
        }
        self.accum(a, &contrib);
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("sum_all", a)?;
        let mut s = F::zero();
        for &v in self.data(a) {
            s += v;
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![1], vec![s], rg, Some(Op::SumAll { a: a.0 })))
    }

    /// Mean of all elements (sum followed by a scale).
    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.data(a).len();
        let s = self.sum_all(a)?;
        self.mul_scalar(s, F::one() / F::c(n as f64))
    }

    /// Per-pixel mean over the channel axis: NCHW -> Nx1xHxW.
    pub fn mean_channels(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("mean_channels", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "mean_channels", expected: vec![4], got: vec![s.len()] });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.data(a);
        let mut data = vec![F::zero(); n * h * w];
        let inv_c = F::one() / F::c(c as f64);
        for ni in 0..n {
            for ci in 0..c {
                let sbase = (ni * c + ci) * h * w;
                let obase = ni * h * w;
                for p in 0..h * w {
                    data[obase + p] += src[sbase + p];
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv_c;
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![n, 1, h, w], data, rg, Some(Op::MeanChannels { a: a.0 })))
    }

    pub(crate) fn backward_mean_channels(&mut self, a: u32, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let sa = self.entries[a as usize].shape.clone();
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let _ = out;
        let inv_c = F::one() / F::c(c as f64);
        let mut contrib = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            let obase = ni * h * w;
            for ci in 0..c {
                let sbase = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    contrib[sbase + p] = g_out[obase + p] * inv_c;
                }
            }
        }
        self.accum(a, &contrib);
    }

    /// Sub-pixel rearrangement: each block of four channels becomes the
    /// 2x2 sub-pixels of one output channel (NCHW -> N,C/4,2H,2W).
    pub fn depth_to_space(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("depth_to_space", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "depth_to_space", expected: vec![4], got: vec![s.len()] });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c % 4 != 0 {
            return Err(Error::Dimension {
                op: "depth_to_space",
                axis: "channels (multiple of 4)",
                expected: c.div_ceil(4) * 4,
                got: c,
            });
        }
        let oc = c / 4;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data(a);
        let mut data = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for co in 0..oc {
                for sy in 0..2 {
                    for sx in 0..2 {
                        let ci = co * 4 + sy * 2 + sx;
                        let sbase = ((ni * c + ci) * h) * w;
                        let obase = (ni * oc + co) * oh * ow;
                        for y in 0..h {
                            for x in 0..w {
                                data[obase + (2 * y + sy) * ow + 2 * x + sx] =
                                    src[sbase + y * w + x];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![n, oc, oh, ow], data, rg, Some(Op::DepthToSpace { a: a.0 })))
    }

    pub(crate) fn backward_depth_to_space(&mut self, a: u32, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let sa = self.entries[a as usize].shape.clone();
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let oc = c / 4;
        let (oh, ow) = (2 * h, 2 * w);
        let _ = out;
        let mut contrib = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for co in 0..oc {
                for sy in 0..2 {
                    for sx in 0..2 {
                        let ci = co * 4 + sy * 2 + sx;
                        let sbase = ((ni * c + ci) * h) * w;
                        let obase = (ni * oc + co) * oh * ow;
                        for y in 0..h {
                            for x in 0..w {
                                contrib[sbase + y * w + x] =
                                    g_out[obase + (2 * y + sy) * ow + 2 * x + sx];
                            }
                        }
                    }
                }
            }
        }
        self.accum(a, &contrib);
    }

    // ── layout ops ───────────────────────────────────────────────────

    /// NCHW -> (N*H*W) x C token matrix, sample-major then row-major pixels.
    pub fn flatten_spatial(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.check_finite("flatten_spatial", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "flatten_spatial", expected: vec![4], got: vec![s.len()] });
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.data(a);
        let mut data = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let sbase = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    data[(ni * h * w + p) * c + ci] = src[sbase + p];
                }
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![n * h * w, c], data, rg, Some(Op::FlattenSpatial { a: a.0 })))
    }

    pub(crate) fn backward_flatten_spatial(&mut self, a: u32, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let sa = self.entries[a as usize].shape.clone();
        let (n, c, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let _ = out;
        let mut contrib = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let sbase = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    contrib[sbase + p] = g_out[(ni * h * w + p) * c + ci];
                }
            }
        }
        self.accum(a, &contrib);
    }

    /// Inverse of [`Tape::flatten_spatial`] for the given target geometry.
    pub fn unflatten_spatial(
        &mut self,
        a: TensorRef,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> Result<TensorRef> {
        self.check_finite("unflatten_spatial", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != n * h * w || s[1] != c {
            return Err(Error::Shape {
                op: "unflatten_spatial",
                expected: vec![n * h * w, c],
                got: s,
            });
        }
        let src = self.data(a);
        let mut data = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let obase = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    data[obase + p] = src[(ni * h * w + p) * c + ci];
                }
            }
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![n, c, h, w], data, rg, Some(Op::UnflattenSpatial { a: a.0 })))
    }

    pub(crate) fn backward_unflatten_spatial(&mut self, a: u32, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let so = self.entries[out].shape.clone();
        let (n, c, h, w) = (so[0], so[1], so[2], so[3]);
        let mut contrib = vec![F::zero(); n * c * h * w];
        for ni in 0..n {
            for ci in 0..c {
                let obase = (ni * c + ci) * h * w;
                for p in 0..h * w {
                    contrib[(ni * h * w + p) * c + ci] = g_out[obase + p];
                }
            }
        }
        self.accum(a, &contrib);
    }

    pub fn slice_rows(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        self.check_finite("slice_rows", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape { op: "slice_rows", expected: vec![2], got: vec![s.len()] });
        }
        if start + len > s[0] {
            return Err(Error::Dimension { op: "slice_rows", axis: "rows", expected: s[0], got: start + len });
        }
        let c = s[1];
        let data = self.data(a)[start * c..(start + len) * c].to_vec();
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![len, c], data, rg, Some(Op::SliceRows { a: a.0, start })))
    }

    pub(crate) fn backward_slice_rows(&mut self, a: u32, start: usize, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let sa = self.entries[a as usize].shape.clone();
        let c = sa[1];
        let _ = out;
        let mut contrib = vec![F::zero(); sa[0] * c];
        contrib[start * c..start * c + g_out.len()].copy_from_slice(g_out);
        self.accum(a, &contrib);
    }

    pub fn slice_cols(&mut self, a: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        self.check_finite("slice_cols", a)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Shape { op: "slice_cols", expected: vec![2], got: vec![s.len()] });
        }
        if start + len > s[1] {
            return Err(Error::Dimension { op: "slice_cols", axis: "columns", expected: s[1], got: start + len });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut data = vec![F::zero(); r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.any_requires_grad(&[a]);
        Ok(self.push_result(vec![r, len], data, rg, Some(Op::SliceCols { a: a.0, start })))
    }

    pub(crate) fn backward_slice_cols(&mut self, a: u32, start: usize, out: usize, g_out: &[F]) {
        if !self.wants_grad(a) {
            return;
        }
        let sa = self.entries[a as usize].shape.clone();
        let (r, c) = (sa[0], sa[1]);
        let len = self.entries[out].shape[1];
        let mut contrib = vec![F::zero(); r * c];
        for i in 0..r {
            contrib[i * c + start..i * c + start + len].copy_from_slice(&g_out[i * len..(i + 1) * len]);
        }
        self.accum(a, &contrib);
    }

    pub fn concat_rows(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_finite("concat_rows", a)?;
        self.check_finite("concat_rows", b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "concat_rows",
                axis: "columns",
                expected: sa.get(1).copied().unwrap_or(0),
                got: sb.get(1).copied().unwrap_or(0),
            });
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push_result(
            vec![sa[0] + sb[0], sa[1]],
            data,
            rg,
            Some(Op::ConcatRows { a: a.0, b: b.0 }),
        ))
    }

    pub(crate) fn backward_concat_rows(&mut self, a: u32, b: u32, g_out: &[F]) {
        let na = self.entries[a as usize].data.len();
        if self.wants_grad(a) {
            self.accum(a, &g_out[..na]);
        }
        if self.wants_grad(b) {
            let gb = g_out[na..].to_vec();
            self.accum(b, &gb);
        }
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.check_finite("concat_cols", a)?;
        self.check_finite("concat_cols", b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension {
                op: "concat_cols",
                axis: "rows",
                expected: sa.first().copied().unwrap_or(0),
                got: sb.first().copied().unwrap_or(0),
            });
        }
        let (r, ca, cb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a).to_vec(), self.data(b).to_vec());
        let mut data = vec![F::zero(); r * (ca + cb)];
        for i in 0..r {
            data[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&da[i * ca..(i + 1) * ca]);
            data[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push_result(
            vec![r, ca + cb],
            data,
            rg,
            Some(Op::ConcatCols { a: a.0, b: b.0 }),
        ))
    }

    pub(crate) fn backward_concat_cols(&mut self, a: u32, b: u32, out: usize, g_out: &[F]) {
        let sa = self.entries[a as usize].shape.clone();
        let (r, ca) = (sa[0], sa[1]);
        let cw = self.entries[out].shape[1];
        let cb = cw - ca;
        if self.wants_grad(a) {
            let mut ga = vec![F::zero(); r * ca];
            for i in 0..r {
                ga[i * ca..(i + 1) * ca].copy_from_slice(&g_out[i * cw..i * cw + ca]);
            }
            self.accum(a, &ga);
        }
        if self.wants_grad(b) {
            let mut gb = vec![F::zero(); r * cb];
            for i in 0..r {
                gb[i * cb..(i + 1) * cb].copy_from_slice(&g_out[i * cw + ca..(i + 1) * cw]);
            }
            self.accum(b, &gb);
        }
    }

    // ── cross entropy ────────────────────────────────────────────────

    /// Mean pixelwise cross entropy of NKHW logits against a class raster,
    /// skipping [`IGNORE_LABEL`]. Returns the scalar loss and the number of
    /// contributing pixels (zero pixels yield a zero loss).
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorRef,
        labels: &Array<u8>,
    ) -> Result<(TensorRef, usize)> {
        self.check_finite("cross_entropy_mean", logits)?;
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(Error::Shape { op: "cross_entropy_mean", expected: vec![4], got: vec![s.len()] });
        }
        let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
        if labels.shape != [n, h, w] {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                expected: vec![n, h, w],
                got: labels.shape.clone(),
            });
        }
        for &l in &labels.data {
            if l != IGNORE_LABEL && l as usize >= k {
                return Err(Error::Data(format!(
                    "cross_entropy_mean: label {l} out of range for {k} classes"
                )));
            }
        }
        let src = self.data(logits);
        let hw = h * w;
        let mut probs = vec![F::zero(); src.len()];
        let mut total = F::zero();
        let mut count = 0usize;
        for ni in 0..n {
            for p in 0..hw {
                let mut mx = F::neg_infinity();
                for ki in 0..k {
                    mx = mx.max(src[(ni * k + ki) * hw + p]);
                }
                let mut sum = F::zero();
                for ki in 0..k {
                    let e = (src[(ni * k + ki) * hw + p] - mx).exp();
                    probs[(ni * k + ki) * hw + p] = e;
                    sum += e;
                }
                let inv = F::one() / sum;
                for ki in 0..k {
                    probs[(ni * k + ki) * hw + p] *= inv;
                }
                let y = labels.data[ni * hw + p];
                if y != IGNORE_LABEL {
                    let lse = mx + sum.ln();
                    total += lse - src[(ni * k + y as usize) * hw + p];
                    count += 1;
                }
            }
        }
        let loss = if count > 0 { total / F::c(count as f64) } else { F::zero() };
        let rg = self.any_requires_grad(&[logits]);
        let t = self.push_result(
            vec![1],
            vec![loss],
            rg,
            Some(Op::CrossEntropyMean {
                logits: logits.0,
                probs,
                labels: labels.data.clone(),
                count,
            }),
        );
        Ok((t, count))
    }

    pub(crate) fn backward_cross_entropy(
        &mut self,
        logits: u32,
        probs: &[F],
        labels: &[u8],
        count: usize,
        g_out: &[F],
    ) {
        if !self.wants_grad(logits) || count == 0 {
            return;
        }
        let s = self.entries[logits as usize].shape.clone();
        let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        let scale = g_out[0] / F::c(count as f64);
        let mut contrib = vec![F::zero(); probs.len()];
        for ni in 0..n {
            for p in 0..hw {
                let y = labels[ni * hw + p];
                if y == IGNORE_LABEL {
                    continue;
                }
                for ki in 0..k {
                    let idx = (ni * k + ki) * hw + p;
                    let indicator = if ki == y as usize { F::one() } else { F::zero() };
                    contrib[idx] = (probs[idx] - indicator) * scale;
                }
            }
        }
        self.accum(logits, &contrib);
    }
}

/// Per-output-index (lo, hi, frac) interpolation table for one axis with
/// corner alignment.
pub(crate) fn axis_lerp_table<F: Scalar>(n_in: usize, n_out: usize) -> Vec<(usize, usize, F)> {
    let mut tab = Vec::with_capacity(n_out);
    for i in 0..n_out {
        if n_in == 1 || n_out == 1 {
            tab.push((0, 0, F::zero()));
            continue;
        }
        let s = i as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0);
        let lo = s.floor() as usize;
        let lo = lo.min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        tab.push((lo, hi, F::c(s - lo as f64)));
    }
    tab
}
