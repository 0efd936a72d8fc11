//! 3x3 convolution (padding 1, stride 1 or 2) via im2col plus small gemm
//! kernels. Loops are sequential and fixed-order, keeping results
//! bit-deterministic for a given input.

use super::{Op, Tape, TensorRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// c += a·b for row-major a: m x k, b: k x n, c: m x n.
pub(crate) fn gemm<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aik * bj;
            }
        }
    }
}

/// c += a·bᵀ for a: m x k, b: n x k, c: m x n.
pub(crate) fn gemm_abt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c += aᵀ·b for a: k x m, b: k x n, c: m x n.
pub(crate) fn gemm_atb<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aki * bj;
            }
        }
    }
}

/// Unfold one sample into a (C*9) x (OH*OW) patch matrix.
fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    cols: &mut [F],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * ohw..(ci * 9 + ky * 3 + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut row[oy * ow..(oy + 1) * ow] {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the input plane.
fn col2im<F: Scalar>(
    cols: &[F],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dx: &mut [F],
) {
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * ohw..(ci * 9 + ky * 3 + kx + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<F: Scalar> Tape<F> {
    /// 3x3 convolution with padding 1. Output extent per axis is
    /// (len - 1) / stride + 1.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: TensorRef,
        stride: usize,
    ) -> Result<TensorRef> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("conv2d: stride must be 1 or 2, got {stride}")));
        }
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 {
            return Err(Error::Shape { op: "conv2d", expected: vec![4], got: vec![sx.len()] });
        }
        if sw.len() != 4 || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::Shape { op: "conv2d", expected: vec![0, 0, 3, 3], got: sw });
        }
        if sx[1] != sw[1] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "input channels",
                expected: sw[1],
                got: sx[1],
            });
        }
        if sb.len() != 1 || sb[0] != sw[0] {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "bias (output channels)",
                expected: sw[0],
                got: sb.first().copied().unwrap_or(0),
            });
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        if h == 0 || wd == 0 {
            return Err(Error::Dimension { op: "conv2d", axis: "spatial", expected: 1, got: 0 });
        }
        let oh = (h - 1) / stride + 1;
        let ow = (wd - 1) / stride + 1;
        let ohw = oh * ow;
        let mut data = vec![F::zero(); n * co * ohw];
        let mut cols = vec![F::zero(); ci * 9 * ohw];
        let xdat = self.data(x).to_vec();
        let wdat = self.data(w).to_vec();
        let bdat = self.data(b).to_vec();
        for ni in 0..n {
            im2col(&xdat[ni * ci * h * wd..(ni + 1) * ci * h * wd], ci, h, wd, oh, ow, stride, &mut cols);
            let out = &mut data[ni * co * ohw..(ni + 1) * co * ohw];
            gemm(co, ci * 9, ohw, &wdat, &cols, out);
            for o in 0..co {
                let bias = bdat[o];
                for v in &mut out[o * ohw..(o + 1) * ohw] {
                    *v = *v + bias;
                }
            }
        }
        let rg = self.any_requires_grad(&[x, w, b]);
        Ok(self.push_result(
            vec![n, co, oh, ow],
            data,
            rg,
            Some(Op::Conv2d { x: x.0, w: w.0, b: b.0, stride }),
        ))
    }

    pub(crate) fn backward_conv2d(
        &mut self,
        x: u32,
        w: u32,
        b: u32,
        stride: usize,
        out: usize,
        g_out: &[F],
    ) -> Result<()> {
        let sx = self.entries[x as usize].shape.clone();
        let so = self.entries[out].shape.clone();
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, oh, ow) = (so[1], so[2], so[3]);
        let ohw = oh * ow;
        let k9 = ci * 9;
        let xdat = self.entries[x as usize].data.clone();
        let wdat = self.entries[w as usize].data.clone();
        let want_x = self.wants_grad(x);
        let want_w = self.wants_grad(w);
        let want_b = self.wants_grad(b);

        let mut dw = vec![F::zero(); co * k9];
        let mut db = vec![F::zero(); co];
        let mut dx = vec![F::zero(); n * ci * h * wd];
        let mut cols = vec![F::zero(); k9 * ohw];
        let mut dcols = vec![F::zero(); k9 * ohw];
        for ni in 0..n {
            let gy = &g_out[ni * co * ohw..(ni + 1) * co * ohw];
            if want_b {
                for o in 0..co {
                    for &g in &gy[o * ohw..(o + 1) * ohw] {
                        db[o] += g;
                    }
                }
            }
            if want_w {
                im2col(&xdat[ni * ci * h * wd..(ni + 1) * ci * h * wd], ci, h, wd, oh, ow, stride, &mut cols);
                gemm_abt(co, ohw, k9, gy, &cols, &mut dw);
            }
            if want_x {
                for v in dcols.iter_mut() {
                    *v = F::zero();
                }
                gemm_atb(k9, co, ohw, &wdat, gy, &mut dcols);
                col2im(
                    &dcols,
                    ci,
                    h,
                    wd,
                    oh,
                    ow,
                    stride,
                    &mut dx[ni * ci * h * wd..(ni + 1) * ci * h * wd],
                );
            }
        }
        if want_w {
            self.accum(w, &dw);
        }
        if want_b {
            self.accum(b, &db);
        }
        if want_x {
            self.accum(x, &dx);
        }
        Ok(())
    }
}
