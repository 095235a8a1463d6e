//! 3D convolution kernels.
//!
//! All three linear maps (forward, input-adjoint, weight-gradient) go
//! through a chunked im2col buffer and a dense GEMM. Chunks are processed
//! in parallel; partial weight gradients are reduced in chunk order so the
//! result does not depend on the thread count.

use rayon::prelude::*;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Upper bound on the number of `f64`s in one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 16;

/// Geometry shared by a convolution and its transpose.
///
/// `input` is the spatial size seen by the forward (correlating) map and
/// `output` the size it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

const AXES: [&str; 3] = ["slices", "height", "width"];

pub(crate) fn conv_output_dims(
    op: &'static str,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return Err(Error::shape(op, AXES[a], "stride must be positive"));
        }
        let padded = input[a] + 2 * padding[a];
        if padded < kernel[a] {
            return Err(Error::shape(
                op,
                AXES[a],
                format!(
                    "kernel {} exceeds padded input {} (size {}, pad {})",
                    kernel[a], padded, input[a], padding[a]
                ),
            ));
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(out)
}

impl ConvGeometry {
    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kvol()
    }

    fn in_sp(&self) -> usize {
        self.input.iter().product()
    }

    fn out_sp(&self) -> usize {
        self.output.iter().product()
    }

    /// Number of output lines (fixed slice and row) per chunk.
    fn chunk_lines(&self) -> usize {
        let ow = self.output[2];
        (CHUNK_ELEMS / (self.rows() * ow).max(1)).clamp(1, self.output[0] * self.output[1])
    }

    /// Work items as (batch item, first line, end line).
    fn chunks(&self) -> Vec<(usize, usize, usize)> {
        let per = self.chunk_lines();
        let lines = self.output[0] * self.output[1];
        let mut out = Vec::new();
        for b in 0..self.batch {
            let mut l0 = 0;
            while l0 < lines {
                let l1 = (l0 + per).min(lines);
                out.push((b, l0, l1));
                l0 = l1;
            }
        }
        out
    }

    /// Output-width range `lo..hi` whose input column `w·stride - pad + tap`
    /// lies inside the input.
    fn valid_cols(&self, tap: usize) -> (usize, usize) {
        let (st, pad, iw, ow) = (self.stride[2], self.padding[2], self.input[2], self.output[2]);
        let lo = if pad > tap { (pad - tap).div_ceil(st) } else { 0 };
        // Largest w with w·st + tap - pad <= iw - 1.
        let hi = if iw + pad > tap { ((iw + pad - tap - 1) / st + 1).min(ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Input (slice, row) feeding output line `line` at taps (a, b), if inside.
    fn source_line(&self, line: usize, a: usize, b: usize) -> Option<usize> {
        let oh = self.output[1];
        let s = (line / oh) * self.stride[0] + a;
        let h = (line % oh) * self.stride[1] + b;
        let (s, h) = (s.checked_sub(self.padding[0])?, h.checked_sub(self.padding[1])?);
        (s < self.input[0] && h < self.input[1]).then_some(s * self.input[1] + h)
    }

    /// Fills `cols` (rows × positions, row-major) from one batch item of `x`.
    fn im2col(&self, x: &[f64], l0: usize, l1: usize, cols: &mut [f64]) {
        let [_, _, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let (ow, st, pad) = (self.output[2], self.stride[2], self.padding[2]);
        let len = (l1 - l0) * ow;
        let in_sp = self.in_sp();
        let mut row = 0;
        for ci in 0..self.in_channels {
            let xc = &x[ci * in_sp..(ci + 1) * in_sp];
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let (lo, hi) = self.valid_cols(c);
                        let dst_row = &mut cols[row * len..(row + 1) * len];
                        for (li, line) in (l0..l1).enumerate() {
                            let dst = &mut dst_row[li * ow..(li + 1) * ow];
                            let Some(src_line) = self.source_line(line, a, b) else {
                                dst.fill(0.0);
                                continue;
                            };
                            let src = &xc[src_line * iw..(src_line + 1) * iw];
                            dst[..lo].fill(0.0);
                            dst[hi..].fill(0.0);
                            if hi > lo {
                                let first = lo * st + c - pad;
                                if st == 1 {
                                    dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                        *d = src[first + j * st];
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back onto one batch item of `dx`.
    fn col2im(&self, cols: &[f64], l0: usize, l1: usize, dx: &mut [f64]) {
        let [_, _, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let (ow, st, pad) = (self.output[2], self.stride[2], self.padding[2]);
        let len = (l1 - l0) * ow;
        let in_sp = self.in_sp();
        let mut row = 0;
        for ci in 0..self.in_channels {
            let dxc = &mut dx[ci * in_sp..(ci + 1) * in_sp];
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let (lo, hi) = self.valid_cols(c);
                        let src_row = &cols[row * len..(row + 1) * len];
                        for (li, line) in (l0..l1).enumerate() {
                            let Some(dst_line) = self.source_line(line, a, b) else {
                                continue;
                            };
                            if hi <= lo {
                                continue;
                            }
                            let src = &src_row[li * ow + lo..li * ow + hi];
                            let dst = &mut dxc[dst_line * iw..(dst_line + 1) * iw];
                            let first = lo * st + c - pad;
                            if st == 1 {
                                for (d, v) in dst[first..first + hi - lo].iter_mut().zip(src) {
                                    *d += v;
                                }
                            } else {
                                for (j, v) in src.iter().enumerate() {
                                    dst[first + j * st] += v;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn groups(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let width = rayon::current_num_threads().max(1);
        self.chunks().chunks(width).map(<[_]>::to_vec).collect()
    }

    /// y = W ⋆ x (cross-correlation), no bias.
    pub fn forward(&self, x: &[f64], w: &[f64]) -> Vec<f64> {
        let (rows, out_sp, in_sp) = (self.rows(), self.out_sp(), self.in_sp());
        let kout = self.out_channels;
        let ow = self.output[2];
        let mut y = vec![0.0; self.batch * kout * out_sp];
        for group in self.groups() {
            let parts: Vec<Vec<f64>> = group
                .par_iter()
                .map_init(Vec::new, |cols, &(b, l0, l1)| {
                    let len = (l1 - l0) * ow;
                    cols.resize(rows * len, 0.0);
                    let xb = &x[b * self.in_channels * in_sp..(b + 1) * self.in_channels * in_sp];
                    self.im2col(xb, l0, l1, &mut cols[..rows * len]);
                    let cols = &cols[..rows * len];
                    let mut out = vec![0.0; kout * len];
                    gemm(kout, rows, len, w, (rows, 1), cols, (len, 1), &mut out, (len, 1), 0.0);
                    out
                })
                .collect();
            for (&(b, l0, l1), part) in group.iter().zip(parts) {
                let (p0, len) = (l0 * ow, (l1 - l0) * ow);
                for co in 0..kout {
                    let dst = (b * kout + co) * out_sp + p0;
                    y[dst..dst + len].copy_from_slice(&part[co * len..(co + 1) * len]);
                }
            }
        }
        y
    }

    /// dx = Wᵀ applied to dy; the exact adjoint of [`forward`](Self::forward).
    pub fn backward_input(&self, dy: &[f64], w: &[f64]) -> Vec<f64> {
        let (rows, out_sp, in_sp) = (self.rows(), self.out_sp(), self.in_sp());
        let kout = self.out_channels;
        let ow = self.output[2];
        let mut dx = vec![0.0; self.batch * self.in_channels * in_sp];
        for group in self.groups() {
            let parts: Vec<Vec<f64>> = group
                .par_iter()
                .map(|&(b, l0, l1)| {
                    let (p0, len) = (l0 * ow, (l1 - l0) * ow);
                    let mut dyc = vec![0.0; kout * len];
                    for co in 0..kout {
                        let src = (b * kout + co) * out_sp + p0;
                        dyc[co * len..(co + 1) * len].copy_from_slice(&dy[src..src + len]);
                    }
                    let mut cols = vec![0.0; rows * len];
                    // Wᵀ is rows × kout with strides (1, rows).
                    gemm(rows, kout, len, w, (1, rows), &dyc, (len, 1), &mut cols, (len, 1), 0.0);
                    cols
                })
                .collect();
            for (&(b, l0, l1), cols) in group.iter().zip(parts) {
                let dxb = &mut dx[b * self.in_channels * in_sp..(b + 1) * self.in_channels * in_sp];
                self.col2im(&cols, l0, l1, dxb);
            }
        }
        dx
    }

    /// dW = Σ dy · im2col(x)ᵀ.
    pub fn backward_weight(&self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let (rows, out_sp, in_sp) = (self.rows(), self.out_sp(), self.in_sp());
        let kout = self.out_channels;
        let ow = self.output[2];
        let mut dw = vec![0.0; kout * rows];
        for group in self.groups() {
            let parts: Vec<Vec<f64>> = group
                .par_iter()
                .map_init(Vec::new, |cols, &(b, l0, l1)| {
                    let (p0, len) = (l0 * ow, (l1 - l0) * ow);
                    cols.resize(rows * len, 0.0);
                    let xb = &x[b * self.in_channels * in_sp..(b + 1) * self.in_channels * in_sp];
                    self.im2col(xb, l0, l1, &mut cols[..rows * len]);
                    let cols = &cols[..rows * len];
                    let mut dyc = vec![0.0; kout * len];
                    for co in 0..kout {
                        let src = (b * kout + co) * out_sp + p0;
                        dyc[co * len..(co + 1) * len].copy_from_slice(&dy[src..src + len]);
                    }
                    let mut part = vec![0.0; kout * rows];
                    // colsᵀ is len × rows with strides (1, len).
                    gemm(kout, len, rows, &dyc, (len, 1), cols, (1, len), &mut part, (rows, 1), 0.0);
                    part
                })
                .collect();
            for part in parts {
                dw.iter_mut().zip(&part).for_each(|(a, p)| *a += p);
            }
        }
        dw
    }
}

/// C (m×n) = A (m×k) · B (k×n) + beta·C, strides given as (row, col).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds: the largest index touched must lie inside each slice.
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every access in bounds and `c` does
    // not alias `a` or `b`.
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
            rsc as isize,
            csc as isize,
        );
    }
}

fn bias_forward(y: &mut [f64], bias: &[f64], batch: usize, channels: usize, sp: usize) {
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate().take(channels) {
            let off = (b * channels + c) * sp;
            y[off..off + sp].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_backward(dy: &[f64], batch: usize, channels: usize, sp: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for b in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let off = (b * channels + c) * sp;
            *d += dy[off..off + sp].iter().sum::<f64>();
        }
    }
    db
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

fn check_rank5(op: &'static str, what: &str, t: &Tensor) -> Result<()> {
    if t.rank() != 5 {
        return Err(Error::shape(
            op,
            what,
            format!("expected rank 5 (batch, channels, S, H, W), got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                "bias",
                format!("expected [{channels}], got {:?}", b.shape()),
            ));
        }
    }
    Ok(())
}

/// 3D cross-correlation.
///
/// `input` is `[B, Kin, S, H, W]`, `weight` is `[Kout, Kin, kd, kh, kw]`.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor> {
    const OP: &str = "conv3d";
    check_rank5(OP, "input", input)?;
    check_rank5(OP, "weight", weight)?;
    let (is, ws) = (input.shape(), weight.shape());
    if ws[1] != is[1] {
        return Err(Error::shape(
            OP,
            "input channels",
            format!("input has {} channels, weight expects {}", is[1], ws[1]),
        ));
    }
    check_bias(OP, bias, ws[0])?;
    let kernel = spatial(ws);
    let output = conv_output_dims(OP, spatial(is), kernel, stride, padding)?;
    let geom = ConvGeometry {
        batch: is[0],
        in_channels: is[1],
        out_channels: ws[0],
        input: spatial(is),
        output,
        kernel,
        stride,
        padding,
    };
    let out_sp: usize = output.iter().product();
    let mut y = geom.forward(&input.data(), &weight.data());
    if let Some(b) = bias {
        bias_forward(&mut y, &b.data(), geom.batch, geom.out_channels, out_sp);
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    let shape = vec![geom.batch, geom.out_channels, output[0], output[1], output[2]];
    Ok(Tensor::from_op(
        OP,
        shape,
        y,
        inputs,
        Box::new(move |ctx| {
            let dy = ctx.upstream;
            let dx = ctx.needs[0].then(|| geom.backward_input(dy, &ctx.inputs[1].data()));
            let dw = ctx.needs[1].then(|| geom.backward_weight(&ctx.inputs[0].data(), dy));
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| bias_backward(dy, geom.batch, geom.out_channels, out_sp)));
            }
            grads
        }),
    ))
}

/// Transposed 3D convolution, the adjoint of [`conv3d`] with the same
/// stride and padding.
///
/// `weight` is `[Kin, Kout, kd, kh, kw]` where `Kin` matches `input`'s
/// channels. Output spatial size is `(n - 1)·stride - 2·pad + k`.
pub fn conv_transpose3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor> {
    const OP: &str = "conv_transpose3d";
    check_rank5(OP, "input", input)?;
    check_rank5(OP, "weight", weight)?;
    let (is, ws) = (input.shape(), weight.shape());
    if ws[0] != is[1] {
        return Err(Error::shape(
            OP,
            "input channels",
            format!("input has {} channels, weight expects {}", is[1], ws[0]),
        ));
    }
    check_bias(OP, bias, ws[1])?;
    let kernel = spatial(ws);
    let small = spatial(is);
    let mut large = [0; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return Err(Error::shape(OP, AXES[a], "stride must be positive"));
        }
        let full = (small[a] - 1) * stride[a] + kernel[a];
        if full <= 2 * padding[a] {
            return Err(Error::shape(
                OP,
                AXES[a],
                format!("padding {} leaves no output (size {})", padding[a], full),
            ));
        }
        large[a] = full - 2 * padding[a];
    }
    // The correlating map this op is the adjoint of: large → small,
    // channels ws[1] → ws[0].
    let geom = ConvGeometry {
        batch: is[0],
        in_channels: ws[1],
        out_channels: ws[0],
        input: large,
        output: small,
        kernel,
        stride,
        padding,
    };
    debug_assert_eq!(conv_output_dims(OP, large, kernel, stride, padding).ok(), Some(small));
    let large_sp: usize = large.iter().product();
    let mut y = geom.backward_input(&input.data(), &weight.data());
    if let Some(b) = bias {
        bias_forward(&mut y, &b.data(), geom.batch, geom.in_channels, large_sp);
    }
    let mut inputs = vec![input.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    let shape = vec![geom.batch, geom.in_channels, large[0], large[1], large[2]];
    Ok(Tensor::from_op(
        OP,
        shape,
        y,
        inputs,
        Box::new(move |ctx| {
            let dy = ctx.upstream;
            let dx = ctx.needs[0].then(|| geom.forward(dy, &ctx.inputs[1].data()));
            let dw = ctx.needs[1].then(|| geom.backward_weight(dy, &ctx.inputs[0].data()));
            let mut grads = vec![dx, dw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| bias_backward(dy, geom.batch, geom.in_channels, large_sp)));
            }
            grads
        }),
    ))
}
