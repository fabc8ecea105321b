//! 3D convolution kernels.
//!
//! The input is lowered one block of output rows at a time (im2col over
//! `(channel, dt, dh, dw)`) and multiplied against the weight matrix viewed
//! as `[F, C*kt*kh*kw]`. Backward recomputes the lowered block instead of
//! caching it, which keeps memory proportional to a single block.

use super::gemm::{gemm, MatMut, MatRef};
use crate::error::{Error, Result};

/// Target number of elements in one lowered block.
const BLOCK_ELEMS: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: usize,
    pub padding: usize,
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input_shape.len() != 5 || weight_shape.len() != 5 {
            return Err(Error::invalid(format!(
                "conv3d expects 5-d input and weight, got {input_shape:?} and {weight_shape:?}"
            )));
        }
        if input_shape[1] != weight_shape[1] {
            return Err(Error::invalid(format!(
                "conv3d channel mismatch: input has {} channels, weight expects {}",
                input_shape[1], weight_shape[1]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3d stride must be >= 1"));
        }
        let kernel = [weight_shape[2], weight_shape[3], weight_shape[4]];
        if kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::invalid(format!(
                "conv3d kernel {kernel:?} must be odd"
            )));
        }
        let input = [input_shape[2], input_shape[3], input_shape[4]];
        let mut output = [0; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * padding;
            if padded < kernel[d] {
                return Err(Error::invalid(format!(
                    "conv3d kernel {kernel:?} larger than padded input {input:?}"
                )));
            }
            output[d] = (padded - kernel[d]) / stride + 1;
        }
        Ok(Conv3dGeometry {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: weight_shape[0],
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [t, h, w] = self.output;
        [self.batch, self.out_channels, t, h, w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    /// Number of output rows (t, h pairs) lowered per block.
    fn rows_per_block(&self) -> usize {
        let per_row = self.patch_len() * self.output[2];
        (BLOCK_ELEMS / per_row.max(1)).max(1)
    }

    /// Source index along one axis, or `None` when it falls in the padding.
    #[inline]
    fn src(&self, out_idx: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out_idx * self.stride + k) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Range of output w-indices whose source lies inside the input, for a
    /// fixed kernel offset `k` along w.
    fn valid_w(&self, k: usize) -> (usize, usize) {
        let ow = self.output[2];
        let lo = (0..ow).find(|&o| self.src(o, k, self.input[2]).is_some());
        match lo {
            None => (0, 0),
            Some(lo) => {
                let hi = (lo..ow)
                    .take_while(|&o| self.src(o, k, self.input[2]).is_some())
                    .last()
                    .unwrap()
                    + 1;
                (lo, hi)
            }
        }
    }

    // Lower output rows [row0, row1) of one sample into `cols`, laid out as
    // [patch_len, (row1-row0)*ow].
    fn im2col(&self, x: &[f64], row0: usize, row1: usize, cols: &mut [f64]) {
        let [kt, kh, kw] = self.kernel;
        let [it, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let ncols = (row1 - row0) * ow;
        let vol = self.in_volume();
        for c in 0..self.in_channels {
            let xc = &x[c * vol..(c + 1) * vol];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let r = ((c * kt + dt) * kh + dh) * kw + dw;
                        let prow = &mut cols[r * ncols..(r + 1) * ncols];
                        let (wlo, whi) = self.valid_w(dw);
                        for (j, orow) in (row0..row1).enumerate() {
                            let dst = &mut prow[j * ow..(j + 1) * ow];
                            let (to, ho) = (orow / oh, orow % oh);
                            let (Some(ti), Some(hi)) = (self.src(to, dt, it), self.src(ho, dh, ih))
                            else {
                                dst.fill(0.0);
                                continue;
                            };
                            let src = &xc[(ti * ih + hi) * iw..(ti * ih + hi + 1) * iw];
                            dst[..wlo].fill(0.0);
                            dst[whi..].fill(0.0);
                            if whi == wlo {
                                continue;
                            }
                            if self.stride == 1 {
                                let off = wlo + dw - self.padding;
                                dst[wlo..whi].copy_from_slice(&src[off..off + (whi - wlo)]);
                            } else {
                                for (o, d) in dst.iter_mut().enumerate().take(whi).skip(wlo) {
                                    *d = src[o * self.stride + dw - self.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // Scatter-add a lowered block back into the sample's input gradient.
    fn col2im(&self, cols: &[f64], row0: usize, row1: usize, dx: &mut [f64]) {
        let [kt, kh, kw] = self.kernel;
        let [it, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        let ncols = (row1 - row0) * ow;
        let vol = self.in_volume();
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * vol..(c + 1) * vol];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let r = ((c * kt + dt) * kh + dh) * kw + dw;
                        let prow = &cols[r * ncols..(r + 1) * ncols];
                        let (wlo, whi) = self.valid_w(dw);
                        for (j, orow) in (row0..row1).enumerate() {
                            let (to, ho) = (orow / oh, orow % oh);
                            let (Some(ti), Some(hi)) = (self.src(to, dt, it), self.src(ho, dh, ih))
                            else {
                                continue;
                            };
                            let dst = &mut dxc[(ti * ih + hi) * iw..(ti * ih + hi + 1) * iw];
                            let src = &prow[j * ow..(j + 1) * ow];
                            for o in wlo..whi {
                                dst[o * self.stride + dw - self.padding] += src[o];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(
    geo: &Conv3dGeometry,
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let f = geo.out_channels;
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let ow = geo.output[2];
    let rows = geo.output[0] * geo.output[1];
    let step = geo.rows_per_block();
    let in_sample = geo.in_channels * geo.in_volume();
    let mut out = vec![0.0; geo.batch * f * plane];
    let mut cols = vec![0.0; patch * step * ow];
    let wmat = MatRef::row_major(weight, f, patch);
    for n in 0..geo.batch {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        let os = &mut out[n * f * plane..(n + 1) * f * plane];
        let mut row0 = 0;
        while row0 < rows {
            let row1 = (row0 + step).min(rows);
            let ncols = (row1 - row0) * ow;
            geo.im2col(xs, row0, row1, &mut cols[..patch * ncols]);
            let c = MatMut {
                data: &mut os[row0 * ow..],
                rows: f,
                cols: ncols,
                rs: plane,
                cs: 1,
            };
            gemm(
                1.0,
                MatRef {
                    data: wmat.data,
                    rows: f,
                    cols: patch,
                    rs: patch,
                    cs: 1,
                },
                MatRef::row_major(&cols[..patch * ncols], patch, ncols),
                0.0,
                c,
            );
            row0 = row1;
        }
        for (fi, b) in bias.iter().enumerate() {
            for v in &mut os[fi * plane..(fi + 1) * plane] {
                *v += b;
            }
        }
    }
    out
}

pub(crate) struct Conv3dGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv3d_backward(
    geo: &Conv3dGeometry,
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> Conv3dGrads {
    let f = geo.out_channels;
    let plane = geo.out_plane();
    let patch = geo.patch_len();
    let ow = geo.output[2];
    let rows = geo.output[0] * geo.output[1];
    let step = geo.rows_per_block();
    let in_sample = geo.in_channels * geo.in_volume();
    let [need_x, need_w, need_b] = need;

    let mut dx = need_x.then(|| vec![0.0; geo.batch * in_sample]);
    let mut dw = need_w.then(|| vec![0.0; f * patch]);
    let db = need_b.then(|| {
        let mut db = vec![0.0; f];
        for n in 0..geo.batch {
            for (fi, d) in db.iter_mut().enumerate() {
                let off = (n * f + fi) * plane;
                *d += grad_out[off..off + plane].iter().sum::<f64>();
            }
        }
        db
    });

    if need_x || need_w {
        let mut cols = vec![0.0; patch * step * ow];
        for n in 0..geo.batch {
            let xs = &x[n * in_sample..(n + 1) * in_sample];
            let gs = &grad_out[n * f * plane..(n + 1) * f * plane];
            let mut row0 = 0;
            while row0 < rows {
                let row1 = (row0 + step).min(rows);
                let ncols = (row1 - row0) * ow;
                let g = MatRef {
                    data: &gs[row0 * ow..],
                    rows: f,
                    cols: ncols,
                    rs: plane,
                    cs: 1,
                };
                if let Some(dw) = dw.as_mut() {
                    geo.im2col(xs, row0, row1, &mut cols[..patch * ncols]);
                    gemm(
                        1.0,
                        g,
                        MatRef::row_major(&cols[..patch * ncols], patch, ncols).t(),
                        1.0,
                        MatMut::row_major(dw, f, patch),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        1.0,
                        MatRef::row_major(weight, f, patch).t(),
                        g,
                        0.0,
                        MatMut::row_major(&mut cols[..patch * ncols], patch, ncols),
                    );
                    geo.col2im(
                        &cols[..patch * ncols],
                        row0,
                        row1,
                        &mut dx[n * in_sample..(n + 1) * in_sample],
                    );
                }
                row0 = row1;
            }
        }
    }
    Conv3dGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}
