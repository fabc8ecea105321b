//! Max pooling over (t, h, w) with ceil-divided output extents.

use crate::error::{Error, Result};

/// Returns the pooled values, the flat input index of each window's maximum
/// (first occurrence on ties) and the output shape.
pub(crate) fn maxpool3d_forward(
    shape: &[usize],
    x: &[f64],
    window: [usize; 3],
) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    if shape.len() != 5 {
        return Err(Error::invalid(format!(
            "maxpool3d expects 5-d input, got {shape:?}"
        )));
    }
    if window.contains(&0) {
        return Err(Error::invalid(format!(
            "maxpool3d window {window:?} must be >= 1"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let dims = [shape[2], shape[3], shape[4]];
    let out: [usize; 3] = std::array::from_fn(|d| dims[d].div_ceil(window[d]));
    let in_vol = dims[0] * dims[1] * dims[2];
    let out_vol = out[0] * out[1] * out[2];
    let mut values = Vec::with_capacity(n * c * out_vol);
    let mut argmax = Vec::with_capacity(n * c * out_vol);
    for plane in 0..n * c {
        let base = plane * in_vol;
        for ot in 0..out[0] {
            let t_range = ot * window[0]..((ot + 1) * window[0]).min(dims[0]);
            for oh in 0..out[1] {
                let h_range = oh * window[1]..((oh + 1) * window[1]).min(dims[1]);
                for ow in 0..out[2] {
                    let w_range = ow * window[2]..((ow + 1) * window[2]).min(dims[2]);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = usize::MAX;
                    for t in t_range.clone() {
                        for h in h_range.clone() {
                            let row = base + (t * dims[1] + h) * dims[2];
                            for w in w_range.clone() {
                                let v = x[row + w];
                                if best_idx == usize::MAX || v > best {
                                    best = v;
                                    best_idx = row + w;
                                }
                            }
                        }
                    }
                    values.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((values, argmax, vec![n, c, out[0], out[1], out[2]]))
}

pub(crate) fn maxpool3d_backward(input_len: usize, argmax: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    dx
}
