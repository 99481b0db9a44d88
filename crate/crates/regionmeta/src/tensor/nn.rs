//! Neural-network operations composed from the tensor primitives.
//!
//! Everything here lowers to gather/scatter, matmul, and elementwise ops,
//! so each operation is differentiable to arbitrary order without a
//! hand-written backward rule.

use super::{row_major_strides, Tensor};
use crate::error::TensorError;
use std::sync::Arc;

fn expect_rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize), TensorError> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(TensorError::BadShape {
            op,
            expected: "a [B,C,H,W] tensor".into(),
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// 3x3 cross-correlation with padding 1 (same-size output) plus bias.
///
/// input [B,C,H,W], kernel [F,C,3,3], bias [F] -> [B,F,H,W].
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = expect_rank4("conv2d", input)?;
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != 3 || ks[3] != 3 {
        return Err(TensorError::BadShape {
            op: "conv2d",
            expected: "an [F,C,3,3] kernel".into(),
            got: ks.to_vec(),
        });
    }
    if ks[1] != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d channels",
            lhs: input.shape().to_vec(),
            rhs: ks.to_vec(),
        });
    }
    let f = ks[0];
    if bias.shape() != [f] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![f],
        });
    }

    // im2col: rows are (channel, ky, kx), columns are (batch, y, x).
    let cols = b * h * w;
    let mut map = Vec::with_capacity(c * 9 * cols);
    for ch in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                for bi in 0..b {
                    let base = bi * c * h * w + ch * h * w;
                    for y in 0..h {
                        let iy = y + ky;
                        for x in 0..w {
                            let ix = x + kx;
                            // padding 1: shift by -1 and drop out-of-range taps
                            if iy >= 1 && iy <= h && ix >= 1 && ix <= w {
                                map.push((base + (iy - 1) * w + (ix - 1)) as i64);
                            } else {
                                map.push(-1);
                            }
                        }
                    }
                }
            }
        }
    }
    let col = input.gather(&Arc::new(map), &[c * 9, cols])?;
    let wmat = kernel.reshape(&[f, c * 9])?;
    let mut out = wmat.matmul(&col)?;
    let ones_row = Tensor::ones(&[1, cols]);
    let bias_b = bias.reshape(&[f, 1])?.matmul(&ones_row)?;
    out = out.add(&bias_b)?;
    out.reshape(&[f, b, h, w])?.permute(&[1, 0, 2, 3])
}

/// 2x2 max pooling. Gradient routes to the window argmax; ties go to the
/// first element in row-major scan order.
pub fn maxpool2d(input: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = expect_rank4("maxpool2d", input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::BadShape {
            op: "maxpool2d",
            expected: "even spatial dimensions".into(),
            got: input.shape().to_vec(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut map = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ch in 0..c {
            let base = bi * c * h * w + ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    let mut best_v = src[best];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let ix = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[ix] > best_v {
                            best_v = src[ix];
                            best = ix;
                        }
                    }
                    map.push(best as i64);
                }
            }
        }
    }
    input.gather(&Arc::new(map), &[b, c, oh, ow])
}

/// Batch normalization over (B,H,W) per channel, using current-batch
/// statistics in every phase, followed by the affine map gamma*x + beta.
/// Fully differentiable including through the statistics.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = expect_rank4("batchnorm2d", input)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm2d affine",
            lhs: gamma.shape().to_vec(),
            rhs: vec![c],
        });
    }
    let m = b * h * w;
    if m < 2 {
        return Err(TensorError::DegenerateStatistics(m));
    }
    let xc = input.permute(&[1, 0, 2, 3])?.reshape(&[c, m])?;
    let ones_col = Tensor::ones(&[m, 1]);
    let ones_row = Tensor::ones(&[1, m]);
    let mean = xc.matmul(&ones_col)?.scale(1.0 / m as f64);
    let centered = xc.sub(&mean.matmul(&ones_row)?)?;
    let var = centered
        .mul(&centered)?
        .matmul(&ones_col)?
        .scale(1.0 / m as f64);
    let inv_std = var.add_scalar(eps).powf(-0.5);
    let xhat = centered.mul(&inv_std.matmul(&ones_row)?)?;
    let g = gamma.reshape(&[c, 1])?.matmul(&ones_row)?;
    let bta = beta.reshape(&[c, 1])?.matmul(&ones_row)?;
    let out = xhat.mul(&g)?.add(&bta)?;
    out.reshape(&[c, b, h, w])?.permute(&[1, 0, 2, 3])
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// subtracting the (detached) row maximum before exponentiation.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor, TensorError> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(TensorError::BadShape {
            op: "softmax_cross_entropy",
            expected: "a [B,n] logits tensor".into(),
            got: s.to_vec(),
        });
    }
    let (b, n) = (s[0], s[1]);
    if labels.len() != b {
        return Err(TensorError::BadShape {
            op: "softmax_cross_entropy labels",
            expected: format!("{b} labels"),
            got: vec![labels.len()],
        });
    }
    for &y in labels {
        if y >= n {
            return Err(TensorError::LabelOutOfRange {
                label: y,
                classes: n,
            });
        }
    }
    // Subtracting any per-row constant leaves the loss and its derivatives
    // unchanged; the detached row max keeps exp() in range.
    let data = logits.data();
    let mut maxes = Vec::with_capacity(b);
    for row in 0..b {
        let r = &data[row * n..(row + 1) * n];
        maxes.push(r.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    let max_col = Tensor::from_vec(&[b, 1], maxes)?;
    let ones_row = Tensor::ones(&[1, n]);
    let shifted = logits.sub(&max_col.matmul(&ones_row)?)?;
    let expd = shifted.exp();
    let ones_col = Tensor::ones(&[n, 1]);
    let lse = expd.matmul(&ones_col)?.ln();
    let pick: Vec<i64> = labels
        .iter()
        .enumerate()
        .map(|(row, &y)| (row * n + y) as i64)
        .collect();
    let picked = shifted.gather(&Arc::new(pick), &[b, 1])?;
    Ok(lse.sub(&picked)?.sum_all().scale(1.0 / b as f64))
}

/// Affine layer: x [B,in] * w[out,in]^T + bias[out] -> [B,out].
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let (b, out) = (xs[0], ws[0]);
    if bias.shape() != [out] {
        return Err(TensorError::ShapeMismatch {
            op: "linear bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![out],
        });
    }
    let y = x.matmul(&weight.transpose()?)?;
    let ones_col = Tensor::ones(&[b, 1]);
    let bias_b = ones_col.matmul(&bias.reshape(&[1, out])?)?;
    y.add(&bias_b)
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2(input: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = expect_rank4("upsample_nearest2", input)?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut map = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ch in 0..c {
            let base = bi * c * h * w + ch * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    map.push((base + (y / 2) * w + x / 2) as i64);
                }
            }
        }
    }
    input.gather(&Arc::new(map), &[b, c, oh, ow])
}

/// Concatenates two feature maps along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ba, ca, ha, wa) = expect_rank4("concat_channels", a)?;
    let (bb, cb, hb, wb) = expect_rank4("concat_channels", b)?;
    if ba != bb || ha != hb || wa != wb {
        return Err(TensorError::ShapeMismatch {
            op: "concat_channels",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let out_shape = [ba, ca + cb, ha, wa];
    let out_strides = row_major_strides(&out_shape);
    let numel: usize = out_shape.iter().product();
    let mut map_a = Vec::with_capacity(numel);
    let mut map_b = Vec::with_capacity(numel);
    for flat in 0..numel {
        let bi = flat / out_strides[0];
        let rem = flat % out_strides[0];
        let ch = rem / out_strides[1];
        let pix = rem % out_strides[1];
        if ch < ca {
            map_a.push((bi * ca * ha * wa + ch * ha * wa + pix) as i64);
            map_b.push(-1);
        } else {
            map_a.push(-1);
            map_b.push((bi * cb * ha * wa + (ch - ca) * ha * wa + pix) as i64);
        }
    }
    let ea = a.gather(&Arc::new(map_a), &out_shape)?;
    let eb = b.gather(&Arc::new(map_b), &out_shape)?;
    ea.add(&eb)
}

/// Pointwise (1x1) convolution: x [B,C,H,W], w [F,C], bias [F] -> [B,F,H,W].
pub fn conv2d_1x1(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (b, c, h, w) = expect_rank4("conv2d_1x1", input)?;
    let ws = weight.shape();
    if ws.len() != 2 || ws[1] != c {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_1x1",
            lhs: input.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let f = ws[0];
    if bias.shape() != [f] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_1x1 bias",
            lhs: bias.shape().to_vec(),
            rhs: vec![f],
        });
    }
    let m = b * h * w;
    let xc = input.permute(&[1, 0, 2, 3])?.reshape(&[c, m])?;
    let ones_row = Tensor::ones(&[1, m]);
    let out = weight
        .matmul(&xc)?
        .add(&bias.reshape(&[f, 1])?.matmul(&ones_row)?)?;
    out.reshape(&[f, b, h, w])?.permute(&[1, 0, 2, 3])
}
