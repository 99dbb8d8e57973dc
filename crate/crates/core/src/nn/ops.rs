//! Tensor helpers shared across modules: resizing, masked softmax, cosine
//! similarity, stable log-sum-exp.

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

pub fn softmax<D: candle_core::shape::Dim>(x: &Tensor, dim: D) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, dim)?)
}

/// Softmax over `dim` where positions with mask 0 get exactly zero weight.
/// `mask` broadcasts against `x` and holds {0,1} in the same dtype.
pub fn masked_softmax(x: &Tensor, mask: &Tensor, dim: usize) -> Result<Tensor> {
    let neg = Tensor::new(-1e9f64, x.device())?
        .to_dtype(x.dtype())?
        .broadcast_as(x.shape())?;
    let on = mask.broadcast_as(x.shape())?.to_dtype(x.dtype())?;
    let masked = ((x * &on)? + (neg * (1.0 - &on)?)?)?;
    let w = candle_nn::ops::softmax(&masked, dim)?;
    // Exact zeros at masked positions (softmax of -1e9 is only approximately 0).
    Ok((w * &on)?)
}

/// Stable log(sum(exp(x))) over one dimension, keepdim.
pub fn log_sum_exp_keepdim(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?;
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(dim)?;
    Ok((s.log()? + m)?)
}

/// Cosine similarity along the last dim of two equal-shape tensors, with
/// zero-norm vectors treated as similarity 0 via an epsilon floor.
pub fn cosine_sim(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let dim = a.dims().len() - 1;
    let dot = (a * b)?.sum(dim)?;
    let na = a.sqr()?.sum(dim)?.sqrt()?.maximum(eps)?;
    let nb = b.sqr()?.sum(dim)?.sqrt()?.maximum(eps)?;
    Ok(dot.div(&(na * nb)?)?)
}

fn interp_matrix(out_len: usize, in_len: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = (src - i0 as f64).clamp(0.0, 1.0) as f32;
        data[o * in_len + i0] += 1.0 - w1;
        data[o * in_len + i1] += w1;
    }
    Ok(Tensor::from_vec(data, (out_len, in_len), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize of (B, C, H, W) to (B, C, out_h, out_w), half-pixel-center
/// convention. Implemented as two interpolation matmuls so it is exact,
/// deterministic, and differentiable.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let rv = interp_matrix(out_h, h, x.dtype(), x.device())?;
    let rh = interp_matrix(out_w, w, x.dtype(), x.device())?.t()?.contiguous()?;
    let flat = x.reshape((b * c, h, w))?;
    let tmp = rv.broadcast_matmul(&flat.contiguous()?)?;
    let out = tmp.broadcast_matmul(&rh)?;
    Ok(out.reshape((b, c, out_h, out_w))?)
}

/// Resample (B, C, H, H) to a square target resolution: average pooling when
/// shrinking (factor must divide), nearest-neighbor upsampling when growing.
pub fn resample_square(x: &Tensor, target: usize) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    if h != w {
        return Err(Error::Config(format!("resample_square needs square input, got {h}x{w}")));
    }
    if target == h {
        Ok(x.clone())
    } else if target < h {
        if h % target != 0 {
            return Err(Error::Config(format!(
                "cannot average-pool {h} down to {target}: not an integer factor"
            )));
        }
        Ok(x.avg_pool2d(h / target)?)
    } else {
        if target % h != 0 {
            return Err(Error::Config(format!(
                "cannot upsample {h} to {target}: not an integer factor"
            )));
        }
        Ok(x.upsample_nearest2d(target, target)?)
    }
}

/// Crop a (B, C, H, W) batch to a normalized box and bilinear-resize the crop
/// to (out, out). The pixel window is the smallest integer rectangle covering
/// the box; degenerate boxes are an error.
pub fn crop_resize(x: &Tensor, boxn: [f32; 4], out: usize) -> Result<Tensor> {
    let (_b, _c, h, w) = x.dims4()?;
    let [x0, y0, x1, y1] = boxn;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::Data(format!("degenerate box {boxn:?}")));
    }
    let px0 = ((x0 * w as f32).floor().max(0.0) as usize).min(w - 1);
    let py0 = ((y0 * h as f32).floor().max(0.0) as usize).min(h - 1);
    let px1 = ((x1 * w as f32).ceil() as usize).clamp(px0 + 1, w);
    let py1 = ((y1 * h as f32).ceil() as usize).clamp(py0 + 1, h);
    let crop = x.narrow(2, py0, py1 - py0)?.narrow(3, px0, px1 - px0)?;
    bilinear_resize(&crop.contiguous()?, out, out)
}

/// Union of two normalized boxes.
pub fn box_union(a: [f32; 4], b: [f32; 4]) -> [f32; 4] {
    [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
}
