//! Layer building blocks: linear, conv, batch norm, embedding.

use candle_core::{Tensor, Var};

use super::{Init, ParamRegistry};
use crate::Result;

pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = reg.param(
            &format!("{name}.weight"),
            (out_dim, in_dim),
            Init::FanInUniform { fan_in: in_dim },
        )?;
        let b = reg.param(&format!("{name}.bias"), out_dim, Init::Zeros)?;
        Ok(Linear { w, b: Some(b) })
    }

    /// Kaiming-scaled weights for layers inside ReLU chains, where the
    /// default fan-in-uniform init shrinks activations layer over layer.
    pub fn new_relu(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = reg.param(
            &format!("{name}.weight"),
            (out_dim, in_dim),
            Init::KaimingNormal { fan_in: in_dim },
        )?;
        let b = reg.param(&format!("{name}.bias"), out_dim, Init::Zeros)?;
        Ok(Linear { w, b: Some(b) })
    }

    pub fn new_no_bias(
        reg: &mut ParamRegistry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w = reg.param(
            &format!("{name}.weight"),
            (out_dim, in_dim),
            Init::FanInUniform { fan_in: in_dim },
        )?;
        Ok(Linear { w, b: None })
    }

    /// x: (..., in_dim) -> (..., out_dim)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.w.as_tensor().t()?;
        let y = if x.dims().len() == 2 {
            x.matmul(&wt)?
        } else {
            x.broadcast_matmul(&wt)?
        };
        match &self.b {
            Some(b) => Ok(y.broadcast_add(b.as_tensor())?),
            None => Ok(y),
        }
    }
}

pub struct Conv2d {
    pub w: Var,
    pub b: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        reg: &mut ParamRegistry,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = reg.param(
            &format!("{name}.weight"),
            (out_ch, in_ch, kernel, kernel),
            Init::KaimingNormal { fan_in },
        )?;
        let b = reg.param(&format!("{name}.bias"), out_ch, Init::Zeros)?;
        Ok(Conv2d {
            w,
            b: Some(b),
            stride,
            padding,
        })
    }

    /// x: (B, C_in, H, W) -> (B, C_out, H', W')
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.w.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.b {
            Some(b) => {
                let b = b.as_tensor().reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization over (B, H, W) per channel, with running statistics
/// kept as buffers. Training mode normalizes by batch statistics and updates
/// the running values; eval mode uses the stored ones.
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: reg.param(&format!("{name}.gamma"), channels, Init::Ones)?,
            beta: reg.param(&format!("{name}.beta"), channels, Init::Zeros)?,
            running_mean: reg.buffer(&format!("{name}.running_mean"), channels, Init::Zeros)?,
            running_var: reg.buffer(&format!("{name}.running_var"), channels, Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_b, c, _h, _w) = x.dims4()?;
        let reshape = |t: &Tensor| t.reshape((1, c, 1, 1));
        let (mean, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            // Running stats use detached values.
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                + (mean.detach().reshape(c)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().reshape(c)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                reshape(self.running_mean.as_tensor())?,
                reshape(self.running_var.as_tensor())?,
            )
        };
        let x_hat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let y = x_hat
            .broadcast_mul(&reshape(self.gamma.as_tensor())?)?
            .broadcast_add(&reshape(self.beta.as_tensor())?)?;
        Ok(y)
    }
}

pub struct Embedding {
    pub w: Var,
}

impl Embedding {
    pub fn new(reg: &mut ParamRegistry, name: &str, n: usize, dim: usize) -> Result<Self> {
        // Rows start near unit norm so downstream dot products carry signal.
        let std = 1.0 / (dim as f64).sqrt();
        let w = reg.param(&format!("{name}.weight"), (n, dim), Init::Normal(std))?;
        Ok(Embedding { w })
    }

    /// ids: (T,) u32 -> (T, dim)
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.w.as_tensor().index_select(ids, 0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, IndexOp};

    #[test]
    fn linear_matches_manual_matmul() {
        let dev = Device::Cpu;
        let mut reg = ParamRegistry::new(3, &dev);
        let lin = Linear::new(&mut reg, "l", 4, 2).unwrap();
        let x = Tensor::randn(0f32, 1f32, (5, 4), &dev).unwrap();
        let y = lin.forward(&x).unwrap();
        let expect = x
            .matmul(&lin.w.as_tensor().t().unwrap())
            .unwrap()
            .broadcast_add(lin.b.as_ref().unwrap().as_tensor())
            .unwrap();
        let d = (y - expect).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn batchnorm_train_normalizes_batch() {
        let dev = Device::Cpu;
        let mut reg = ParamRegistry::new(3, &dev);
        let bn = BatchNorm2d::new(&mut reg, "bn", 3).unwrap();
        let x = ((Tensor::randn(0f32, 1f32, (4, 3, 5, 5), &dev).unwrap() * 3.0).unwrap() + 7.0)
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap();
        let var = y
            .broadcast_sub(&y.mean_keepdim((0, 2, 3)).unwrap())
            .unwrap()
            .sqr()
            .unwrap()
            .mean_keepdim((0, 2, 3))
            .unwrap()
            .flatten_all()
            .unwrap();
        for m in mean.to_vec1::<f32>().unwrap() {
            assert!(m.abs() < 1e-4, "mean {m}");
        }
        for v in var.to_vec1::<f32>().unwrap() {
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
        // Running stats moved toward batch statistics.
        let rm = bn.running_mean.as_tensor().to_vec1::<f32>().unwrap();
        assert!(rm.iter().all(|m| *m > 0.2), "running mean {rm:?}");
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let dev = Device::Cpu;
        let mut reg = ParamRegistry::new(3, &dev);
        let bn = BatchNorm2d::new(&mut reg, "bn", 2).unwrap();
        let x = Tensor::randn(0f32, 1f32, (2, 2, 4, 4), &dev).unwrap();
        // Fresh running stats are (0, 1): eval output equals input.
        let y = bn.forward(&x, false).unwrap();
        let d = (&y - &x).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f32>().unwrap() < 1e-4);
    }

    #[test]
    fn embedding_selects_rows() {
        let dev = Device::Cpu;
        let mut reg = ParamRegistry::new(0, &dev);
        let emb = Embedding::new(&mut reg, "e", 6, 3).unwrap();
        let ids = Tensor::new(&[2u32, 2, 5], &dev).unwrap();
        let out = emb.forward(&ids).unwrap();
        assert_eq!(out.dims(), &[3, 3]);
        let r2 = emb.w.as_tensor().i(2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out.i(0).unwrap().to_vec1::<f32>().unwrap(), r2);
        assert_eq!(out.i(1).unwrap().to_vec1::<f32>().unwrap(), r2);
        let _ = DType::F32;
    }
}
