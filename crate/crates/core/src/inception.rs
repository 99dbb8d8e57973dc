//! Inception-v3 feature graph (eval only), used as the region-encoder
//! backbone when real weights are supplied. Emits the 768x17x17 mixed-6e
//! activations and the 2048-d pooled vector.
//!
//! Layer names follow the torchvision convention (`Conv2d_1a_3x3`,
//! `Mixed_5b.branch1x1`, ...) so exported weights map one-to-one.

use candle_core::Tensor;

use crate::nn::layers::{BatchNorm2d, Conv2d};
use crate::nn::ParamRegistry;
use crate::Result;

struct BasicConv2d {
    conv: Conv2d,
    bn: BatchNorm2d,
    pad_h: usize,
    pad_w: usize,
}

impl BasicConv2d {
    #[allow(clippy::too_many_arguments)]
    fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Self> {
        // Rectangular kernels appear in the 7x1/1x7 branches.
        let fan_in = cin * kh * kw;
        let w = reg.param(
            &format!("{name}.conv.weight"),
            (cout, cin, kh, kw),
            crate::nn::Init::KaimingNormal { fan_in },
        )?;
        let conv = Conv2d {
            w,
            b: None,
            stride,
            padding: 0,
        };
        let mut bn = BatchNorm2d::new(reg, &format!("{name}.bn"), cout)?;
        bn.eps = 1e-3;
        Ok(BasicConv2d {
            conv,
            bn,
            pad_h,
            pad_w,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = if self.pad_h > 0 || self.pad_w > 0 {
            x.pad_with_zeros(2, self.pad_h, self.pad_h)?
                .pad_with_zeros(3, self.pad_w, self.pad_w)?
        } else {
            x.clone()
        };
        let y = self.conv.forward(&x)?;
        Ok(self.bn.forward(&y, false)?.relu()?)
    }
}

fn avg_pool_3x3_pad1(x: &Tensor) -> Result<Tensor> {
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    Ok(padded.avg_pool2d_with_stride(3, 1)?)
}

fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d_with_stride(3, 2)?)
}

struct InceptionA {
    b1: BasicConv2d,
    b5_1: BasicConv2d,
    b5_2: BasicConv2d,
    b3_1: BasicConv2d,
    b3_2: BasicConv2d,
    b3_3: BasicConv2d,
    pool: BasicConv2d,
}

impl InceptionA {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize, pool_features: usize) -> Result<Self> {
        Ok(InceptionA {
            b1: BasicConv2d::new(reg, &format!("{name}.branch1x1"), cin, 64, 1, 1, 1, 0, 0)?,
            b5_1: BasicConv2d::new(reg, &format!("{name}.branch5x5_1"), cin, 48, 1, 1, 1, 0, 0)?,
            b5_2: BasicConv2d::new(reg, &format!("{name}.branch5x5_2"), 48, 64, 5, 5, 1, 2, 2)?,
            b3_1: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_1"), cin, 64, 1, 1, 1, 0, 0)?,
            b3_2: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_2"), 64, 96, 3, 3, 1, 1, 1)?,
            b3_3: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_3"), 96, 96, 3, 3, 1, 1, 1)?,
            pool: BasicConv2d::new(
                reg,
                &format!("{name}.branch_pool"),
                cin,
                pool_features,
                1,
                1,
                1,
                0,
                0,
            )?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let b = self.b5_2.forward(&self.b5_1.forward(x)?)?;
        let c = self
            .b3_3
            .forward(&self.b3_2.forward(&self.b3_1.forward(x)?)?)?;
        let d = self.pool.forward(&avg_pool_3x3_pad1(x)?)?;
        Ok(Tensor::cat(&[&a, &b, &c, &d], 1)?)
    }
}

struct InceptionB {
    b3: BasicConv2d,
    bd_1: BasicConv2d,
    bd_2: BasicConv2d,
    bd_3: BasicConv2d,
}

impl InceptionB {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize) -> Result<Self> {
        Ok(InceptionB {
            b3: BasicConv2d::new(reg, &format!("{name}.branch3x3"), cin, 384, 3, 3, 2, 0, 0)?,
            bd_1: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_1"), cin, 64, 1, 1, 1, 0, 0)?,
            bd_2: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_2"), 64, 96, 3, 3, 1, 1, 1)?,
            bd_3: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_3"), 96, 96, 3, 3, 2, 0, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b3.forward(x)?;
        let b = self
            .bd_3
            .forward(&self.bd_2.forward(&self.bd_1.forward(x)?)?)?;
        let c = max_pool_3x3_s2(x)?;
        Ok(Tensor::cat(&[&a, &b, &c], 1)?)
    }
}

struct InceptionC {
    b1: BasicConv2d,
    b7_1: BasicConv2d,
    b7_2: BasicConv2d,
    b7_3: BasicConv2d,
    bd_1: BasicConv2d,
    bd_2: BasicConv2d,
    bd_3: BasicConv2d,
    bd_4: BasicConv2d,
    bd_5: BasicConv2d,
    pool: BasicConv2d,
}

impl InceptionC {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize, c7: usize) -> Result<Self> {
        Ok(InceptionC {
            b1: BasicConv2d::new(reg, &format!("{name}.branch1x1"), cin, 192, 1, 1, 1, 0, 0)?,
            b7_1: BasicConv2d::new(reg, &format!("{name}.branch7x7_1"), cin, c7, 1, 1, 1, 0, 0)?,
            b7_2: BasicConv2d::new(reg, &format!("{name}.branch7x7_2"), c7, c7, 1, 7, 1, 0, 3)?,
            b7_3: BasicConv2d::new(reg, &format!("{name}.branch7x7_3"), c7, 192, 7, 1, 1, 3, 0)?,
            bd_1: BasicConv2d::new(reg, &format!("{name}.branch7x7dbl_1"), cin, c7, 1, 1, 1, 0, 0)?,
            bd_2: BasicConv2d::new(reg, &format!("{name}.branch7x7dbl_2"), c7, c7, 7, 1, 1, 3, 0)?,
            bd_3: BasicConv2d::new(reg, &format!("{name}.branch7x7dbl_3"), c7, c7, 1, 7, 1, 0, 3)?,
            bd_4: BasicConv2d::new(reg, &format!("{name}.branch7x7dbl_4"), c7, c7, 7, 1, 1, 3, 0)?,
            bd_5: BasicConv2d::new(reg, &format!("{name}.branch7x7dbl_5"), c7, 192, 1, 7, 1, 0, 3)?,
            pool: BasicConv2d::new(reg, &format!("{name}.branch_pool"), cin, 192, 1, 1, 1, 0, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let b = self
            .b7_3
            .forward(&self.b7_2.forward(&self.b7_1.forward(x)?)?)?;
        let c = self.bd_5.forward(&self.bd_4.forward(
            &self.bd_3.forward(&self.bd_2.forward(&self.bd_1.forward(x)?)?)?,
        )?)?;
        let d = self.pool.forward(&avg_pool_3x3_pad1(x)?)?;
        Ok(Tensor::cat(&[&a, &b, &c, &d], 1)?)
    }
}

struct InceptionD {
    b3_1: BasicConv2d,
    b3_2: BasicConv2d,
    b7_1: BasicConv2d,
    b7_2: BasicConv2d,
    b7_3: BasicConv2d,
    b7_4: BasicConv2d,
}

impl InceptionD {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize) -> Result<Self> {
        Ok(InceptionD {
            b3_1: BasicConv2d::new(reg, &format!("{name}.branch3x3_1"), cin, 192, 1, 1, 1, 0, 0)?,
            b3_2: BasicConv2d::new(reg, &format!("{name}.branch3x3_2"), 192, 320, 3, 3, 2, 0, 0)?,
            b7_1: BasicConv2d::new(reg, &format!("{name}.branch7x7x3_1"), cin, 192, 1, 1, 1, 0, 0)?,
            b7_2: BasicConv2d::new(reg, &format!("{name}.branch7x7x3_2"), 192, 192, 1, 7, 1, 0, 3)?,
            b7_3: BasicConv2d::new(reg, &format!("{name}.branch7x7x3_3"), 192, 192, 7, 1, 1, 3, 0)?,
            b7_4: BasicConv2d::new(reg, &format!("{name}.branch7x7x3_4"), 192, 192, 3, 3, 2, 0, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b3_2.forward(&self.b3_1.forward(x)?)?;
        let b = self.b7_4.forward(
            &self.b7_3.forward(&self.b7_2.forward(&self.b7_1.forward(x)?)?)?,
        )?;
        let c = max_pool_3x3_s2(x)?;
        Ok(Tensor::cat(&[&a, &b, &c], 1)?)
    }
}

struct InceptionE {
    b1: BasicConv2d,
    b3_1: BasicConv2d,
    b3_2a: BasicConv2d,
    b3_2b: BasicConv2d,
    bd_1: BasicConv2d,
    bd_2: BasicConv2d,
    bd_3a: BasicConv2d,
    bd_3b: BasicConv2d,
    pool: BasicConv2d,
}

impl InceptionE {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize) -> Result<Self> {
        Ok(InceptionE {
            b1: BasicConv2d::new(reg, &format!("{name}.branch1x1"), cin, 320, 1, 1, 1, 0, 0)?,
            b3_1: BasicConv2d::new(reg, &format!("{name}.branch3x3_1"), cin, 384, 1, 1, 1, 0, 0)?,
            b3_2a: BasicConv2d::new(reg, &format!("{name}.branch3x3_2a"), 384, 384, 1, 3, 1, 0, 1)?,
            b3_2b: BasicConv2d::new(reg, &format!("{name}.branch3x3_2b"), 384, 384, 3, 1, 1, 1, 0)?,
            bd_1: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_1"), cin, 448, 1, 1, 1, 0, 0)?,
            bd_2: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_2"), 448, 384, 3, 3, 1, 1, 1)?,
            bd_3a: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_3a"), 384, 384, 1, 3, 1, 0, 1)?,
            bd_3b: BasicConv2d::new(reg, &format!("{name}.branch3x3dbl_3b"), 384, 384, 3, 1, 1, 1, 0)?,
            pool: BasicConv2d::new(reg, &format!("{name}.branch_pool"), cin, 192, 1, 1, 1, 0, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.b1.forward(x)?;
        let b0 = self.b3_1.forward(x)?;
        let b = Tensor::cat(&[&self.b3_2a.forward(&b0)?, &self.b3_2b.forward(&b0)?], 1)?;
        let c0 = self.bd_2.forward(&self.bd_1.forward(x)?)?;
        let c = Tensor::cat(&[&self.bd_3a.forward(&c0)?, &self.bd_3b.forward(&c0)?], 1)?;
        let d = self.pool.forward(&avg_pool_3x3_pad1(x)?)?;
        Ok(Tensor::cat(&[&a, &b, &c, &d], 1)?)
    }
}

pub struct InceptionV3 {
    conv1a: BasicConv2d,
    conv2a: BasicConv2d,
    conv2b: BasicConv2d,
    conv3b: BasicConv2d,
    conv4a: BasicConv2d,
    mixed_5b: InceptionA,
    mixed_5c: InceptionA,
    mixed_5d: InceptionA,
    mixed_6a: InceptionB,
    mixed_6b: InceptionC,
    mixed_6c: InceptionC,
    mixed_6d: InceptionC,
    mixed_6e: InceptionC,
    mixed_7a: InceptionD,
    mixed_7b: InceptionE,
    mixed_7c: InceptionE,
}

impl InceptionV3 {
    pub fn new(reg: &mut ParamRegistry) -> Result<Self> {
        Ok(InceptionV3 {
            conv1a: BasicConv2d::new(reg, "Conv2d_1a_3x3", 3, 32, 3, 3, 2, 0, 0)?,
            conv2a: BasicConv2d::new(reg, "Conv2d_2a_3x3", 32, 32, 3, 3, 1, 0, 0)?,
            conv2b: BasicConv2d::new(reg, "Conv2d_2b_3x3", 32, 64, 3, 3, 1, 1, 1)?,
            conv3b: BasicConv2d::new(reg, "Conv2d_3b_1x1", 64, 80, 1, 1, 1, 0, 0)?,
            conv4a: BasicConv2d::new(reg, "Conv2d_4a_3x3", 80, 192, 3, 3, 1, 0, 0)?,
            mixed_5b: InceptionA::new(reg, "Mixed_5b", 192, 32)?,
            mixed_5c: InceptionA::new(reg, "Mixed_5c", 256, 64)?,
            mixed_5d: InceptionA::new(reg, "Mixed_5d", 288, 64)?,
            mixed_6a: InceptionB::new(reg, "Mixed_6a", 288)?,
            mixed_6b: InceptionC::new(reg, "Mixed_6b", 768, 128)?,
            mixed_6c: InceptionC::new(reg, "Mixed_6c", 768, 160)?,
            mixed_6d: InceptionC::new(reg, "Mixed_6d", 768, 160)?,
            mixed_6e: InceptionC::new(reg, "Mixed_6e", 768, 192)?,
            mixed_7a: InceptionD::new(reg, "Mixed_7a", 768)?,
            mixed_7b: InceptionE::new(reg, "Mixed_7b", 1280)?,
            mixed_7c: InceptionE::new(reg, "Mixed_7c", 2048)?,
        })
    }

    /// (B, 3, 299, 299) -> ((B, 768, 17, 17) mixed-6e, (B, 2048) pooled).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = self.conv1a.forward(x)?; // 32 x 149
        let x = self.conv2a.forward(&x)?; // 32 x 147
        let x = self.conv2b.forward(&x)?; // 64 x 147
        let x = max_pool_3x3_s2(&x)?; // 64 x 73
        let x = self.conv3b.forward(&x)?; // 80 x 73
        let x = self.conv4a.forward(&x)?; // 192 x 71
        let x = max_pool_3x3_s2(&x)?; // 192 x 35
        let x = self.mixed_5b.forward(&x)?;
        let x = self.mixed_5c.forward(&x)?;
        let x = self.mixed_5d.forward(&x)?;
        let x = self.mixed_6a.forward(&x)?;
        let x = self.mixed_6b.forward(&x)?;
        let x = self.mixed_6c.forward(&x)?;
        let x = self.mixed_6d.forward(&x)?;
        let local = self.mixed_6e.forward(&x)?; // 768 x 17
        let x = self.mixed_7a.forward(&local)?;
        let x = self.mixed_7b.forward(&x)?;
        let x = self.mixed_7c.forward(&x)?; // 2048 x 8
        let global = x.mean(3)?.mean(2)?; // (B, 2048)
        Ok((local, global))
    }
}
