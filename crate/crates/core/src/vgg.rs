//! VGG19 convolutional feature graph (eval only), used as the crop-encoder
//! backbone when real weights are supplied. The forward pass runs through the
//! last max-pooling stage, mapping a 128x128 crop to 512x4x4; the per-stage
//! pre-pooling activations feed the perceptual loss.

use candle_core::Tensor;

use crate::nn::layers::Conv2d;
use crate::nn::ParamRegistry;
use crate::Result;

const STAGES: &[&[(usize, usize)]] = &[
    &[(3, 64), (64, 64)],
    &[(64, 128), (128, 128)],
    &[(128, 256), (256, 256), (256, 256), (256, 256)],
    &[(256, 512), (512, 512), (512, 512), (512, 512)],
    &[(512, 512), (512, 512), (512, 512), (512, 512)],
];

pub struct Vgg19 {
    stages: Vec<Vec<Conv2d>>,
}

impl Vgg19 {
    pub fn new(reg: &mut ParamRegistry) -> Result<Self> {
        let mut stages = Vec::new();
        for (si, convs) in STAGES.iter().enumerate() {
            let mut stage = Vec::new();
            for (ci, (cin, cout)) in convs.iter().enumerate() {
                stage.push(Conv2d::new(
                    reg,
                    &format!("vgg19.stage{si}.conv{ci}"),
                    *cin,
                    *cout,
                    3,
                    1,
                    1,
                )?);
            }
            stages.push(stage);
        }
        Ok(Vgg19 { stages })
    }

    /// (B, 3, 128, 128) -> (B, 512, 4, 4) after the fifth pooling.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(&x)?.relu()?;
            }
            x = x.max_pool2d(2)?;
        }
        Ok(x)
    }

    /// Pre-pooling activation of each of the five stages.
    pub fn stage_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = x.clone();
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(&x)?.relu()?;
            }
            taps.push(x.clone());
            x = x.max_pool2d(2)?;
        }
        Ok(taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn forward_reaches_512x4x4_from_128() {
        let dev = Device::Cpu;
        let mut reg = ParamRegistry::new(0, &dev);
        let net = Vgg19::new(&mut reg).unwrap();
        let x = Tensor::randn(0f32, 0.1f32, (1, 3, 128, 128), &dev).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 512, 4, 4]);
        let taps = net.stage_features(&x).unwrap();
        assert_eq!(taps.len(), 5);
        assert_eq!(taps[0].dims(), &[1, 64, 128, 128]);
        assert_eq!(taps[4].dims(), &[1, 512, 8, 8]);
    }
}
