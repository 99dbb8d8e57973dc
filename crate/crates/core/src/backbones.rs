//! Frozen visual feature extractors.
//!
//! The region encoder maps a 299x299 image to 289 sub-region features (17x17
//! grid, 768 channels) plus a 2048-d pooled vector, each projected into the
//! 128-d joint matching space by the only two trainable layers. The crop
//! encoder maps a 128x128 crop to a 512x4x4 feature block and also provides
//! the feature taps for the perceptual loss.
//!
//! Both backbones are either the real pretrained networks (weights loaded
//! from safetensors files) or small randomly-initialized stand-ins with
//! identical output shapes, selected by `model.stub_backbones`. Backbone
//! interiors never receive gradients; the stand-ins keep the whole test
//! suite runnable without any weight downloads.

use candle_core::{Device, Tensor};

use crate::config::ModelConfig;
use crate::inception::InceptionV3;
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{ops, ParamRegistry};
use crate::vgg::Vgg19;
use crate::{Error, Result};

pub const REGION_INPUT: usize = 299;
pub const REGION_GRID: usize = 17;
pub const REGION_COUNT: usize = REGION_GRID * REGION_GRID;
pub const REGION_CHANNELS: usize = 768;
pub const REGION_GLOBAL_CHANNELS: usize = 2048;
pub const CROP_INPUT: usize = 128;
pub const CROP_CHANNELS: usize = 512;
pub const CROP_GRID: usize = 4;

/// Sub-region features for a batch of images.
pub struct RegionFeatures {
    /// (B, 128, 289)
    pub local: Tensor,
    /// (B, 128)
    pub global: Tensor,
}

enum RegionBackbone {
    Stub {
        conv1: Conv2d,
        conv2: Conv2d,
        conv3: Conv2d,
        global_head: Linear,
    },
    Inception(Box<InceptionV3>),
}

/// Image region encoder: frozen backbone + two trainable projections.
pub struct RegionEncoder {
    backbone_reg: ParamRegistry,
    backbone: RegionBackbone,
    /// Registry holding only the two projections; handed to the matching
    /// pretrainers and frozen afterwards.
    pub proj_reg: ParamRegistry,
    proj_local: Linear,
    proj_global: Linear,
}

impl RegionEncoder {
    pub fn new(seed: u64, device: &Device, cfg: &ModelConfig) -> Result<Self> {
        let mut backbone_reg = ParamRegistry::new(seed ^ 0x5eed_babe, device);
        let backbone = if cfg.stub_backbones {
            RegionBackbone::Stub {
                conv1: Conv2d::new(&mut backbone_reg, "region_stub.conv1", 3, 24, 4, 4, 0)?,
                conv2: Conv2d::new(&mut backbone_reg, "region_stub.conv2", 24, 48, 4, 4, 0)?,
                conv3: Conv2d::new(
                    &mut backbone_reg,
                    "region_stub.conv3",
                    48,
                    REGION_CHANNELS,
                    2,
                    1,
                    0,
                )?,
                global_head: Linear::new(
                    &mut backbone_reg,
                    "region_stub.global_head",
                    REGION_CHANNELS,
                    REGION_GLOBAL_CHANNELS,
                )?,
            }
        } else {
            let path = cfg.inception_weights.as_ref().ok_or_else(|| {
                Error::Config(
                    "stub_backbones = false but model.inception_weights is unset; provide a \
                     safetensors export of Inception-v3 weights (see README, `Backbone weights`) \
                     or set model.stub_backbones = true"
                        .into(),
                )
            })?;
            let net = InceptionV3::new(&mut backbone_reg)?;
            backbone_reg.load(path).map_err(|e| {
                Error::Config(format!(
                    "cannot load Inception-v3 weights from {}: {e}; export torchvision weights \
                     to safetensors with the layer names used by this crate (README, `Backbone \
                     weights`)",
                    path.display()
                ))
            })?;
            RegionBackbone::Inception(Box::new(net))
        };

        let mut proj_reg = ParamRegistry::new(seed ^ 0x9a17_0000, device);
        let proj_local = Linear::new(
            &mut proj_reg,
            "region_proj.local",
            REGION_CHANNELS,
            cfg.d_phrase,
        )?;
        let proj_global = Linear::new(
            &mut proj_reg,
            "region_proj.global",
            REGION_GLOBAL_CHANNELS,
            cfg.d_phrase,
        )?;
        Ok(RegionEncoder {
            backbone_reg,
            backbone,
            proj_reg,
            proj_local,
            proj_global,
        })
    }

    /// Raw backbone features: ((B, 768, 17, 17), (B, 2048)), detached.
    fn backbone_features(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (local, global) = self.backbone_features_diff(images)?;
        Ok((local.detach(), global.detach()))
    }

    fn backbone_features_diff(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_b, c, h, w) = images.dims4()?;
        if c != 3 || h != REGION_INPUT || w != REGION_INPUT {
            return Err(Error::Data(format!(
                "region encoder expects (B, 3, {REGION_INPUT}, {REGION_INPUT}), got {:?}",
                images.dims()
            )));
        }
        let (local, global) = match &self.backbone {
            RegionBackbone::Stub {
                conv1,
                conv2,
                conv3,
                global_head,
            } => {
                let x = conv1.forward(images)?.relu()?;
                let x = conv2.forward(&x)?.relu()?;
                let local = conv3.forward(&x)?.relu()?; // (B, 768, 17, 17)
                let pooled = local.mean(3)?.mean(2)?; // (B, 768)
                let global = global_head.forward(&pooled)?.relu()?;
                (local, global)
            }
            RegionBackbone::Inception(net) => net.forward(images)?,
        };
        Ok((local, global))
    }

    /// Project backbone features into the matching space. Backbone output is
    /// detached: pretraining only updates the projections.
    pub fn encode(&self, images: &Tensor) -> Result<RegionFeatures> {
        let (local, global) = self.backbone_features(images)?;
        self.project(&local, &global)
    }

    /// Like [`Self::encode`] but keeps the graph alive through the backbone,
    /// so generator losses can reach the image. The backbone weights still
    /// sit outside every optimizer.
    pub fn encode_diff(&self, images: &Tensor) -> Result<RegionFeatures> {
        let (local, global) = self.backbone_features_diff(images)?;
        self.project(&local, &global)
    }

    fn project(&self, local: &Tensor, global: &Tensor) -> Result<RegionFeatures> {
        let (b, c, gh, gw) = local.dims4()?;
        let flat = local.reshape((b, c, gh * gw))?.transpose(1, 2)?; // (B, 289, 768)
        let local_proj = self.proj_local.forward(&flat.contiguous()?)?; // (B, 289, 128)
        let local_proj = local_proj.transpose(1, 2)?.contiguous()?; // (B, 128, 289)
        let global_proj = self.proj_global.forward(global)?;
        Ok(RegionFeatures {
            local: local_proj,
            global: global_proj,
        })
    }

    /// Resize any square image batch to the backbone input size. Generated
    /// and dataset images are in [-1, 1] already; the backbone consumes that
    /// range directly.
    pub fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        ops::bilinear_resize(images, REGION_INPUT, REGION_INPUT)
    }

    pub fn backbone_checksum(&self) -> Result<String> {
        self.backbone_reg.checksum()
    }
}

enum CropBackbone {
    Stub {
        conv1: Conv2d,
        conv2: Conv2d,
        conv3: Conv2d,
    },
    Vgg(Box<Vgg19>),
}

/// Crop encoder for phrase discrimination and the perceptual loss.
pub struct CropEncoder {
    reg: ParamRegistry,
    backbone: CropBackbone,
}

impl CropEncoder {
    pub fn new(seed: u64, device: &Device, cfg: &ModelConfig) -> Result<Self> {
        let mut reg = ParamRegistry::new(seed ^ 0xc40f_feed, device);
        let backbone = if cfg.stub_backbones {
            CropBackbone::Stub {
                conv1: Conv2d::new(&mut reg, "crop_stub.conv1", 3, 32, 4, 4, 0)?,
                conv2: Conv2d::new(&mut reg, "crop_stub.conv2", 32, 64, 4, 4, 0)?,
                conv3: Conv2d::new(&mut reg, "crop_stub.conv3", 64, CROP_CHANNELS, 2, 2, 0)?,
            }
        } else {
            let path = cfg.vgg_weights.as_ref().ok_or_else(|| {
                Error::Config(
                    "stub_backbones = false but model.vgg_weights is unset; provide a \
                     safetensors export of VGG19 conv weights (see README, `Backbone weights`) \
                     or set model.stub_backbones = true"
                        .into(),
                )
            })?;
            let net = Vgg19::new(&mut reg)?;
            reg.load(path).map_err(|e| {
                Error::Config(format!(
                    "cannot load VGG19 weights from {}: {e}; export torchvision weights to \
                     safetensors with the layer names used by this crate (README, `Backbone \
                     weights`)",
                    path.display()
                ))
            })?;
            CropBackbone::Vgg(Box::new(net))
        };
        Ok(CropEncoder { reg, backbone })
    }

    /// Crop a (B, 3, H, W) image by a normalized box and encode to
    /// (B, 512, 4, 4). The union of subject and object boxes gives predicate
    /// crops. Output is detached: the backbone is frozen.
    pub fn encode_crop(&self, image: &Tensor, boxn: [f32; 4]) -> Result<Tensor> {
        let crop = ops::crop_resize(image, boxn, CROP_INPUT)?;
        Ok(self.encode(&crop)?.detach())
    }

    /// Crop without detaching, for generator-side losses that need gradients
    /// through the image (the backbone weights still receive none when kept
    /// out of the optimizer).
    pub fn encode_crop_diff(&self, image: &Tensor, boxn: [f32; 4]) -> Result<Tensor> {
        let crop = ops::crop_resize(image, boxn, CROP_INPUT)?;
        self.encode(&crop)
    }

    fn encode(&self, crop: &Tensor) -> Result<Tensor> {
        let (_b, c, h, w) = crop.dims4()?;
        if c != 3 || h != CROP_INPUT || w != CROP_INPUT {
            return Err(Error::Data(format!(
                "crop encoder expects (B, 3, {CROP_INPUT}, {CROP_INPUT}), got {:?}",
                crop.dims()
            )));
        }
        match &self.backbone {
            CropBackbone::Stub { conv1, conv2, conv3 } => {
                let x = conv1.forward(crop)?.relu()?;
                let x = conv2.forward(&x)?.relu()?;
                Ok(conv3.forward(&x)?.relu()?)
            }
            CropBackbone::Vgg(net) => net.forward(crop),
        }
    }

    /// Feature taps for the perceptual loss, at increasing depth. The input
    /// is resized to the crop resolution first.
    pub fn perceptual_features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let x = ops::bilinear_resize(image, CROP_INPUT, CROP_INPUT)?;
        match &self.backbone {
            CropBackbone::Stub { conv1, conv2, conv3 } => {
                let f1 = conv1.forward(&x)?.relu()?;
                let f2 = conv2.forward(&f1)?.relu()?;
                let f3 = conv3.forward(&f2)?.relu()?;
                Ok(vec![f1, f2, f3])
            }
            CropBackbone::Vgg(net) => net.stage_features(&x),
        }
    }

    pub fn checksum(&self) -> Result<String> {
        self.reg.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> Device {
        Device::Cpu
    }

    fn stub_cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn region_encoder_output_shapes() {
        let enc = RegionEncoder::new(3, &dev(), &stub_cfg()).unwrap();
        let img = Tensor::randn(0f32, 1f32, (2, 3, 299, 299), &dev()).unwrap();
        let feats = enc.encode(&img).unwrap();
        assert_eq!(feats.local.dims(), &[2, 128, 289]);
        assert_eq!(feats.global.dims(), &[2, 128]);
    }

    #[test]
    fn region_encoder_distinguishes_images() {
        let enc = RegionEncoder::new(3, &dev(), &stub_cfg()).unwrap();
        let a = Tensor::full(0.5f32, (1, 3, 299, 299), &dev()).unwrap();
        let b = Tensor::full(-0.5f32, (1, 3, 299, 299), &dev()).unwrap();
        let fa = enc.encode(&a).unwrap().global;
        let fb = enc.encode(&b).unwrap().global;
        let d = (fa - fb)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d > 1e-4, "global features degenerate: {d}");
    }

    #[test]
    fn missing_real_weights_is_fatal_with_instructions() {
        let mut cfg = stub_cfg();
        cfg.stub_backbones = false;
        let err = match RegionEncoder::new(0, &dev(), &cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected missing-weights error"),
        };
        let msg = format!("{err}");
        assert!(msg.contains("inception_weights"), "{msg}");
        let err = match CropEncoder::new(0, &dev(), &cfg) {
            Err(e) => e,
            Ok(_) => panic!("expected missing-weights error"),
        };
        assert!(format!("{err}").contains("vgg_weights"));
    }

    #[test]
    fn crop_encoder_shapes_and_determinism() {
        let enc = CropEncoder::new(1, &dev(), &stub_cfg()).unwrap();
        let img = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &dev()).unwrap();
        let f1 = enc.encode_crop(&img, [0.1, 0.2, 0.6, 0.9]).unwrap();
        assert_eq!(f1.dims(), &[1, 512, 4, 4]);
        let f2 = enc.encode_crop(&img, [0.1, 0.2, 0.6, 0.9]).unwrap();
        let d = (f1 - f2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn whole_image_box_equals_resized_image_features() {
        let enc = CropEncoder::new(1, &dev(), &stub_cfg()).unwrap();
        let img = Tensor::randn(0f32, 1f32, (1, 3, 128, 128), &dev()).unwrap();
        let via_crop = enc.encode_crop(&img, [0.0, 0.0, 1.0, 1.0]).unwrap();
        let direct = enc.encode(&img).unwrap();
        let d = (via_crop - direct)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-5);
    }

    #[test]
    fn perceptual_taps_have_increasing_depth() {
        let enc = CropEncoder::new(1, &dev(), &stub_cfg()).unwrap();
        let img = Tensor::randn(0f32, 1f32, (1, 3, 64, 64), &dev()).unwrap();
        let taps = enc.perceptual_features(&img).unwrap();
        assert_eq!(taps.len(), 3);
        assert!(taps[0].dims()[2] > taps[2].dims()[2]);
    }

    #[test]
    fn backbones_are_detached_from_gradient_flow() {
        let enc = RegionEncoder::new(3, &dev(), &stub_cfg()).unwrap();
        let img = candle_core::Var::from_tensor(
            &Tensor::randn(0f32, 1f32, (1, 3, 299, 299), &dev()).unwrap(),
        )
        .unwrap();
        let feats = enc.encode(img.as_tensor()).unwrap();
        let loss = feats.local.sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        // Projections receive gradients, the input image does not: the
        // backbone output was detached.
        assert!(grads.get(img.as_tensor()).is_none());
    }
}
