//! Cascaded refinement generator. Each stage's refiner is a chain of
//! refinement modules: every module resamples the comprehensive semantic map
//! to its output resolution, concatenates the upsampled previous features,
//! and applies two conv/norm/leaky-relu blocks. Stage 0 climbs from 4x4 to
//! 64x64; later stages run one width-halving module at the working
//! resolution and one doubling module. Output heads map hidden features to
//! bounded RGB.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::nn::layers::{BatchNorm2d, Conv2d};
use crate::nn::{ops, ParamRegistry};
use crate::{Error, Result};

/// One refinement module.
struct Crm {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    out_res: usize,
    takes_features: bool,
}

impl Crm {
    fn new(
        reg: &mut ParamRegistry,
        name: &str,
        sem_channels: usize,
        in_channels: usize,
        out_channels: usize,
        out_res: usize,
    ) -> Result<Self> {
        let cin = sem_channels + in_channels;
        Ok(Crm {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), cin, out_channels, 3, 1, 1)?,
            bn1: BatchNorm2d::new(reg, &format!("{name}.bn1"), out_channels)?,
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1)?,
            bn2: BatchNorm2d::new(reg, &format!("{name}.bn2"), out_channels)?,
            out_res,
            takes_features: in_channels > 0,
        })
    }

    fn forward(&self, semantic: &Tensor, features: Option<&Tensor>, train: bool) -> Result<Tensor> {
        let sem = ops::resample_square(semantic, self.out_res)?;
        let x = match (features, self.takes_features) {
            (Some(f), true) => {
                let up = f.upsample_nearest2d(self.out_res, self.out_res)?;
                Tensor::cat(&[&sem, &up], 1)?
            }
            (None, false) => sem,
            _ => return Err(Error::Data("refinement module feature arity mismatch".into())),
        };
        let x = ops::leaky_relu(&self.bn1.forward(&self.conv1.forward(&x)?, train)?, 0.2)?;
        let x = ops::leaky_relu(&self.bn2.forward(&self.conv2.forward(&x)?, train)?, 0.2)?;
        Ok(x)
    }
}

/// Refiner for one stage: fused semantic map in, hidden feature map out at
/// twice stage 0's chain-end (stage 0) or double the working resolution
/// (later stages).
pub struct Refiner {
    crms: Vec<Crm>,
    pub in_res: usize,
    pub out_res: usize,
}

impl Refiner {
    /// Stage-0 chain: 4 -> 8 -> 16 -> 32 -> 64 with widths
    /// (1024, 512, 256, 128, 64) scaled.
    fn stage0(reg: &mut ParamRegistry, cfg: &ModelConfig, fused: usize) -> Result<Self> {
        let widths = [1024, 512, 256, 128, 64].map(|w| cfg.scaled(w));
        let mut crms = Vec::new();
        let mut prev = 0usize;
        for (i, (w, res)) in widths.iter().zip([4usize, 8, 16, 32, 64]).enumerate() {
            crms.push(Crm::new(
                reg,
                &format!("gen.stage0.crm{i}"),
                fused,
                prev,
                *w,
                res,
            )?);
            prev = *w;
        }
        Ok(Refiner {
            crms,
            in_res: 64,
            out_res: 64,
        })
    }

    /// Later stages: one width-halving module at the working resolution, one
    /// doubling module ending at the stage's hidden width.
    fn later(reg: &mut ParamRegistry, cfg: &ModelConfig, stage: usize, fused: usize) -> Result<Self> {
        let base = 64 << (stage - 1);
        let mid = cfg.scaled(128);
        let hidden = cfg.scaled(cfg.hidden_channels);
        let crms = vec![
            Crm::new(reg, &format!("gen.stage{stage}.crm0"), fused, 0, mid, base)?,
            Crm::new(reg, &format!("gen.stage{stage}.crm1"), fused, mid, hidden, base * 2)?,
        ];
        Ok(Refiner {
            crms,
            in_res: base,
            out_res: base * 2,
        })
    }

    pub fn forward(&self, fused: &Tensor, train: bool) -> Result<Tensor> {
        let (_b, _c, h, w) = fused.dims4()?;
        if h != self.in_res || w != self.in_res {
            return Err(Error::Data(format!(
                "refiner expects fused map at {0}x{0}, got {h}x{w}",
                self.in_res
            )));
        }
        let mut features: Option<Tensor> = None;
        for crm in &self.crms {
            let out = crm.forward(fused, features.as_ref(), train)?;
            features = Some(out);
        }
        Ok(features.expect("refiner has modules"))
    }
}

/// Hidden features to RGB in [-1, 1].
pub struct OutputHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl OutputHead {
    fn new(reg: &mut ParamRegistry, name: &str, hidden: usize) -> Result<Self> {
        Ok(OutputHead {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), hidden, hidden, 3, 1, 1)?,
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), hidden, 3, 1, 1, 0)?,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let x = ops::leaky_relu(&self.conv1.forward(h)?, 0.2)?;
        Ok(self.conv2.forward(&x)?.tanh()?)
    }
}

/// All refiners and output heads.
pub struct ImageDecoder {
    pub refiners: Vec<Refiner>,
    pub heads: Vec<OutputHead>,
}

impl ImageDecoder {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let fused = cfg.scaled(cfg.fused_channels);
        let hidden = cfg.scaled(cfg.hidden_channels);
        let mut refiners = Vec::new();
        let mut heads = Vec::new();
        for stage in 0..cfg.stages {
            if stage == 0 {
                refiners.push(Refiner::stage0(reg, cfg, fused)?);
            } else {
                refiners.push(Refiner::later(reg, cfg, stage, fused)?);
            }
            heads.push(OutputHead::new(reg, &format!("gen.head{stage}"), hidden)?);
        }
        Ok(ImageDecoder { refiners, heads })
    }

    /// Run one stage: fused map -> (hidden features, image).
    pub fn stage(&self, stage: usize, fused: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let h = self.refiners[stage].forward(fused, train)?;
        let img = self.heads[stage].forward(&h)?;
        Ok((h, img))
    }
}
