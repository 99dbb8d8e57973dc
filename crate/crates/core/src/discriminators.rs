//! Adversarial critics: patch-wise (unconditional, graph-conditional and the
//! optional caption-conditional clone), object-wise with an auxiliary
//! classifier head, and phrase-wise (unconditional on subject/predicate/
//! object crop features, or conditioned on the implicit relation vector).

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::nn::layers::{BatchNorm2d, Conv2d, Linear};
use crate::nn::{ops, ParamRegistry};
use crate::{Error, Result};

const SLOPE: f64 = 0.2;

struct StridedBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
}

impl StridedBlock {
    fn new(
        reg: &mut ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        with_bn: bool,
    ) -> Result<Self> {
        Ok(StridedBlock {
            conv: Conv2d::new(reg, &format!("{name}.conv"), cin, cout, 4, 2, 1)?,
            bn: if with_bn {
                Some(BatchNorm2d::new(reg, &format!("{name}.bn"), cout)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        match &self.bn {
            Some(bn) => ops::leaky_relu(&bn.forward(&y, train)?, SLOPE),
            None => Ok(y),
        }
    }
}

/// Unconditional patch critic for one resolution: strided convs down to 8x8,
/// then a 1x1 conv to a 1x8x8 score map. The final strided conv has no
/// norm/activation before the scoring conv.
pub struct PatchUnconditional {
    blocks: Vec<StridedBlock>,
    score: Conv2d,
    pub resolution: usize,
}

impl PatchUnconditional {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig, resolution: usize) -> Result<Self> {
        let name = format!("d.patch_unc.{resolution}");
        let n_down = (resolution / 8).trailing_zeros() as usize; // 64 -> 3
        let mut widths = vec![3usize];
        for i in 0..n_down {
            widths.push(cfg.scaled((64 << i).min(512)));
        }
        let mut blocks = Vec::new();
        for i in 0..n_down {
            let with_bn = i + 1 < n_down;
            blocks.push(StridedBlock::new(
                reg,
                &format!("{name}.b{i}"),
                widths[i],
                widths[i + 1],
                with_bn,
            )?);
        }
        let score = Conv2d::new(reg, &format!("{name}.score"), widths[n_down], 1, 1, 1, 0)?;
        Ok(PatchUnconditional {
            blocks,
            score,
            resolution,
        })
    }

    /// (B, 3, r, r) -> (B, 1, 8, 8) logits.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Tensor> {
        let (_b, _c, h, w) = image.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::Data(format!(
                "patch critic built for {0}x{0}, got {h}x{w}",
                self.resolution
            )));
        }
        let mut x = image.clone();
        for blk in &self.blocks {
            x = blk.forward(&x, train)?;
        }
        self.score.forward(&x)
    }
}

/// Graph-conditional patch critic: image features at 16x16 concatenated with
/// the broadcast global graph vector, one more strided conv, then scoring.
pub struct PatchConditional {
    stem: Vec<StridedBlock>,
    cond_proj: Option<Linear>,
    fuse: StridedBlock,
    score: Conv2d,
    pub resolution: usize,
    cond_dim: usize,
}

impl PatchConditional {
    /// `cond_dim` = 128 for the graph vector; the caption-conditional clone
    /// projects its 256-d vector down to 128 first.
    pub fn new(
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        resolution: usize,
        cond_dim: usize,
        tag: &str,
    ) -> Result<Self> {
        let name = format!("d.patch_{tag}.{resolution}");
        let n_down = (resolution / 16).trailing_zeros() as usize; // 64 -> 2
        let stem_out = cfg.scaled(128);
        let mut widths = vec![3usize];
        for i in 0..n_down {
            let w = if i + 1 == n_down {
                stem_out
            } else {
                cfg.scaled((64 << i).min(512))
            };
            widths.push(w);
        }
        let mut stem = Vec::new();
        for i in 0..n_down {
            stem.push(StridedBlock::new(
                reg,
                &format!("{name}.stem{i}"),
                widths[i],
                widths[i + 1],
                true,
            )?);
        }
        let cond_proj = if cond_dim != cfg.d_phrase {
            Some(Linear::new(
                reg,
                &format!("{name}.cond_proj"),
                cond_dim,
                cfg.d_phrase,
            )?)
        } else {
            None
        };
        let fused_in = stem_out + cfg.d_phrase;
        let fuse = StridedBlock::new(reg, &format!("{name}.fuse"), fused_in, cfg.scaled(512), false)?;
        let score = Conv2d::new(reg, &format!("{name}.score"), cfg.scaled(512), 1, 1, 1, 0)?;
        Ok(PatchConditional {
            stem,
            cond_proj,
            fuse,
            score,
            resolution,
            cond_dim,
        })
    }

    /// (B, 3, r, r) image + (B, cond_dim) condition -> (B, 1, 8, 8) logits.
    pub fn forward(&self, image: &Tensor, condition: &Tensor, train: bool) -> Result<Tensor> {
        let (b, _c, h, w) = image.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::Data(format!(
                "conditional patch critic built for {0}x{0}, got {h}x{w}",
                self.resolution
            )));
        }
        let (bc, cd) = condition.dims2()?;
        if bc != b || cd != self.cond_dim {
            return Err(Error::Data(format!(
                "condition shape {:?} does not match batch {b} x {}",
                condition.dims(),
                self.cond_dim
            )));
        }
        let mut x = image.clone();
        for blk in &self.stem {
            x = blk.forward(&x, train)?;
        }
        let cond = match &self.cond_proj {
            Some(p) => p.forward(condition)?,
            None => condition.clone(),
        };
        let (_b, cc) = cond.dims2()?;
        let (_b2, _sc, sh, sw) = x.dims4()?;
        let tiled = cond
            .reshape((b, cc, 1, 1))?
            .broadcast_as((b, cc, sh, sw))?
            .contiguous()?;
        let fused = Tensor::cat(&[&x, &tiled], 1)?;
        let y = self.fuse.forward(&fused, train)?;
        self.score.forward(&y)
    }
}

/// Object critic: crops resized to half the image side, strided convs to
/// 4x4, average pooling, then realness and classification heads.
pub struct ObjectDiscriminator {
    blocks: Vec<StridedBlock>,
    fc: Linear,
    head_real: Linear,
    head_class: Linear,
    pub crop_size: usize,
    pub n_categories: usize,
}

impl ObjectDiscriminator {
    pub fn new(
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        image_resolution: usize,
        n_categories: usize,
    ) -> Result<Self> {
        let name = "d.object".to_string();
        let crop_size = image_resolution / 2;
        let n_down = (crop_size / 4).trailing_zeros() as usize; // 32 -> 3
        let mut widths = vec![3usize];
        for i in 0..n_down {
            widths.push(cfg.scaled((64 << i).min(256)));
        }
        let mut blocks = Vec::new();
        for i in 0..n_down {
            // The last strided conv feeds pooling directly.
            let with_bn = i + 1 < n_down;
            blocks.push(StridedBlock::new(
                reg,
                &format!("{name}.b{i}"),
                widths[i],
                widths[i + 1],
                with_bn,
            )?);
        }
        let feat = widths[n_down];
        let fc = Linear::new(reg, &format!("{name}.fc"), feat, cfg.scaled(1024))?;
        let head_real = Linear::new(reg, &format!("{name}.head_real"), cfg.scaled(1024), 1)?;
        let head_class = Linear::new(
            reg,
            &format!("{name}.head_class"),
            cfg.scaled(1024),
            n_categories,
        )?;
        Ok(ObjectDiscriminator {
            blocks,
            fc,
            head_real,
            head_class,
            crop_size,
            n_categories,
        })
    }

    /// Crop every object box out of its image, bilinear-resize to half the
    /// image side and stack. `boxes[i]` indexes into `image` batch slot
    /// `owners[i]`. Degenerate crops are skipped with a diagnostic.
    pub fn gather_crops(
        &self,
        images: &Tensor,
        boxes: &[[f32; 4]],
        owners: &[usize],
    ) -> Result<(Tensor, Vec<usize>)> {
        let mut crops = Vec::new();
        let mut kept = Vec::new();
        for (i, (b, &owner)) in boxes.iter().zip(owners).enumerate() {
            let img = images.narrow(0, owner, 1)?;
            match ops::crop_resize(&img, *b, self.crop_size) {
                Ok(c) => {
                    crops.push(c);
                    kept.push(i);
                }
                Err(e) => log::warn!("skipping degenerate object crop {i}: {e}"),
            }
        }
        if crops.is_empty() {
            return Err(Error::Data("no valid object crops in batch".into()));
        }
        let refs: Vec<&Tensor> = crops.iter().collect();
        Ok((Tensor::cat(&refs, 0)?, kept))
    }

    /// (N, 3, crop, crop) -> ((N, 1) realness logits, (N, C) class logits).
    pub fn forward(&self, crops: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let (_n, _c, h, w) = crops.dims4()?;
        if h != self.crop_size || w != self.crop_size {
            return Err(Error::Data(format!(
                "object critic expects {0}x{0} crops, got {h}x{w}",
                self.crop_size
            )));
        }
        let mut x = crops.clone();
        for blk in &self.blocks {
            x = blk.forward(&x, train)?;
        }
        let pooled = x.mean(3)?.mean(2)?; // (N, feat)
        let hid = self.fc.forward(&pooled)?;
        Ok((self.head_real.forward(&hid)?, self.head_class.forward(&hid)?))
    }
}

/// Which phrase-critic variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhraseMode {
    Unconditional,
    Conditional,
}

/// Phrase critic over frozen crop-encoder features. The unconditional form
/// scores (subject, predicate, object) crop features; the conditional form
/// replaces the predicate features with the broadcast implicit relation
/// vector.
pub struct PhraseDiscriminator {
    unc_conv: Conv2d,
    unc_bn: BatchNorm2d,
    unc_score: Conv2d,
    con_conv: Conv2d,
    con_bn: BatchNorm2d,
    con_score: Conv2d,
    d_phrase: usize,
}

impl PhraseDiscriminator {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let cw = crate::backbones::CROP_CHANNELS; // 512, fixed by the backbone
        let mid = cfg.scaled(512);
        Ok(PhraseDiscriminator {
            unc_conv: Conv2d::new(reg, "d.phrase.unc_conv", 3 * cw, mid, 3, 1, 0)?,
            unc_bn: BatchNorm2d::new(reg, "d.phrase.unc_bn", mid)?,
            unc_score: Conv2d::new(reg, "d.phrase.unc_score", mid, 1, 1, 1, 0)?,
            con_conv: Conv2d::new(reg, "d.phrase.con_conv", 2 * cw + cfg.d_phrase, mid, 3, 1, 0)?,
            con_bn: BatchNorm2d::new(reg, "d.phrase.con_bn", mid)?,
            con_score: Conv2d::new(reg, "d.phrase.con_score", mid, 1, 1, 1, 0)?,
            d_phrase: cfg.d_phrase,
        })
    }

    /// Inputs are (N, 512, 4, 4) crop features; `relation` is (N, 128) for
    /// the conditional mode, `predicate` for the unconditional one.
    pub fn forward(
        &self,
        subject: &Tensor,
        predicate: Option<&Tensor>,
        relation: Option<&Tensor>,
        object: &Tensor,
        mode: PhraseMode,
        train: bool,
    ) -> Result<Tensor> {
        let (n, _c, gh, gw) = subject.dims4()?;
        let cat = match mode {
            PhraseMode::Unconditional => {
                let p = predicate.ok_or_else(|| {
                    Error::Data("unconditional phrase critic needs predicate features".into())
                })?;
                Tensor::cat(&[subject, p, object], 1)?
            }
            PhraseMode::Conditional => {
                let r = relation.ok_or_else(|| {
                    Error::Data("conditional phrase critic needs relation vectors".into())
                })?;
                let tiled = r
                    .reshape((n, self.d_phrase, 1, 1))?
                    .broadcast_as((n, self.d_phrase, gh, gw))?
                    .contiguous()?;
                Tensor::cat(&[subject, &tiled, object], 1)?
            }
        };
        let (conv, bn, score) = match mode {
            PhraseMode::Unconditional => (&self.unc_conv, &self.unc_bn, &self.unc_score),
            PhraseMode::Conditional => (&self.con_conv, &self.con_bn, &self.con_score),
        };
        let x = ops::leaky_relu(&bn.forward(&conv.forward(&cat)?, train)?, SLOPE)?;
        score.forward(&x)
    }
}

/// Full critic bank for a training run.
pub struct DiscriminatorSet {
    pub reg: ParamRegistry,
    pub patch_unc: Vec<PatchUnconditional>,
    pub patch_graph: Vec<PatchConditional>,
    pub patch_caption: Vec<PatchConditional>,
    pub object: ObjectDiscriminator,
    pub phrase: PhraseDiscriminator,
}

impl DiscriminatorSet {
    pub fn new(
        seed: u64,
        device: &candle_core::Device,
        cfg: &ModelConfig,
        n_categories: usize,
    ) -> Result<Self> {
        let mut reg = ParamRegistry::new(seed, device);
        let mut patch_unc = Vec::new();
        let mut patch_graph = Vec::new();
        let mut patch_caption = Vec::new();
        for stage in 0..cfg.stages {
            let res = cfg.stage_resolution(stage);
            patch_unc.push(PatchUnconditional::new(&mut reg, cfg, res)?);
            patch_graph.push(PatchConditional::new(&mut reg, cfg, res, cfg.d_phrase, "ig")?);
            if cfg.use_caption_patch_d {
                patch_caption.push(PatchConditional::new(
                    &mut reg,
                    cfg,
                    res,
                    cfg.d_word,
                    "cap",
                )?);
            }
        }
        let object = ObjectDiscriminator::new(&mut reg, cfg, cfg.max_resolution(), n_categories)?;
        let phrase = PhraseDiscriminator::new(&mut reg, cfg)?;
        Ok(DiscriminatorSet {
            reg,
            patch_unc,
            patch_graph,
            patch_caption,
            object,
            phrase,
        })
    }
}
