//! Scene composition: box regression from object vectors, the spatial layout
//! map (object vectors fill their boxes, relation vectors fill the remaining
//! box-union interior), the graph semantic map decoded from the global graph
//! vector, the phrase-context map attended from hidden features, and the
//! aggregator that fuses a stage's maps into the comprehensive semantic map.

use candle_core::{Device, Tensor};

use crate::config::{BoxSource, LayoutMerge, ModelConfig};
use crate::nn::layers::{BatchNorm2d, Conv2d, Linear};
use crate::nn::{ops, ParamRegistry};
use crate::{Error, Result};

/// Normalized boxes plus their provenance.
#[derive(Debug, Clone)]
pub struct BoxSet {
    pub boxes: Vec<[f32; 4]>,
    pub source: BoxSource,
}

/// Box regression network: per-object MLP onto normalized corners.
///
/// All four raw outputs pass through a sigmoid; ordering is then enforced by
/// flooring the far corner at `min_extent` past the near corner (and keeping
/// the near corner below 1 - min_extent), so outputs are always valid.
pub struct BoxRegressor {
    fc1: Linear,
    fc2: Linear,
    min_extent: f64,
}

impl BoxRegressor {
    pub fn new(reg: &mut ParamRegistry, d_phrase: usize, min_extent: f64) -> Result<Self> {
        Ok(BoxRegressor {
            fc1: Linear::new_relu(reg, "brn.fc1", d_phrase, 512)?,
            fc2: Linear::new(reg, "brn.fc2", 512, 4)?,
            min_extent,
        })
    }

    /// (n, 128) object vectors -> (n, 4) normalized boxes, differentiable.
    pub fn forward(&self, objects: &Tensor) -> Result<Tensor> {
        let raw = self.fc2.forward(&self.fc1.forward(objects)?.relu()?)?;
        let sig = ops::sigmoid(&raw)?; // (n, 4)
        let eps = self.min_extent;
        let x0 = sig.narrow(1, 0, 1)?.minimum(1.0 - eps)?;
        let y0 = sig.narrow(1, 1, 1)?.minimum(1.0 - eps)?;
        let x1 = sig.narrow(1, 2, 1)?.broadcast_maximum(&(&x0 + eps)?)?;
        let y1 = sig.narrow(1, 3, 1)?.broadcast_maximum(&(&y0 + eps)?)?;
        Ok(Tensor::cat(&[&x0, &y0, &x1, &y1], 1)?)
    }

    pub fn predict(&self, objects: &Tensor) -> Result<BoxSet> {
        let t = self.forward(objects)?;
        let rows = t.to_vec2::<f32>()?;
        Ok(BoxSet {
            boxes: rows.iter().map(|r| [r[0], r[1], r[2], r[3]]).collect(),
            source: BoxSource::Predicted,
        })
    }
}

fn validate_boxes(boxes: &[[f32; 4]]) -> Result<()> {
    for b in boxes {
        let ok = (0.0..=1.0).contains(&b[0])
            && (0.0..=1.0).contains(&b[1])
            && b[2] <= 1.0
            && b[3] <= 1.0
            && b[0] < b[2]
            && b[1] < b[3];
        if !ok {
            return Err(Error::Data(format!("invalid normalized box {b:?}")));
        }
    }
    Ok(())
}

/// Pixel range [lo, hi) covered by a normalized interval under the
/// center-in-box rule.
fn pixel_range(lo: f32, hi: f32, cells: usize) -> (usize, usize) {
    let mut first = cells;
    let mut last = 0;
    for c in 0..cells {
        let center = (c as f32 + 0.5) / cells as f32;
        if center >= lo && center < hi {
            if c < first {
                first = c;
            }
            last = c + 1;
        }
    }
    if first >= last {
        (0, 0)
    } else {
        (first, last)
    }
}

/// Compose the phrase-wise layout map.
///
/// For each phrase (subject i, relation j, object k): subject pixels carry
/// the subject vector, object pixels the object vector (their overlap takes
/// the element-wise max), and the remaining interior of the box union carries
/// the relation vector. Per-phrase maps merge across phrases per
/// `LayoutMerge`. Pixels covered by no phrase stay zero.
pub fn compose_phrase_layout(
    objects: &Tensor,
    relations: &Tensor,
    boxes: &[[f32; 4]],
    pairs: &[(usize, usize)],
    height: usize,
    width: usize,
    merge: LayoutMerge,
    device: &Device,
) -> Result<Tensor> {
    validate_boxes(boxes)?;
    let (n, d) = objects.dims2()?;
    let (t_p, d2) = relations.dims2()?;
    if d != d2 || t_p != pairs.len() {
        return Err(Error::Data("layout inputs disagree on shapes".into()));
    }
    if pairs.iter().any(|(s, o)| *s >= n || *o >= n) {
        return Err(Error::Data("pair index out of range".into()));
    }

    let obj = objects.to_vec2::<f32>()?;
    let rel = relations.to_vec2::<f32>()?;

    let px: Vec<(usize, usize, usize, usize)> = boxes
        .iter()
        .map(|b| {
            let (x0, x1) = pixel_range(b[0], b[2], width);
            let (y0, y1) = pixel_range(b[1], b[3], height);
            (x0, x1, y0, y1)
        })
        .collect();
    for (i, p) in px.iter().enumerate() {
        if p.0 == p.1 || p.2 == p.3 {
            log::debug!("box {i} rasterizes to no pixels at {width}x{height}");
        }
    }

    let hw = height * width;
    let mut out = vec![0f32; d * hw];
    let mut covered = vec![false; hw];

    // Merge one phrase's pixel value into the output.
    let blend = |pix: usize, vec_a: &[f32], vec_b: Option<&[f32]>, out: &mut Vec<f32>, covered: &mut Vec<bool>| {
        for ch in 0..d {
            let mut v = vec_a[ch];
            if let Some(b) = vec_b {
                v = v.max(b[ch]); // within-phrase box overlap
            }
            let slot = ch * hw + pix;
            if covered[pix] {
                match merge {
                    LayoutMerge::Max => out[slot] = out[slot].max(v),
                    LayoutMerge::SumThenMax => out[slot] += v,
                }
            } else {
                out[slot] = v;
            }
        }
        covered[pix] = true;
    };

    for (j, (s, o)) in pairs.iter().enumerate() {
        let (sx0, sx1, sy0, sy1) = px[*s];
        let (ox0, ox1, oy0, oy1) = px[*o];
        let ub = ops::box_union(boxes[*s], boxes[*o]);
        let (ux0, ux1) = pixel_range(ub[0], ub[2], width);
        let (uy0, uy1) = pixel_range(ub[1], ub[3], height);
        for y in uy0..uy1 {
            for x in ux0..ux1 {
                let pix = y * width + x;
                let in_s = x >= sx0 && x < sx1 && y >= sy0 && y < sy1;
                let in_o = x >= ox0 && x < ox1 && y >= oy0 && y < oy1;
                match (in_s, in_o) {
                    (true, true) => blend(pix, &obj[*s], Some(&obj[*o]), &mut out, &mut covered),
                    (true, false) => blend(pix, &obj[*s], None, &mut out, &mut covered),
                    (false, true) => blend(pix, &obj[*o], None, &mut out, &mut covered),
                    (false, false) => blend(pix, &rel[j], None, &mut out, &mut covered),
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (d, height, width), device)?)
}

/// Decoder turning the global graph vector into a spatial semantic map:
/// learned projection to 4x4, then (nearest x2 upsample, conv, norm, relu)
/// blocks until the requested resolution.
pub struct GraphMapDecoder {
    fc: Linear,
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    channels: usize,
}

impl GraphMapDecoder {
    pub fn new(
        reg: &mut ParamRegistry,
        d_phrase: usize,
        channels: usize,
        max_resolution: usize,
    ) -> Result<Self> {
        let n_blocks = Self::blocks_for(max_resolution)?;
        let fc = Linear::new(reg, "ligmap.fc", d_phrase, channels * 16)?;
        let mut blocks = Vec::new();
        for i in 0..n_blocks {
            blocks.push((
                Conv2d::new(reg, &format!("ligmap.block{i}.conv"), channels, channels, 3, 1, 1)?,
                BatchNorm2d::new(reg, &format!("ligmap.block{i}.bn"), channels)?,
            ));
        }
        Ok(GraphMapDecoder {
            fc,
            blocks,
            channels,
        })
    }

    fn blocks_for(resolution: usize) -> Result<usize> {
        let mut r = 4usize;
        let mut k = 0;
        while r < resolution {
            r *= 2;
            k += 1;
        }
        if r != resolution {
            return Err(Error::Config(format!(
                "graph map resolution {resolution} is not 4 * 2^k"
            )));
        }
        Ok(k)
    }

    /// (B, 128) -> (B, C_g, res, res)
    pub fn forward(&self, global: &Tensor, resolution: usize, train: bool) -> Result<Tensor> {
        let k = Self::blocks_for(resolution)?;
        if k > self.blocks.len() {
            return Err(Error::Config(format!(
                "decoder built for up to {} blocks, need {k}",
                self.blocks.len()
            )));
        }
        let (b, _d) = global.dims2()?;
        let mut x = self
            .fc
            .forward(global)?
            .reshape((b, self.channels, 4, 4))?;
        for (conv, bn) in self.blocks.iter().take(k) {
            let (_b, _c, h, w) = x.dims4()?;
            x = x.upsample_nearest2d(h * 2, w * 2)?;
            x = conv.forward(&x)?;
            x = bn.forward(&x, train)?.relu()?;
        }
        Ok(x)
    }
}

/// Per-pixel attention over phrase vectors: hidden features are projected to
/// the phrase width by a learned 1x1 map, each pixel's scores over phrases
/// pass through a softmax, and the context is the weighted phrase sum.
pub struct PhraseContext {
    proj: Conv2d,
}

impl PhraseContext {
    pub fn new(reg: &mut ParamRegistry, name: &str, hidden_channels: usize, d_phrase: usize) -> Result<Self> {
        Ok(PhraseContext {
            proj: Conv2d::new(reg, name, hidden_channels, d_phrase, 1, 1, 0)?,
        })
    }

    /// `phrases`: (T_p, D); `hidden`: (1, C_h, H, W) -> (1, D, H, W).
    pub fn forward(&self, phrases: &Tensor, hidden: &Tensor) -> Result<Tensor> {
        let (t_p, d) = phrases.dims2()?;
        if t_p == 0 {
            return Err(Error::Data("no phrases for context attention".into()));
        }
        let (b, _c, h, w) = hidden.dims4()?;
        if b != 1 {
            return Err(Error::Data("phrase context runs per image".into()));
        }
        let p = self.proj.forward(hidden)?; // (1, D, H, W)
        let flat = p.reshape((d, h * w))?.t()?.contiguous()?; // (HW, D)
        let scores = flat.matmul(&phrases.t()?)?; // (HW, T_p)
        let beta = ops::softmax(&scores, 1)?;
        let ctx = beta.matmul(phrases)?; // (HW, D)
        Ok(ctx.t()?.reshape((1, d, h, w))?)
    }
}

struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let skip = if cin != cout {
            Some(Conv2d::new(reg, &format!("{name}.skip"), cin, cout, 1, 1, 0)?)
        } else {
            None
        };
        Ok(ResBlock {
            conv1: Conv2d::new(reg, &format!("{name}.conv1"), cin, cout, 3, 1, 1)?,
            bn1: BatchNorm2d::new(reg, &format!("{name}.bn1"), cout)?,
            conv2: Conv2d::new(reg, &format!("{name}.conv2"), cout, cout, 3, 1, 1)?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let path = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let path = self.conv2.forward(&path)?;
        let idn = match &self.skip {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((path + idn)?)
    }
}

/// Hidden feature aggregator for one stage: channel concat of the stage's
/// inputs, then two residual blocks projecting to the fused width.
pub struct Aggregator {
    block1: ResBlock,
    block2: ResBlock,
    expected_in: usize,
}

impl Aggregator {
    pub fn new(reg: &mut ParamRegistry, name: &str, in_channels: usize, fused: usize) -> Result<Self> {
        Ok(Aggregator {
            block1: ResBlock::new(reg, &format!("{name}.res1"), in_channels, fused)?,
            block2: ResBlock::new(reg, &format!("{name}.res2"), fused, fused)?,
            expected_in: in_channels,
        })
    }

    /// Inputs must share spatial dims; concatenated along channels.
    pub fn forward(&self, inputs: &[&Tensor], train: bool) -> Result<Tensor> {
        let (_b, _c, h, w) = inputs[0].dims4()?;
        for t in inputs {
            let (_b2, _c2, h2, w2) = t.dims4()?;
            if h2 != h || w2 != w {
                return Err(Error::Data(format!(
                    "aggregator inputs disagree on spatial dims: {h}x{w} vs {h2}x{w2}"
                )));
            }
        }
        let cat = Tensor::cat(inputs, 1)?;
        let (_b, c, _h, _w) = cat.dims4()?;
        if c != self.expected_in {
            return Err(Error::Data(format!(
                "aggregator expected {} input channels, got {c}",
                self.expected_in
            )));
        }
        let x = self.block1.forward(&cat, train)?;
        self.block2.forward(&x, train)
    }
}

/// All composer parameters for the generator side.
pub struct Composer {
    pub box_regressor: BoxRegressor,
    pub graph_map: GraphMapDecoder,
    /// One phrase-context head per stage >= 1.
    pub contexts: Vec<PhraseContext>,
    /// One aggregator per stage.
    pub aggregators: Vec<Aggregator>,
    pub dims: ComposerDims,
}

/// Channel widths after applying the configured scale.
#[derive(Debug, Clone, Copy)]
pub struct ComposerDims {
    pub d_phrase: usize,
    pub lig: usize,
    pub fused: usize,
    pub hidden: usize,
}

impl Composer {
    pub fn new(reg: &mut ParamRegistry, cfg: &ModelConfig) -> Result<Self> {
        let dims = ComposerDims {
            d_phrase: cfg.d_phrase,
            lig: cfg.scaled(cfg.lig_channels),
            fused: cfg.scaled(cfg.fused_channels),
            hidden: cfg.scaled(cfg.hidden_channels),
        };
        let box_regressor = BoxRegressor::new(reg, cfg.d_phrase, cfg.min_box_extent)?;
        let lig_max_res = if cfg.lig_in_later_stages {
            cfg.max_resolution() / 2
        } else {
            64
        };
        let graph_map = GraphMapDecoder::new(reg, cfg.d_phrase, dims.lig, lig_max_res.max(64))?;
        let mut contexts = Vec::new();
        let mut aggregators = Vec::new();
        for stage in 0..cfg.stages {
            if stage == 0 {
                aggregators.push(Aggregator::new(
                    reg,
                    "hfa.stage0",
                    dims.d_phrase + dims.lig,
                    dims.fused,
                )?);
            } else {
                contexts.push(PhraseContext::new(
                    reg,
                    &format!("hfa.stage{stage}.context"),
                    dims.hidden,
                    dims.d_phrase,
                )?);
                let mut cin = dims.hidden + 2 * dims.d_phrase;
                if cfg.lig_in_later_stages {
                    cin += dims.lig;
                }
                aggregators.push(Aggregator::new(
                    reg,
                    &format!("hfa.stage{stage}"),
                    cin,
                    dims.fused,
                )?);
            }
        }
        Ok(Composer {
            box_regressor,
            graph_map,
            contexts,
            aggregators,
            dims,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use candle_core::IndexOp;

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn zero_weight_regressor_emits_centered_minimal_box() {
        let mut reg = ParamRegistry::new(0, &dev());
        let brn = BoxRegressor::new(&mut reg, 128, 1.0 / 32.0).unwrap();
        brn.fc1.w.set(&brn.fc1.w.as_tensor().zeros_like().unwrap()).unwrap();
        brn.fc2.w.set(&brn.fc2.w.as_tensor().zeros_like().unwrap()).unwrap();
        let v = Tensor::randn(0f32, 1f32, (2, 128), &dev()).unwrap();
        let boxes = brn.predict(&v).unwrap();
        let eps = 1.0 / 32.0;
        for b in &boxes.boxes {
            assert!((b[0] - 0.5).abs() < 1e-6);
            assert!((b[1] - 0.5).abs() < 1e-6);
            assert!((b[2] - (0.5 + eps as f32)).abs() < 1e-6);
            assert!((b[3] - (0.5 + eps as f32)).abs() < 1e-6);
        }
    }

    #[test]
    fn regressor_outputs_are_always_valid() {
        let mut reg = ParamRegistry::new(3, &dev());
        let brn = BoxRegressor::new(&mut reg, 16, 1.0 / 32.0).unwrap();
        let v = (Tensor::randn(0f32, 1f32, (64, 16), &dev()).unwrap() * 10.0).unwrap();
        let boxes = brn.predict(&v).unwrap();
        for b in &boxes.boxes {
            assert!(b[0] >= 0.0 && b[1] >= 0.0 && b[2] <= 1.0 && b[3] <= 1.0, "{b:?}");
            assert!(b[0] < b[2] && b[1] < b[3], "{b:?}");
        }
    }

    /// Brute-force compositor: per pixel, loop every phrase and apply the
    /// region rules directly.
    #[allow(clippy::too_many_arguments)]
    fn oracle_layout(
        obj: &[Vec<f32>],
        rel: &[Vec<f32>],
        boxes: &[[f32; 4]],
        pairs: &[(usize, usize)],
        h: usize,
        w: usize,
    ) -> Vec<f32> {
        let d = obj[0].len();
        let inside = |b: &[f32; 4], x: usize, y: usize| -> bool {
            let cx = (x as f32 + 0.5) / w as f32;
            let cy = (y as f32 + 0.5) / h as f32;
            cx >= b[0] && cx < b[2] && cy >= b[1] && cy < b[3]
        };
        let mut out = vec![0f32; d * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc: Option<Vec<f32>> = None;
                for (j, (s, o)) in pairs.iter().enumerate() {
                    let u = crate::nn::ops::box_union(boxes[*s], boxes[*o]);
                    if !inside(&u, x, y) {
                        continue;
                    }
                    let val: Vec<f32> = match (inside(&boxes[*s], x, y), inside(&boxes[*o], x, y)) {
                        (true, true) => obj[*s]
                            .iter()
                            .zip(&obj[*o])
                            .map(|(a, b)| a.max(*b))
                            .collect(),
                        (true, false) => obj[*s].clone(),
                        (false, true) => obj[*o].clone(),
                        (false, false) => rel[j].clone(),
                    };
                    acc = Some(match acc {
                        None => val,
                        Some(prev) => prev.iter().zip(&val).map(|(a, b)| a.max(*b)).collect(),
                    });
                }
                if let Some(v) = acc {
                    for ch in 0..d {
                        out[ch * h * w + y * w + x] = v[ch];
                    }
                }
            }
        }
        out
    }

    fn random_box(s: &mut Stream) -> [f32; 4] {
        let x0 = s.f32() * 0.7;
        let y0 = s.f32() * 0.7;
        let x1 = (x0 + 0.15 + s.f32() * (1.0 - x0 - 0.15)).min(1.0);
        let y1 = (y0 + 0.15 + s.f32() * (1.0 - y0 - 0.15)).min(1.0);
        [x0, y0, x1, y1]
    }

    #[test]
    fn layout_matches_bruteforce_oracle_exactly() {
        let mut s = Stream::new(42, "layout-oracle");
        for trial in 0..50 {
            let n = 2 + s.usize_below(3);
            let pairs = crate::graph::ordered_pairs(n).unwrap();
            let d = 3;
            let obj: Vec<Vec<f32>> = (0..n).map(|_| s.normal_vec(d)).collect();
            let rel: Vec<Vec<f32>> = (0..pairs.len()).map(|_| s.normal_vec(d)).collect();
            let boxes: Vec<[f32; 4]> = (0..n).map(|_| random_box(&mut s)).collect();

            let flat = |m: &Vec<Vec<f32>>| -> Vec<f32> { m.iter().flatten().copied().collect() };
            let objects = Tensor::from_vec(flat(&obj), (n, d), &dev()).unwrap();
            let relations = Tensor::from_vec(flat(&rel), (pairs.len(), d), &dev()).unwrap();
            let got = compose_phrase_layout(
                &objects,
                &relations,
                &boxes,
                &pairs,
                8,
                8,
                LayoutMerge::Max,
                &dev(),
            )
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
            let expect = oracle_layout(&obj, &rel, &boxes, &pairs, 8, 8);
            assert_eq!(got, expect, "trial {trial} diverged from oracle");
        }
    }

    #[test]
    fn layout_is_invariant_to_phrase_permutation() {
        let mut s = Stream::new(7, "layout-perm");
        let n = 3;
        let pairs = crate::graph::ordered_pairs(n).unwrap();
        let d = 4;
        let objects = Tensor::randn(0f32, 1f32, (n, d), &dev()).unwrap();
        let relations = Tensor::randn(0f32, 1f32, (pairs.len(), d), &dev()).unwrap();
        let boxes: Vec<[f32; 4]> = (0..n).map(|_| random_box(&mut s)).collect();

        let l1 = compose_phrase_layout(
            &objects, &relations, &boxes, &pairs, 16, 16, LayoutMerge::Max, &dev(),
        )
        .unwrap();

        let perm = s.permutation(pairs.len());
        let idx = Tensor::from_vec(
            perm.iter().map(|&j| j as u32).collect::<Vec<u32>>(),
            perm.len(),
            &dev(),
        )
        .unwrap();
        let pairs2: Vec<(usize, usize)> = perm.iter().map(|&j| pairs[j]).collect();
        let rel2 = relations.index_select(&idx, 0).unwrap();
        let l2 = compose_phrase_layout(
            &objects, &rel2, &boxes, &pairs2, 16, 16, LayoutMerge::Max, &dev(),
        )
        .unwrap();
        let a = l1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = l2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disjoint_boxes_place_object_and_relation_vectors() {
        // Two objects in opposite corners; check a pixel of each region.
        let _d = 2;
        let objects = Tensor::new(&[[1f32, -1.], [2., -2.]], &dev()).unwrap();
        let relations = Tensor::new(&[[5f32, -5.], [7., -7.]], &dev()).unwrap();
        let boxes = vec![[0.0, 0.0, 0.25, 0.25], [0.75, 0.75, 1.0, 1.0]];
        let pairs = vec![(0usize, 1usize), (1, 0)];
        let l = compose_phrase_layout(
            &objects, &relations, &boxes, &pairs, 8, 8, LayoutMerge::Max, &dev(),
        )
        .unwrap();
        // Pixel (0,0) lies in box 0 only.
        assert_eq!(l.i((0, 0, 0)).unwrap().to_scalar::<f32>().unwrap(), 1.0);
        assert_eq!(l.i((1, 0, 0)).unwrap().to_scalar::<f32>().unwrap(), -1.0);
        // Pixel (7,7) in box 1 only.
        assert_eq!(l.i((0, 7, 7)).unwrap().to_scalar::<f32>().unwrap(), 2.0);
        // Union interior gap, e.g. (4,4): max of the two relation vectors.
        assert_eq!(l.i((0, 4, 4)).unwrap().to_scalar::<f32>().unwrap(), 7.0);
        assert_eq!(l.i((1, 4, 4)).unwrap().to_scalar::<f32>().unwrap(), -5.0);
    }

    #[test]
    fn full_frame_boxes_leave_no_relation_region() {
        let d = 3;
        let objects = Tensor::randn(0f32, 1f32, (2, d), &dev()).unwrap();
        let relations = (Tensor::randn(0f32, 1f32, (2, d), &dev()).unwrap() + 100.0).unwrap();
        let boxes = vec![[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]];
        let pairs = vec![(0usize, 1usize), (1, 0)];
        let l = compose_phrase_layout(
            &objects, &relations, &boxes, &pairs, 4, 4, LayoutMerge::Max, &dev(),
        )
        .unwrap();
        // Every pixel = elementwise max of the two object vectors; the large
        // relation vectors never appear.
        let o = objects.to_vec2::<f32>().unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..d {
                    let expect = o[0][ch].max(o[1][ch]);
                    let got = l.i((ch, y, x)).unwrap().to_scalar::<f32>().unwrap();
                    assert_eq!(got, expect);
                }
            }
        }
    }

    #[test]
    fn layout_downsample_consistency_on_aligned_boxes() {
        // Boxes aligned to the 8-pixel grid of the coarse map: max-pooling the
        // fine map over 4x4 blocks equals the coarse map.
        let n = 2;
        let pairs = crate::graph::ordered_pairs(n).unwrap();
        let d = 3;
        let objects = Tensor::randn(0f32, 1f32, (n, d), &dev()).unwrap();
        let relations = Tensor::randn(0f32, 1f32, (pairs.len(), d), &dev()).unwrap();
        let boxes = vec![[0.0, 0.0, 0.5, 0.5], [0.5, 0.5, 1.0, 1.0]];
        let coarse = compose_phrase_layout(
            &objects, &relations, &boxes, &pairs, 8, 8, LayoutMerge::Max, &dev(),
        )
        .unwrap();
        let fine = compose_phrase_layout(
            &objects, &relations, &boxes, &pairs, 32, 32, LayoutMerge::Max, &dev(),
        )
        .unwrap();
        let pooled = fine.unsqueeze(0).unwrap().max_pool2d(4).unwrap().squeeze(0).unwrap();
        let a = coarse.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = pooled.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        // Uncovered pixels are zero in both; covered pixels match exactly.
        assert_eq!(a, b);
    }

    #[test]
    fn graph_map_shapes_and_determinism() {
        let mut reg = ParamRegistry::new(5, &dev());
        let dec = GraphMapDecoder::new(&mut reg, 128, 64, 64).unwrap();
        let g = Tensor::randn(0f32, 1f32, (2, 128), &dev()).unwrap();
        let m = dec.forward(&g, 64, false).unwrap();
        assert_eq!(m.dims(), &[2, 64, 64, 64]);
        let m2 = dec.forward(&g, 64, false).unwrap();
        let dmax = (m - m2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(dmax, 0.0);
        // Different global vectors give different maps.
        let g2 = Tensor::randn(0f32, 1f32, (2, 128), &dev()).unwrap();
        let m3 = dec.forward(&g2, 64, false).unwrap();
        let d2 = (dec.forward(&g, 64, false).unwrap() - m3)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d2 > 1e-5);
        // Non power-of-two resolution is a config error.
        assert!(dec.forward(&g, 48, false).is_err());
    }

    #[test]
    fn phrase_context_singleton_and_equal_phrases() {
        let mut reg = ParamRegistry::new(6, &dev());
        let pc = PhraseContext::new(&mut reg, "pc", 8, 5).unwrap();
        let hidden = Tensor::randn(0f32, 1f32, (1, 8, 4, 4), &dev()).unwrap();

        // One phrase: every pixel context equals it.
        let u = Tensor::randn(0f32, 1f32, (1, 5), &dev()).unwrap();
        let c = pc.forward(&u, &hidden).unwrap();
        let want = u.i(0).unwrap().to_vec1::<f32>().unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for ch in 0..5 {
                    let got = c.i((0, ch, y, x)).unwrap().to_scalar::<f32>().unwrap();
                    assert!((got - want[ch]).abs() < 1e-6);
                }
            }
        }

        // All phrases equal: context constant regardless of hidden.
        let row = Tensor::randn(0f32, 1f32, (1, 5), &dev()).unwrap();
        let u_eq = row.broadcast_as((4, 5)).unwrap().contiguous().unwrap();
        let c2 = pc.forward(&u_eq, &hidden).unwrap();
        let want2 = row.i(0).unwrap().to_vec1::<f32>().unwrap();
        for ch in 0..5 {
            let got = c2.i((0, ch, 2, 3)).unwrap().to_scalar::<f32>().unwrap();
            assert!((got - want2[ch]).abs() < 1e-5);
        }
    }

    #[test]
    fn phrase_context_matches_softmax_oracle() {
        let mut reg = ParamRegistry::new(8, &dev());
        let pc = PhraseContext::new(&mut reg, "pc", 4, 3).unwrap();
        let hidden = Tensor::randn(0f32, 1f32, (1, 4, 2, 2), &dev()).unwrap();
        let u = Tensor::randn(0f32, 1f32, (2, 3), &dev()).unwrap();
        let c = pc.forward(&u, &hidden).unwrap();

        // Oracle: project with the same 1x1 kernel, then scalar softmax.
        let proj = pc.proj.forward(&hidden).unwrap(); // (1,3,2,2)
        let uv = u.to_vec2::<f32>().unwrap();
        for y in 0..2 {
            for x in 0..2 {
                let hj: Vec<f32> = (0..3)
                    .map(|ch| proj.i((0, ch, y, x)).unwrap().to_scalar::<f32>().unwrap())
                    .collect();
                let scores: Vec<f32> = uv
                    .iter()
                    .map(|um| um.iter().zip(&hj).map(|(a, b)| a * b).sum())
                    .collect();
                let mx = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f32 = exps.iter().sum();
                for ch in 0..3 {
                    let want: f32 = uv
                        .iter()
                        .zip(&exps)
                        .map(|(um, e)| um[ch] * e / z)
                        .sum();
                    let got = c.i((0, ch, y, x)).unwrap().to_scalar::<f32>().unwrap();
                    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
                }
                // Weights sum to 1 at every pixel by construction of softmax.
                let wsum: f32 = exps.iter().map(|e| e / z).sum();
                assert!((wsum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn aggregator_shapes_and_mismatch_error() {
        let mut reg = ParamRegistry::new(9, &dev());
        let agg = Aggregator::new(&mut reg, "hfa0", 192, 256).unwrap();
        let lphr = Tensor::randn(0f32, 1f32, (1, 128, 16, 16), &dev()).unwrap();
        let lig = Tensor::randn(0f32, 1f32, (1, 64, 16, 16), &dev()).unwrap();
        let fused = agg.forward(&[&lphr, &lig], true).unwrap();
        assert_eq!(fused.dims(), &[1, 256, 16, 16]);

        let wrong = Tensor::randn(0f32, 1f32, (1, 64, 8, 8), &dev()).unwrap();
        assert!(agg.forward(&[&lphr, &wrong], true).is_err());
    }

    #[test]
    fn composer_builds_with_scaled_channels() {
        let mut cfg = ModelConfig::default();
        cfg.channel_scale = 0.25;
        cfg.stages = 2;
        let mut reg = ParamRegistry::new(0, &dev());
        let comp = Composer::new(&mut reg, &cfg).unwrap();
        assert_eq!(comp.dims.lig, 16);
        assert_eq!(comp.dims.fused, 64);
        assert_eq!(comp.dims.hidden, 16);
        assert_eq!(comp.aggregators.len(), 2);
        assert_eq!(comp.contexts.len(), 1);
    }
}
