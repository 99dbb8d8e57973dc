//! Metrics: Inception Score over class posteriors, Fréchet distance between
//! Gaussian fits of feature activations, the desk-scale metric classifier,
//! and the qualitative sample-grid emitter.

use std::path::Path;

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector};

use crate::config::ModelConfig;
use crate::nn::layers::{Conv2d, Linear};
use crate::nn::{ops, ParamRegistry};
use crate::{Error, Result};

/// Gaussian fit of a set of activation rows.
#[derive(Debug, Clone)]
pub struct ActivationStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl ActivationStats {
    /// Fit from (n, d) rows; unbiased covariance.
    pub fn fit(rows: &[Vec<f32>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data("need at least 2 samples for stats".into()));
        }
        let d = rows[0].len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            for (i, x) in r.iter().enumerate() {
                mean[i] += *x as f64;
            }
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let x = DVector::from_iterator(d, r.iter().map(|v| *v as f64));
            let c = &x - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(ActivationStats { mean, cov, count: n })
    }
}

/// Symmetric PSD square root via eigendecomposition, clamping tiny negative
/// eigenvalues to zero.
fn sqrt_sym(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(Error::Numerical(format!(
                "matrix not PSD beyond tolerance: eigenvalue {v}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = eig.eigenvectors;
    Ok(&q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Fréchet distance between two Gaussian fits:
/// |mu_r - mu_f|^2 + tr(S_r + S_f - 2 (S_r S_f)^{1/2}).
///
/// The cross term uses the symmetric reduction sqrt(S) S_f sqrt(S); if the
/// decomposition rejects the inputs, a small diagonal jitter is applied once
/// and logged.
pub fn fid(real: &ActivationStats, fake: &ActivationStats) -> Result<f64> {
    if real.mean.len() != fake.mean.len() {
        return Err(Error::Data("stats dimensions differ".into()));
    }
    let compute = |sr: &DMatrix<f64>, sf: &DMatrix<f64>| -> Result<f64> {
        let root = sqrt_sym(sr, 1e-9)?;
        let inner = &root * sf * &root;
        let inner_sym = (&inner + inner.transpose()) * 0.5;
        let cross = sqrt_sym(&inner_sym, 1e-6)?;
        Ok(sr.trace() + sf.trace() - 2.0 * cross.trace())
    };
    let diff = &real.mean - &fake.mean;
    let mean_term = diff.dot(&diff);
    let trace_term = match compute(&real.cov, &fake.cov) {
        Ok(t) => t,
        Err(first) => {
            log::warn!("covariance square root failed ({first}); retrying with diagonal jitter");
            let d = real.cov.nrows();
            let jitter = DMatrix::identity(d, d) * 1e-6;
            compute(&(&real.cov + &jitter), &(&fake.cov + &jitter))?
        }
    };
    Ok(mean_term + trace_term)
}

/// Inception Score from per-image class posteriors (n, C): per split,
/// exp(mean_x KL(p(y|x) || p(y))); returns (mean, std) over splits.
pub fn inception_score(probs: &[Vec<f32>], n_splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if n_splits == 0 || n < n_splits {
        return Err(Error::Data(format!(
            "need at least {n_splits} images for {n_splits} splits, got {n}"
        )));
    }
    let mut scores = Vec::with_capacity(n_splits);
    let chunk = n / n_splits;
    for s in 0..n_splits {
        let lo = s * chunk;
        let hi = if s + 1 == n_splits { n } else { lo + chunk };
        let part = &probs[lo..hi];
        let c = part[0].len();
        let mut marginal = vec![0f64; c];
        for p in part {
            for (m, x) in marginal.iter_mut().zip(p) {
                *m += *x as f64;
            }
        }
        for m in marginal.iter_mut() {
            *m /= part.len() as f64;
        }
        let mut kl_sum = 0f64;
        for p in part {
            let mut kl = 0f64;
            for (x, m) in p.iter().zip(&marginal) {
                let x = *x as f64;
                if x > 1e-12 {
                    kl += x * (x.ln() - m.max(1e-12).ln());
                }
            }
            kl_sum += kl;
        }
        scores.push((kl_sum / part.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores
        .iter()
        .map(|s| (s - mean) * (s - mean))
        .sum::<f64>()
        / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Small CNN classifier trained on the synthetic shape classes so the metric
/// pipelines run without pretrained weights. Images are classified by their
/// largest object's category; penultimate features feed the Fréchet metric.
pub struct MetricClassifier {
    pub reg: ParamRegistry,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fc: Linear,
    head: Linear,
    pub n_classes: usize,
    pub feature_dim: usize,
}

pub const METRIC_INPUT: usize = 64;

impl MetricClassifier {
    pub fn new(seed: u64, device: &Device, n_classes: usize) -> Result<Self> {
        let mut reg = ParamRegistry::new(seed, device);
        let feature_dim = 64;
        Ok(MetricClassifier {
            conv1: Conv2d::new(&mut reg, "metric.conv1", 3, 16, 4, 2, 1)?,
            conv2: Conv2d::new(&mut reg, "metric.conv2", 16, 32, 4, 2, 1)?,
            conv3: Conv2d::new(&mut reg, "metric.conv3", 32, 64, 4, 2, 1)?,
            fc: Linear::new(&mut reg, "metric.fc", 64, feature_dim)?,
            head: Linear::new(&mut reg, "metric.head", feature_dim, n_classes)?,
            reg,
            n_classes,
            feature_dim,
        })
    }

    /// (B, 3, 64, 64) -> ((B, feat), (B, C) logits).
    pub fn forward(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let x = ops::bilinear_resize(images, METRIC_INPUT, METRIC_INPUT)?;
        let x = ops::leaky_relu(&self.conv1.forward(&x)?, 0.2)?;
        let x = ops::leaky_relu(&self.conv2.forward(&x)?, 0.2)?;
        let x = ops::leaky_relu(&self.conv3.forward(&x)?, 0.2)?;
        let pooled = x.mean(3)?.mean(2)?;
        let feat = ops::leaky_relu(&self.fc.forward(&pooled)?, 0.2)?;
        let logits = self.head.forward(&feat)?;
        Ok((feat, logits))
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Vec<Vec<f32>>> {
        let (_f, logits) = self.forward(images)?;
        Ok(ops::softmax(&logits, 1)?.to_vec2::<f32>()?)
    }

    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f32>>> {
        let (f, _l) = self.forward(images)?;
        Ok(f.to_vec2::<f32>()?)
    }
}

/// Training label for the metric classifier: the category of the image's
/// largest object.
pub fn dominant_label(ex: &crate::data::TrainingExample) -> u32 {
    let mut best = 0usize;
    let mut best_area = -1f32;
    for (i, b) in ex.boxes_gt.iter().enumerate() {
        let area = (b[2] - b[0]) * (b[3] - b[1]);
        if area > best_area {
            best_area = area;
            best = i;
        }
    }
    ex.object_label_ids[best] as u32
}

/// Train the desk-scale classifier on real images labeled by their dominant
/// object.
pub fn train_metric_classifier(
    loader: &crate::data::Loader,
    n_classes: usize,
    steps: usize,
    seed: u64,
) -> Result<MetricClassifier> {
    let device = Device::Cpu;
    let clf = MetricClassifier::new(crate::rng::derive_seed(seed, "metric-clf"), &device, n_classes)?;
    let mut opt = crate::training::Adam::new(clf.reg.trainable_vars(), 2e-3, 0.9, 0.999)?;
    let mut stream = crate::rng::Stream::new(seed, "metric-clf/data");
    let batch_size = 16usize;
    for step in 0..steps {
        let positions: Vec<usize> = (0..batch_size)
            .map(|_| stream.usize_below(loader.len()))
            .collect();
        let batch = loader.batch(&positions, step)?;
        if batch.examples.is_empty() {
            continue;
        }
        let res = loader.resolutions[0];
        let images = crate::pipeline::examples_to_batch(&batch.examples, res, &device)?;
        let labels: Vec<u32> = batch.examples.iter().map(dominant_label).collect();
        let labels = Tensor::from_vec(labels, batch.examples.len(), &device)?;
        let (_f, logits) = clf.forward(&images)?;
        let loss = crate::training::losses::cross_entropy(&logits, &labels)?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }
    Ok(clf)
}

#[derive(Debug, serde::Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub n_images: usize,
    pub inception_score: Option<(f64, f64)>,
    pub fid: Option<f64>,
}

/// Generate images for split records and score them with the classifier.
pub fn evaluate_split(
    pipeline: &crate::pipeline::Pipeline,
    loader: &crate::data::Loader,
    clf: &MetricClassifier,
    want_is: bool,
    want_fid: bool,
    n_images: usize,
    is_splits: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let n = n_images.min(loader.len());
    if n == 0 {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let mut stream = crate::rng::Stream::new(seed, "evaluate/z");
    let top = pipeline.cfg.model.max_resolution();
    let mut probs = Vec::new();
    let mut fake_feats = Vec::new();
    let mut real_feats = Vec::new();
    let chunk = 8usize;
    let mut pos = 0usize;
    while pos < n {
        let hi = (pos + chunk).min(n);
        let positions: Vec<usize> = (pos..hi).collect();
        let batch = loader.batch(&positions, 0)?;
        pos = hi;
        if batch.examples.is_empty() {
            continue;
        }
        let inputs: Vec<crate::pipeline::SceneInput> = batch
            .examples
            .iter()
            .map(crate::pipeline::SceneInput::from_example)
            .collect();
        let noise: Vec<Tensor> = (0..inputs.len())
            .map(|_| {
                Tensor::from_vec(
                    stream.normal_vec(pipeline.cfg.model.glove_dim),
                    pipeline.cfg.model.glove_dim,
                    &pipeline.device,
                )
                .map_err(Error::from)
            })
            .collect::<Result<_>>()?;
        let out = pipeline.generate_batch(&inputs, &noise, pipeline.cfg.model.stages, false)?;
        let fake_top = out.stage_images.last().expect("stages");
        if want_is {
            probs.extend(clf.probabilities(fake_top)?);
        }
        if want_fid {
            fake_feats.extend(clf.features(fake_top)?);
            let real = crate::pipeline::examples_to_batch(&batch.examples, top, &pipeline.device)?;
            real_feats.extend(clf.features(&real)?);
        }
    }
    let inception = if want_is {
        Some(inception_score(&probs, is_splits)?)
    } else {
        None
    };
    let fid_value = if want_fid {
        let rs = ActivationStats::fit(&real_feats)?;
        let fs = ActivationStats::fit(&fake_feats)?;
        Some(fid(&rs, &fs)?)
    } else {
        None
    };
    Ok(MetricsReport {
        split: loader.index.name.clone(),
        n_images: n,
        inception_score: inception,
        fid: fid_value,
    })
}

/// Minimal 5x7 glyphs for captions in the sample grid.
const GLYPHS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ,-";
#[rustfmt::skip]
const FONT: [[u8; 7]; 39] = [
    // Each byte is a 5-bit row, MSB left.
    [0x0E,0x11,0x11,0x1F,0x11,0x11,0x11], // a
    [0x1E,0x11,0x11,0x1E,0x11,0x11,0x1E], // b
    [0x0E,0x11,0x10,0x10,0x10,0x11,0x0E], // c
    [0x1E,0x11,0x11,0x11,0x11,0x11,0x1E], // d
    [0x1F,0x10,0x10,0x1E,0x10,0x10,0x1F], // e
    [0x1F,0x10,0x10,0x1E,0x10,0x10,0x10], // f
    [0x0E,0x11,0x10,0x17,0x11,0x11,0x0F], // g
    [0x11,0x11,0x11,0x1F,0x11,0x11,0x11], // h
    [0x0E,0x04,0x04,0x04,0x04,0x04,0x0E], // i
    [0x01,0x01,0x01,0x01,0x11,0x11,0x0E], // j
    [0x11,0x12,0x14,0x18,0x14,0x12,0x11], // k
    [0x10,0x10,0x10,0x10,0x10,0x10,0x1F], // l
    [0x11,0x1B,0x15,0x15,0x11,0x11,0x11], // m
    [0x11,0x19,0x15,0x13,0x11,0x11,0x11], // n
    [0x0E,0x11,0x11,0x11,0x11,0x11,0x0E], // o
    [0x1E,0x11,0x11,0x1E,0x10,0x10,0x10], // p
    [0x0E,0x11,0x11,0x11,0x15,0x12,0x0D], // q
    [0x1E,0x11,0x11,0x1E,0x14,0x12,0x11], // r
    [0x0F,0x10,0x10,0x0E,0x01,0x01,0x1E], // s
    [0x1F,0x04,0x04,0x04,0x04,0x04,0x04], // t
    [0x11,0x11,0x11,0x11,0x11,0x11,0x0E], // u
    [0x11,0x11,0x11,0x11,0x11,0x0A,0x04], // v
    [0x11,0x11,0x11,0x15,0x15,0x1B,0x11], // w
    [0x11,0x0A,0x04,0x04,0x04,0x0A,0x11], // x
    [0x11,0x11,0x0A,0x04,0x04,0x04,0x04], // y
    [0x1F,0x01,0x02,0x04,0x08,0x10,0x1F], // z
    [0x0E,0x11,0x13,0x15,0x19,0x11,0x0E], // 0
    [0x04,0x0C,0x04,0x04,0x04,0x04,0x0E], // 1
    [0x0E,0x11,0x01,0x06,0x08,0x10,0x1F], // 2
    [0x0E,0x11,0x01,0x06,0x01,0x11,0x0E], // 3
    [0x02,0x06,0x0A,0x12,0x1F,0x02,0x02], // 4
    [0x1F,0x10,0x1E,0x01,0x01,0x11,0x0E], // 5
    [0x0E,0x10,0x10,0x1E,0x11,0x11,0x0E], // 6
    [0x1F,0x01,0x02,0x04,0x08,0x08,0x08], // 7
    [0x0E,0x11,0x11,0x0E,0x11,0x11,0x0E], // 8
    [0x0E,0x11,0x11,0x0F,0x01,0x01,0x0E], // 9
    [0x00,0x00,0x00,0x00,0x00,0x00,0x00], // space
    [0x00,0x00,0x00,0x00,0x00,0x04,0x08], // comma
    [0x00,0x00,0x00,0x1F,0x00,0x00,0x00], // dash
];

fn draw_text(img: &mut image::RgbImage, text: &str, x0: u32, y0: u32, scale: u32) {
    let mut x = x0;
    let mut y = y0;
    for ch in text.to_lowercase().chars() {
        if x + 6 * scale >= img.width() {
            x = x0;
            y += 9 * scale;
        }
        if y + 8 * scale >= img.height() {
            break;
        }
        if let Some(gi) = GLYPHS.find(ch) {
            let glyph = &FONT[gi];
            for (ry, row) in glyph.iter().enumerate() {
                for rx in 0..5u32 {
                    if row & (0x10 >> rx) != 0 {
                        for sy in 0..scale {
                            for sx in 0..scale {
                                img.put_pixel(
                                    x + rx * scale + sx,
                                    y + ry as u32 * scale + sy,
                                    image::Rgb([20, 20, 20]),
                                );
                            }
                        }
                    }
                }
            }
        }
        x += 6 * scale;
    }
}

/// Copy a [-1,1] CHW tensor into the grid at (x0, y0), scaled to `cell`.
fn blit_tensor(img: &mut image::RgbImage, t: &Tensor, x0: u32, y0: u32, cell: usize) -> Result<()> {
    let up = ops::bilinear_resize(&t.unsqueeze(0)?, cell, cell)?.squeeze(0)?;
    let data = up.clamp(-1.0, 1.0)?.to_vec3::<f32>()?;
    for y in 0..cell {
        for x in 0..cell {
            let px = [
                ((data[0][y][x] + 1.0) * 127.5) as u8,
                ((data[1][y][x] + 1.0) * 127.5) as u8,
                ((data[2][y][x] + 1.0) * 127.5) as u8,
            ];
            img.put_pixel(x0 + x as u32, y0 + y as u32, image::Rgb(px));
        }
    }
    Ok(())
}

/// One grid row per example: a metadata tile (caption and object list) then
/// the generated image at each stage.
pub struct GridRow {
    pub caption: String,
    pub objects: String,
    pub stage_images: Vec<Tensor>,
}

pub fn emit_sample_grid(rows: &[GridRow], out_path: &Path, _cfg: &ModelConfig) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Data("no rows for sample grid".into()));
    }
    let cell = 160usize;
    let n_stages = rows[0].stage_images.len();
    let cols = n_stages + 1;
    let w = (cols * cell) as u32;
    let h = (rows.len() * cell) as u32;
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([240, 240, 240]));
    for (r, row) in rows.iter().enumerate() {
        let y0 = (r * cell) as u32;
        draw_text(&mut img, &row.objects, 4, y0 + 6, 1);
        draw_text(&mut img, &row.caption, 4, y0 + 40, 1);
        for (s, t) in row.stage_images.iter().enumerate() {
            blit_tensor(&mut img, t, ((s + 1) * cell) as u32, y0, cell)?;
        }
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(out_path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_posteriors_give_is_one() {
        let probs = vec![vec![0.2f32; 5]; 50];
        let (mean, std) = inception_score(&probs, 10).unwrap();
        assert!((mean - 1.0).abs() < 1e-9, "{mean}");
        assert!(std < 1e-9);
    }

    #[test]
    fn separated_one_hot_posteriors_give_is_n() {
        let n_classes = 4;
        let probs: Vec<Vec<f32>> = (0..40)
            .map(|i| {
                let mut p = vec![0f32; n_classes];
                p[i % n_classes] = 1.0;
                p
            })
            .collect();
        let (mean, _std) = inception_score(&probs, 10).unwrap();
        assert!((mean - n_classes as f64).abs() < 1e-6, "{mean}");
    }

    #[test]
    fn is_matches_direct_kl_oracle() {
        let mut s = crate::rng::Stream::new(3, "is-oracle");
        let probs: Vec<Vec<f32>> = (0..30)
            .map(|_| {
                let raw: Vec<f32> = (0..5).map(|_| s.f32() + 0.01).collect();
                let z: f32 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            })
            .collect();
        let (mean, _) = inception_score(&probs, 1).unwrap();
        // Oracle: direct summation at f64.
        let c = 5;
        let mut marginal = vec![0f64; c];
        for p in &probs {
            for (m, x) in marginal.iter_mut().zip(p) {
                *m += *x as f64;
            }
        }
        for m in marginal.iter_mut() {
            *m /= probs.len() as f64;
        }
        let mut kl_mean = 0f64;
        for p in &probs {
            for (x, m) in p.iter().zip(&marginal) {
                let x = *x as f64;
                kl_mean += x * (x.ln() - m.ln());
            }
        }
        kl_mean /= probs.len() as f64;
        assert!((mean - kl_mean.exp()).abs() < 1e-6);
    }

    #[test]
    fn is_bounds_hold() {
        let mut s = crate::rng::Stream::new(5, "is-bounds");
        let c = 6;
        let probs: Vec<Vec<f32>> = (0..60)
            .map(|_| {
                let raw: Vec<f32> = (0..c).map(|_| s.f32() + 1e-3).collect();
                let z: f32 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            })
            .collect();
        let (mean, _) = inception_score(&probs, 5).unwrap();
        assert!(mean >= 1.0 - 1e-9 && mean <= c as f64 + 1e-9);
    }

    #[test]
    fn too_few_images_for_splits_is_an_error() {
        let probs = vec![vec![0.5f32, 0.5]; 5];
        assert!(inception_score(&probs, 10).is_err());
    }

    fn random_stats(seed: u64, d: usize, n: usize) -> ActivationStats {
        let mut s = crate::rng::Stream::new(seed, "fid");
        let rows: Vec<Vec<f32>> = (0..n).map(|_| s.normal_vec(d)).collect();
        ActivationStats::fit(&rows).unwrap()
    }

    #[test]
    fn fid_of_identical_stats_is_zero() {
        let a = random_stats(1, 4, 50);
        let d = fid(&a, &a).unwrap();
        assert!(d.abs() < 1e-8, "{d}");
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative() {
        let a = random_stats(1, 4, 60);
        let b = random_stats(2, 4, 60);
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!(ab >= -1e-8);
    }

    #[test]
    fn mean_shift_only_gives_squared_norm() {
        let a = random_stats(3, 4, 200);
        let mut b = a.clone();
        // Shift the mean by a vector of norm 2.
        b.mean[0] += 2.0;
        let d = fid(&a, &b).unwrap();
        assert!((d - 4.0).abs() < 1e-9, "{d}");
    }

    /// Independent oracle: Cholesky route. tr sqrt(Sr Sf) equals
    /// tr sqrt(L^T Sr L) where Sf = L L^T.
    #[test]
    fn fid_matches_cholesky_eigen_oracle() {
        let a = random_stats(4, 4, 300);
        let b = random_stats(5, 4, 300);
        let got = fid(&a, &b).unwrap();

        let l = b
            .cov
            .clone()
            .cholesky()
            .expect("sample covariance is PD")
            .l();
        let inner = l.transpose() * &a.cov * &l;
        let inner = (&inner + inner.transpose()) * 0.5;
        let eig = inner.symmetric_eigen();
        let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
        let diff = &a.mean - &b.mean;
        let expect = diff.dot(&diff) + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
    }

    #[test]
    fn classifier_shapes() {
        let dev = Device::Cpu;
        let clf = MetricClassifier::new(0, &dev, 5).unwrap();
        let imgs = Tensor::randn(0f32, 1f32, (3, 3, 64, 64), &dev).unwrap();
        let probs = clf.probabilities(&imgs).unwrap();
        assert_eq!(probs.len(), 3);
        assert_eq!(probs[0].len(), 5);
        for p in &probs {
            let s: f32 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        let feats = clf.features(&imgs).unwrap();
        assert_eq!(feats[0].len(), clf.feature_dim);
    }

    #[test]
    fn sample_grid_writes_valid_image() {
        let dev = Device::Cpu;
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<GridRow> = (0..4)
            .map(|i| GridRow {
                caption: format!("a red block above a green tile {i}"),
                objects: "red block, green tile, blue slab".into(),
                stage_images: vec![Tensor::randn(0f32, 0.5f32, (3, 64, 64), &dev).unwrap()],
            })
            .collect();
        let path = dir.path().join("grid.png");
        emit_sample_grid(&rows, &path, &ModelConfig::default()).unwrap();
        let img = image::open(&path).unwrap();
        // 4 rows x (1 stage + metadata column).
        assert_eq!(img.width(), 2 * 160);
        assert_eq!(img.height(), 4 * 160);
    }
}
