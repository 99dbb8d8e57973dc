//! The two matching-pretraining stages. First the text encoder learns
//! word/region consistency; its weights then freeze. Second, the relation
//! estimator, graph encoder, object embeddings and the region projections
//! learn phrase/region consistency; they freeze too before adversarial
//! training.

use candle_core::Tensor;

use super::adam::Adam;
use crate::damsm::{damsm_loss, pairwise_scores, GammaConfig, MatchingBatch};
use crate::data::{Loader, TrainingExample};
use crate::pipeline::{examples_to_batch, Pipeline};
use crate::rng::Stream;
use crate::{Error, Result};

pub struct PretrainReport {
    pub losses: Vec<f32>,
}

impl PretrainReport {
    /// Mean of the first and last `window` losses.
    pub fn window_means(&self, window: usize) -> (f32, f32) {
        let n = self.losses.len();
        let w = window.min(n);
        let first: f32 = self.losses[..w].iter().sum::<f32>() / w as f32;
        let last: f32 = self.losses[n - w..].iter().sum::<f32>() / w as f32;
        (first, last)
    }
}

fn region_keys(pipeline: &Pipeline, examples: &[TrainingExample]) -> Result<(Vec<Tensor>, Tensor)> {
    let top_res = pipeline.cfg.model.max_resolution();
    let images = examples_to_batch(examples, top_res, &pipeline.device)?;
    let prepared = pipeline.region_encoder.prepare(&images)?;
    let feats = pipeline.region_encoder.encode(&prepared)?;
    let mut keys = Vec::with_capacity(examples.len());
    for i in 0..examples.len() {
        keys.push(feats.local.narrow(0, i, 1)?.squeeze(0)?.contiguous()?);
    }
    Ok((keys, feats.global))
}

/// Assemble a word-level matching batch: masked word features projected to
/// the joint width as queries, region features as keys.
fn word_batch(
    pipeline: &Pipeline,
    examples: &[TrainingExample],
    dropout: &mut Stream,
) -> Result<MatchingBatch> {
    let b = examples.len();
    let t = examples[0].caption_token_ids.len();
    let mut flat = Vec::with_capacity(b * t);
    for ex in examples {
        flat.extend_from_slice(&ex.caption_token_ids);
    }
    let ids = Tensor::from_vec(flat, (b, t), &pipeline.device)?;
    let words = pipeline.text_encoder.encode(&ids, Some(dropout))?;

    let mut query_sets = Vec::with_capacity(b);
    for i in 0..b {
        let rows = words.word_rows(i)?; // (T, 256)
        let mask = words.mask_row(i)?.to_vec1::<f32>()?;
        let valid: Vec<u32> = mask
            .iter()
            .enumerate()
            .filter(|(_i, &m)| m > 0.0)
            .map(|(i, _)| i as u32)
            .collect();
        let idx = Tensor::from_vec(valid.clone(), valid.len(), &pipeline.device)?;
        let picked = rows.index_select(&idx, 0)?;
        query_sets.push(pipeline.text_encoder.word_query_proj.forward(&picked)?);
    }
    let global_queries = pipeline.text_encoder.global_query_proj.forward(&words.global)?;
    let (key_sets, global_keys) = region_keys(pipeline, examples)?;
    Ok(MatchingBatch {
        query_sets,
        key_sets,
        global_queries,
        global_keys,
    })
}

/// Assemble a phrase-level matching batch from the implicit graphs.
fn phrase_batch(
    pipeline: &Pipeline,
    examples: &[TrainingExample],
    noise: &mut Stream,
) -> Result<MatchingBatch> {
    let inputs: Vec<crate::pipeline::SceneInput> = examples
        .iter()
        .map(crate::pipeline::SceneInput::from_example)
        .collect();
    let z: Vec<Tensor> = (0..examples.len())
        .map(|_| {
            Tensor::from_vec(
                noise.normal_vec(pipeline.cfg.model.glove_dim),
                pipeline.cfg.model.glove_dim,
                &pipeline.device,
            )
            .map_err(crate::Error::from)
        })
        .collect::<Result<_>>()?;
    let (scenes, global) = pipeline.build_scenes(&inputs, &z)?;
    let query_sets = scenes.iter().map(|s| s.feats.phrases.clone()).collect();
    let (key_sets, global_keys) = region_keys(pipeline, examples)?;
    Ok(MatchingBatch {
        query_sets,
        key_sets,
        global_queries: global,
        global_keys,
    })
}

fn draw_positions(stream: &mut Stream, len: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| stream.usize_below(len)).collect()
}

/// Stage one: train the text encoder (plus word/global projections and the
/// region projections) with the word-level matching loss.
pub fn pretrain_text_encoder(
    pipeline: &mut Pipeline,
    loader: &Loader,
    steps: usize,
) -> Result<PretrainReport> {
    let gamma = GammaConfig::from(&pipeline.cfg.damsm);
    let mut params = pipeline.text_encoder.reg.trainable_vars();
    params.extend(pipeline.region_encoder.proj_reg.trainable_vars());
    let mut opt = Adam::new(params, pipeline.cfg.damsm.lr, 0.5, 0.999)?;
    let mut data_stream = Stream::new(pipeline.cfg.train.seed, "pretrain-text/data");
    let mut dropout = Stream::new(pipeline.cfg.train.seed, "pretrain-text/dropout");
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let positions = draw_positions(&mut data_stream, loader.len(), pipeline.cfg.damsm.batch_size);
        let batch = loader.batch(&positions, step)?;
        if batch.examples.is_empty() {
            continue;
        }
        let mb = word_batch(pipeline, &batch.examples, &mut dropout)?;
        let (loss, parts) = damsm_loss(&mb, &gamma)?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
        let v = loss.to_scalar::<f32>()?;
        losses.push(v);
        if step % 50 == 0 {
            log::info!(
                "pretrain-text step {step}: loss {v:.4} (pq {:.3} pi {:.3} gq {:.3} gi {:.3})",
                parts.phrase_query,
                parts.phrase_image,
                parts.global_query,
                parts.global_image
            );
        }
    }
    Ok(PretrainReport { losses })
}

/// Stage two: train relation estimator, graph encoder, object embeddings and
/// the region projections with the phrase-level matching loss. The text
/// encoder is frozen.
pub fn pretrain_phrase_damsm(
    pipeline: &mut Pipeline,
    loader: &Loader,
    steps: usize,
) -> Result<PretrainReport> {
    let gamma = GammaConfig::from(&pipeline.cfg.damsm);
    let te_checksum = pipeline.text_encoder.reg.checksum()?;
    let mut params = pipeline.graph.reg.trainable_vars();
    params.extend(pipeline.region_encoder.proj_reg.trainable_vars());
    let mut opt = Adam::new(params, pipeline.cfg.damsm.lr, 0.5, 0.999)?;
    let mut data_stream = Stream::new(pipeline.cfg.train.seed, "pretrain-phrase/data");
    let mut noise = Stream::new(pipeline.cfg.train.seed, "pretrain-phrase/noise");
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let positions = draw_positions(&mut data_stream, loader.len(), pipeline.cfg.damsm.batch_size);
        let batch = loader.batch(&positions, step)?;
        if batch.examples.is_empty() {
            continue;
        }
        let mb = phrase_batch(pipeline, &batch.examples, &mut noise)?;
        let (loss, _parts) = damsm_loss(&mb, &gamma)?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
        let v = loss.to_scalar::<f32>()?;
        losses.push(v);
        if step % 50 == 0 {
            log::info!("pretrain-phrase step {step}: loss {v:.4}");
        }
    }
    let after = pipeline.text_encoder.reg.checksum()?;
    if after != te_checksum {
        return Err(Error::Checkpoint(
            "text encoder changed during phrase pretraining".into(),
        ));
    }
    Ok(PretrainReport { losses })
}

/// Fraction of held-out examples whose matched pair outscores a mismatched
/// one (cyclic shift pairing).
pub fn retrieval_accuracy(pipeline: &Pipeline, loader: &Loader, positions: &[usize]) -> Result<f32> {
    let gamma = GammaConfig::from(&pipeline.cfg.damsm);
    let batch = loader.batch(positions, usize::MAX / 2)?;
    if batch.examples.len() < 2 {
        return Err(Error::Data("need at least 2 held-out examples".into()));
    }
    let mut noise = Stream::new(pipeline.cfg.train.seed, "retrieval/noise");
    let mb = phrase_batch(pipeline, &batch.examples, &mut noise)?;
    let scores = pairwise_scores(&mb, &gamma)?.to_vec2::<f32>()?;
    let m = scores.len();
    let mut hits = 0;
    for i in 0..m {
        let matched = scores[i][i];
        let mismatched = scores[i][(i + 1) % m];
        if matched > mismatched {
            hits += 1;
        }
    }
    Ok(hits as f32 / m as f32)
}
