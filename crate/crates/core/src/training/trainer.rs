//! Alternating adversarial training: one critic step and one generator step
//! per iteration, with resumable checkpoints and line-oriented metrics.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::checkpoint;
use super::losses::{
    box_l1, cross_entropy, d_loss_conditional, d_loss_unconditional, gen_nonsaturating, l1_mean,
    LossBundle,
};
use crate::damsm::{damsm_loss, GammaConfig, MatchingBatch};
use crate::data::{Loader, TrainingExample};
use crate::discriminators::{DiscriminatorSet, PhraseMode};
use crate::nn::ops;
use crate::pipeline::{examples_to_batch, GenOutputs, Pipeline, SceneInput};
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub g_terms: [f64; 8],
    pub g_total: f64,
    pub d_total: f64,
    /// Mean sigmoid score of the stage-0 patch critic on real images.
    pub d_real_mean: f64,
    /// Same on (detached) generated images.
    pub d_fake_mean: f64,
    /// Auxiliary classifier top-1 accuracy on this step's real crops.
    pub ac_accuracy: f64,
}

pub struct TrainReport {
    pub metrics: Vec<StepMetrics>,
    pub final_step: usize,
}

/// One phrase instance prepared for the phrase critics.
struct PhrasePick {
    image: usize,
    subject_box: [f32; 4],
    object_box: [f32; 4],
    union_box: [f32; 4],
    relation: Tensor,
}

pub struct Trainer<'d> {
    pub pipeline: Pipeline,
    pub discs: DiscriminatorSet,
    opt_g: Adam,
    opt_d: Adam,
    stream: Stream,
    loader: Loader<'d>,
    start_step: usize,
    gamma: GammaConfig,
}

impl<'d> Trainer<'d> {
    pub fn new(
        pipeline: Pipeline,
        loader: Loader<'d>,
        artifacts: &Path,
        resume: bool,
    ) -> Result<Self> {
        let cfg = pipeline.cfg.clone();
        let discs = DiscriminatorSet::new(
            crate::rng::derive_seed(cfg.train.seed, "discriminators"),
            &pipeline.device,
            &cfg.model,
            pipeline.n_categories,
        )?;
        let opt_g = Adam::new(
            pipeline.gen_reg.trainable_vars(),
            cfg.train.lr,
            cfg.train.beta1,
            cfg.train.beta2,
        )?;
        let opt_d = Adam::new(
            discs.reg.trainable_vars(),
            cfg.train.lr,
            cfg.train.beta1,
            cfg.train.beta2,
        )?;
        let stream = Stream::new(cfg.train.seed, "train/loop");
        let gamma = GammaConfig::from(&cfg.damsm);
        let mut trainer = Trainer {
            pipeline,
            discs,
            opt_g,
            opt_d,
            stream,
            loader,
            start_step: 0,
            gamma,
        };
        if resume {
            if let Some((step, stream)) = checkpoint::load_latest(
                artifacts,
                &mut trainer.pipeline,
                &mut trainer.discs,
                &mut trainer.opt_g,
                &mut trainer.opt_d,
            )? {
                trainer.start_step = step;
                trainer.stream = stream;
                log::info!("resumed from step {step}");
            }
        }
        Ok(trainer)
    }

    fn phrase_critics_enabled(&self) -> bool {
        let top = self.pipeline.cfg.model.max_resolution();
        top >= 256 || self.pipeline.cfg.train.phrase_d_on_low_res
    }

    /// Sample up to the configured number of phrases per image.
    fn pick_phrases(&mut self, out: &GenOutputs, inputs: &[SceneInput]) -> Result<Vec<PhrasePick>> {
        let max_pairs = self.pipeline.cfg.train.phrase_d_max_pairs;
        let mut picks = Vec::new();
        for (i, scene) in out.scenes.iter().enumerate() {
            let boxes = inputs[i]
                .gt_boxes
                .as_ref()
                .unwrap_or(&scene.layout_boxes)
                .clone();
            let t_p = scene.graph.pairs.len();
            for _ in 0..max_pairs.min(t_p) {
                let j = self.stream.usize_below(t_p);
                let (s, o) = scene.graph.pairs[j];
                let relation = scene.graph.relations.narrow(0, j, 1)?.detach();
                picks.push(PhrasePick {
                    image: i,
                    subject_box: boxes[s],
                    object_box: boxes[o],
                    union_box: ops::box_union(boxes[s], boxes[o]),
                    relation,
                });
            }
        }
        Ok(picks)
    }

    /// Encode the (subject, predicate, object) crops of every pick against
    /// one image batch. `diff` keeps the graph for generator updates.
    fn phrase_features(
        &self,
        images: &Tensor,
        picks: &[PhrasePick],
        diff: bool,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let enc = &self.pipeline.crop_encoder;
        let mut subs = Vec::new();
        let mut preds = Vec::new();
        let mut objs = Vec::new();
        let mut rels = Vec::new();
        for p in picks {
            let img = images.narrow(0, p.image, 1)?;
            let f = |b: [f32; 4]| -> Result<Tensor> {
                if diff {
                    enc.encode_crop_diff(&img, b)
                } else {
                    enc.encode_crop(&img, b)
                }
            };
            subs.push(f(p.subject_box)?);
            preds.push(f(p.union_box)?);
            objs.push(f(p.object_box)?);
            rels.push(p.relation.clone());
        }
        Ok((
            Tensor::cat(&subs.iter().collect::<Vec<_>>(), 0)?,
            Tensor::cat(&preds.iter().collect::<Vec<_>>(), 0)?,
            Tensor::cat(&objs.iter().collect::<Vec<_>>(), 0)?,
            Tensor::cat(&rels.iter().collect::<Vec<_>>(), 0)?,
        ))
    }

    /// Roll a (B, ...) tensor by one along the batch: the standard
    /// mismatched-condition construction.
    fn roll1(t: &Tensor) -> Result<Tensor> {
        let b = t.dims()[0];
        if b < 2 {
            return Err(Error::Data("cannot mismatch a batch of one".into()));
        }
        let head = t.narrow(0, 1, b - 1)?;
        let tail = t.narrow(0, 0, 1)?;
        Ok(Tensor::cat(&[&head, &tail], 0)?)
    }

    fn object_crop_plan(
        examples: &[TrainingExample],
    ) -> (Vec<[f32; 4]>, Vec<usize>, Vec<u32>) {
        let mut boxes = Vec::new();
        let mut owners = Vec::new();
        let mut labels = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            for (b, l) in ex.boxes_gt.iter().zip(&ex.object_label_ids) {
                boxes.push(*b);
                owners.push(i);
                labels.push(*l as u32);
            }
        }
        (boxes, owners, labels)
    }

    /// One full iteration. Returns None when the batch came up empty.
    pub fn train_step(&mut self, step: usize) -> Result<Option<StepMetrics>> {
        let cfg = self.pipeline.cfg.clone();
        let n_stages = cfg.model.stages;
        let batch_size = cfg.train.batch_size;

        let positions: Vec<usize> = (0..batch_size)
            .map(|_| self.stream.usize_below(self.loader.len()))
            .collect();
        let batch = self.loader.batch(&positions, step)?;
        if batch.examples.is_empty() {
            return Ok(None);
        }
        let examples = batch.examples;
        let b = examples.len();
        let inputs: Vec<SceneInput> = examples.iter().map(SceneInput::from_example).collect();
        let noise: Vec<Tensor> = (0..b)
            .map(|_| {
                Tensor::from_vec(
                    self.stream.normal_vec(cfg.model.glove_dim),
                    cfg.model.glove_dim,
                    &self.pipeline.device,
                )
                .map_err(Error::from)
            })
            .collect::<Result<_>>()?;
        let picks_seed: Vec<PhrasePick>;

        let fake = self.pipeline.generate_batch(&inputs, &noise, n_stages, true)?;
        picks_seed = self.pick_phrases(&fake, &inputs)?;

        let reals: Vec<Tensor> = (0..n_stages)
            .map(|s| {
                examples_to_batch(&examples, cfg.model.stage_resolution(s), &self.pipeline.device)
            })
            .collect::<Result<_>>()?;
        let top = n_stages - 1;

        let global_cond = Tensor::stack(
            &fake
                .scenes
                .iter()
                .map(|s| s.feats.global.clone())
                .collect::<Vec<_>>(),
            0,
        )?
        .detach();
        let caption_cond = if cfg.model.use_caption_patch_d {
            let t = inputs[0].caption_ids.len();
            let mut flat = Vec::with_capacity(b * t);
            for i in &inputs {
                flat.extend_from_slice(&i.caption_ids);
            }
            let ids = Tensor::from_vec(flat, (b, t), &self.pipeline.device)?;
            Some(self.pipeline.text_encoder.encode(&ids, None)?.global.detach())
        } else {
            None
        };

        // ---- critic step ----------------------------------------------------
        let mut d_total: Option<Tensor> = None;
        let add_d = |t: Tensor, acc: &mut Option<Tensor>| -> Result<()> {
            *acc = Some(match acc.take() {
                None => t,
                Some(a) => (a + t)?,
            });
            Ok(())
        };

        let mut d_real_mean = 0f64;
        let mut d_fake_mean = 0f64;
        for stage in 0..n_stages {
            let fake_img = fake.stage_images[stage].detach();
            let real_img = &reals[stage];
            let rl = self.discs.patch_unc[stage].forward(real_img, true)?;
            let fl = self.discs.patch_unc[stage].forward(&fake_img, true)?;
            if stage == 0 {
                d_real_mean = ops::sigmoid(&rl)?
                    .mean_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
                d_fake_mean = ops::sigmoid(&fl)?
                    .mean_all()?
                    .to_dtype(candle_core::DType::F64)?
                    .to_scalar::<f64>()?;
            }
            add_d(d_loss_unconditional(&rl, &fl)?, &mut d_total)?;

            let rm = self.discs.patch_graph[stage].forward(real_img, &global_cond, true)?;
            let fm = self.discs.patch_graph[stage].forward(&fake_img, &global_cond, true)?;
            let mis = if b >= 2 {
                Some(self.discs.patch_graph[stage].forward(
                    real_img,
                    &Self::roll1(&global_cond)?,
                    true,
                )?)
            } else {
                None
            };
            add_d(d_loss_conditional(&rm, &fm, mis.as_ref())?, &mut d_total)?;

            if let (Some(cap), true) = (&caption_cond, cfg.model.use_caption_patch_d) {
                let rm = self.discs.patch_caption[stage].forward(real_img, cap, true)?;
                let fm = self.discs.patch_caption[stage].forward(&fake_img, cap, true)?;
                let mis = if b >= 2 {
                    Some(self.discs.patch_caption[stage].forward(
                        real_img,
                        &Self::roll1(cap)?,
                        true,
                    )?)
                } else {
                    None
                };
                add_d(d_loss_conditional(&rm, &fm, mis.as_ref())?, &mut d_total)?;
            }
        }

        // Object critic: realness on real/fake crops plus classification on
        // real crops.
        let (obj_boxes, obj_owners, obj_labels) = Self::object_crop_plan(&examples);
        let (real_crops, kept) =
            self.discs
                .object
                .gather_crops(&reals[top], &obj_boxes, &obj_owners)?;
        let kept_labels: Vec<u32> = kept.iter().map(|&i| obj_labels[i]).collect();
        let labels_t = Tensor::from_vec(kept_labels.clone(), kept_labels.len(), &self.pipeline.device)?;
        let (real_obj_logits, real_obj_class) = self.discs.object.forward(&real_crops, true)?;
        let fake_top_detached = fake.stage_images[top].detach();
        let (fake_crops_d, _) =
            self.discs
                .object
                .gather_crops(&fake_top_detached, &obj_boxes, &obj_owners)?;
        let (fake_obj_logits, _) = self.discs.object.forward(&fake_crops_d, true)?;
        add_d(
            d_loss_unconditional(&real_obj_logits, &fake_obj_logits)?,
            &mut d_total,
        )?;
        add_d(cross_entropy(&real_obj_class, &labels_t)?, &mut d_total)?;

        let ac_accuracy = {
            let pred = real_obj_class.argmax(1)?.to_vec1::<u32>()?;
            let hits = pred
                .iter()
                .zip(&kept_labels)
                .filter(|(p, l)| p == l)
                .count();
            hits as f64 / kept_labels.len().max(1) as f64
        };

        // Phrase critics on the top stage.
        let phrase_on = self.phrase_critics_enabled() && !picks_seed.is_empty();
        if phrase_on {
            let (rs, rp, ro, rrel) = self.phrase_features(&reals[top], &picks_seed, false)?;
            let (fs, fp, fo, _) = self.phrase_features(&fake_top_detached, &picks_seed, false)?;
            let unc_real = self.discs.phrase.forward(
                &rs,
                Some(&rp),
                None,
                &ro,
                PhraseMode::Unconditional,
                true,
            )?;
            let unc_fake = self.discs.phrase.forward(
                &fs,
                Some(&fp),
                None,
                &fo,
                PhraseMode::Unconditional,
                true,
            )?;
            add_d(d_loss_unconditional(&unc_real, &unc_fake)?, &mut d_total)?;

            let con_real =
                self.discs
                    .phrase
                    .forward(&rs, None, Some(&rrel), &ro, PhraseMode::Conditional, true)?;
            let con_fake =
                self.discs
                    .phrase
                    .forward(&fs, None, Some(&rrel), &fo, PhraseMode::Conditional, true)?;
            let con_mis = if picks_seed.len() >= 2 {
                Some(self.discs.phrase.forward(
                    &rs,
                    None,
                    Some(&Self::roll1(&rrel)?),
                    &ro,
                    PhraseMode::Conditional,
                    true,
                )?)
            } else {
                None
            };
            add_d(
                d_loss_conditional(&con_real, &con_fake, con_mis.as_ref())?,
                &mut d_total,
            )?;
        }

        let d_total = d_total.expect("at least one critic term");
        let d_value = d_total.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !d_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite critic loss at step {step}: {d_value}"
            )));
        }
        let grads = d_total.backward()?;
        self.opt_d.step(&grads)?;

        // ---- generator step --------------------------------------------------
        let mut gan_img: Option<Tensor> = None;
        for stage in 0..n_stages {
            let fimg = &fake.stage_images[stage];
            let unc = gen_nonsaturating(&self.discs.patch_unc[stage].forward(fimg, true)?)?;
            let igc = gen_nonsaturating(
                &self.discs.patch_graph[stage].forward(fimg, &global_cond, true)?,
            )?;
            let mut term = (unc + igc)?;
            if let (Some(cap), true) = (&caption_cond, cfg.model.use_caption_patch_d) {
                term = (term
                    + gen_nonsaturating(
                        &self.discs.patch_caption[stage].forward(fimg, cap, true)?,
                    )?)?;
            }
            add_d(term, &mut gan_img)?;
        }
        let gan_img = gan_img.expect("stages exist");

        let mut l1_img: Option<Tensor> = None;
        let mut perc_img: Option<Tensor> = None;
        for stage in 0..n_stages {
            add_d(
                l1_mean(&fake.stage_images[stage], &reals[stage])?,
                &mut l1_img,
            )?;
            let ftaps = self
                .pipeline
                .crop_encoder
                .perceptual_features(&fake.stage_images[stage])?;
            let rtaps = self
                .pipeline
                .crop_encoder
                .perceptual_features(&reals[stage].detach())?;
            let mut acc: Option<Tensor> = None;
            for (ft, rt) in ftaps.iter().zip(&rtaps) {
                add_d(l1_mean(ft, &rt.detach())?, &mut acc)?;
            }
            let acc = (acc.expect("taps") / ftaps.len() as f64)?;
            add_d(acc, &mut perc_img)?;
        }

        let (fake_crops_g, kept_g) =
            self.discs
                .object
                .gather_crops(&fake.stage_images[top], &obj_boxes, &obj_owners)?;
        let (fake_obj_logits_g, fake_obj_class_g) = self.discs.object.forward(&fake_crops_g, true)?;
        let gan_obj = gen_nonsaturating(&fake_obj_logits_g)?;
        let labels_g: Vec<u32> = kept_g.iter().map(|&i| obj_labels[i]).collect();
        let labels_g = Tensor::from_vec(labels_g.clone(), labels_g.len(), &self.pipeline.device)?;
        let ac_obj = cross_entropy(&fake_obj_class_g, &labels_g)?;

        let gan_phr = if phrase_on {
            let (fs, fp, fo, frel) =
                self.phrase_features(&fake.stage_images[top], &picks_seed, true)?;
            let unc = gen_nonsaturating(&self.discs.phrase.forward(
                &fs,
                Some(&fp),
                None,
                &fo,
                PhraseMode::Unconditional,
                true,
            )?)?;
            let con = gen_nonsaturating(&self.discs.phrase.forward(
                &fs,
                None,
                Some(&frel),
                &fo,
                PhraseMode::Conditional,
                true,
            )?)?;
            (unc + con)?
        } else {
            Tensor::zeros((), candle_core::DType::F32, &self.pipeline.device)?
        };

        // Matching loss between generated images and their graphs.
        let damsm_phr = {
            let prepared = self
                .pipeline
                .region_encoder
                .prepare(&fake.stage_images[top])?;
            let feats = self.pipeline.region_encoder.encode_diff(&prepared)?;
            let mut key_sets = Vec::with_capacity(b);
            for i in 0..b {
                key_sets.push(feats.local.narrow(0, i, 1)?.squeeze(0)?.contiguous()?);
            }
            let mb = MatchingBatch {
                query_sets: fake
                    .scenes
                    .iter()
                    .map(|s| s.feats.phrases.detach())
                    .collect(),
                key_sets,
                global_queries: global_cond.clone(),
                global_keys: feats.global,
            };
            damsm_loss(&mb, &self.gamma)?.0
        };

        let mut box_term: Option<Tensor> = None;
        for (scene, input) in fake.scenes.iter().zip(&inputs) {
            let gt = input
                .gt_boxes
                .as_ref()
                .expect("training examples carry boxes");
            let flat: Vec<f32> = gt.iter().flatten().copied().collect();
            let gt_t = Tensor::from_vec(flat, (gt.len(), 4), &self.pipeline.device)?;
            add_d(box_l1(&scene.boxes_pred, &gt_t)?, &mut box_term)?;
        }
        let box_term = (box_term.expect("boxes") / b as f64)?;

        let bundle = LossBundle::new(vec![
            gan_img, l1_img.expect("stages"), perc_img.expect("stages"), gan_obj, ac_obj,
            gan_phr, damsm_phr, box_term,
        ])?;
        let g_terms = bundle.values()?;
        let g_total_t = bundle.total(&cfg.train.lambda)?;
        let g_total = g_total_t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let grads = g_total_t.backward()?;
        self.opt_g.step(&grads)?;

        Ok(Some(StepMetrics {
            step,
            g_terms,
            g_total,
            d_total: d_value,
            d_real_mean,
            d_fake_mean,
            ac_accuracy,
        }))
    }

    /// Run the configured number of iterations, logging metrics and saving
    /// periodic checkpoints.
    pub fn run(&mut self, artifacts: &Path) -> Result<TrainReport> {
        let cfg = self.pipeline.cfg.clone();
        std::fs::create_dir_all(artifacts.join("train"))?;
        let metrics_path = artifacts.join("train").join("metrics.jsonl");
        let mut metrics_file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?;
        let mut metrics = Vec::new();
        let mut step = self.start_step;
        while step < cfg.train.iterations {
            if let Some(m) = self.train_step(step)? {
                if step % cfg.train.log_every == 0 || step + 1 == cfg.train.iterations {
                    writeln!(metrics_file, "{}", serde_json::to_string(&m).expect("serializes"))?;
                    log::info!(
                        "step {step}: G {:.4} D {:.4} real {:.3} fake {:.3} ac {:.2}",
                        m.g_total,
                        m.d_total,
                        m.d_real_mean,
                        m.d_fake_mean,
                        m.ac_accuracy
                    );
                }
                metrics.push(m);
            }
            step += 1;
            if step % cfg.train.checkpoint_every == 0 || step == cfg.train.iterations {
                checkpoint::save(
                    artifacts,
                    step,
                    &self.pipeline,
                    &self.discs,
                    &self.opt_g,
                    &self.opt_d,
                    &self.stream,
                )?;
            }
        }
        Ok(TrainReport {
            metrics,
            final_step: step,
        })
    }

    pub fn save_checkpoint(&self, artifacts: &Path, step: usize) -> Result<PathBuf> {
        checkpoint::save(
            artifacts,
            step,
            &self.pipeline,
            &self.discs,
            &self.opt_g,
            &self.opt_d,
            &self.stream,
        )
    }
}
