//! End-to-end wiring: caption encoding, implicit-graph construction, box
//! regression, map composition and the cascade, plus checkpoint plumbing for
//! the pretraining artifacts.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbones::{CropEncoder, RegionEncoder};
use crate::composer::Composer;
use crate::config::{BoxSource, PipelineConfig};
use crate::data::{Dataset, TrainingExample};
use crate::generator::ImageDecoder;
use crate::graph::{GraphFeatures, GraphModules, ImplicitGraph};
use crate::nn::ParamRegistry;
use crate::rng::Stream;
use crate::text_encoder::TextEncoder;
use crate::{Error, Result};

pub const GRAPH_CHECKPOINT_VERSION: &str = "graph-modules-v1";

/// One scene to render: labels, caption, optional ground-truth boxes.
pub struct SceneInput {
    pub labels: Vec<usize>,
    pub caption_ids: Vec<u32>,
    pub gt_boxes: Option<Vec<[f32; 4]>>,
}

impl SceneInput {
    pub fn from_example(ex: &TrainingExample) -> Self {
        SceneInput {
            labels: ex.object_label_ids.clone(),
            caption_ids: ex.caption_token_ids.clone(),
            gt_boxes: Some(ex.boxes_gt.clone()),
        }
    }
}

/// Per-image artifacts kept alongside the batched stage outputs.
pub struct SceneArtifacts {
    pub graph: ImplicitGraph,
    pub feats: GraphFeatures,
    /// (n, 4) differentiable predicted boxes.
    pub boxes_pred: Tensor,
    /// Boxes actually used for layout composition.
    pub layout_boxes: Vec<[f32; 4]>,
    pub labels: Vec<usize>,
}

/// Output of a full generation pass.
pub struct GenOutputs {
    /// One (B, 3, r, r) tensor per stage.
    pub stage_images: Vec<Tensor>,
    /// One (B, hidden, r, r) tensor per stage.
    pub stage_hidden: Vec<Tensor>,
    pub scenes: Vec<SceneArtifacts>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub device: Device,
    pub vocab_hash: String,
    pub n_categories: usize,
    /// (|V|, 50) caption-token word vectors.
    vocab_glove: Tensor,
    /// (C, 50) category-name vectors.
    category_glove: Tensor,
    pub text_encoder: TextEncoder,
    pub graph: GraphModules,
    pub region_encoder: RegionEncoder,
    pub crop_encoder: CropEncoder,
    /// Composer + decoder parameters (the trainable generator side).
    pub gen_reg: ParamRegistry,
    pub composer: Composer,
    pub decoder: ImageDecoder,
}

impl Pipeline {
    pub fn new(cfg: &PipelineConfig, dataset: &Dataset, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let vocab = &dataset.vocab;
        let glove_dim = cfg.model.glove_dim;
        if vocab.dim != glove_dim {
            return Err(Error::Config(format!(
                "vocabulary vectors are {}-d but model.glove_dim is {glove_dim}",
                vocab.dim
            )));
        }
        let flat: Vec<f32> = vocab.embedding_table.iter().flatten().copied().collect();
        let vocab_glove = Tensor::from_vec(flat, (vocab.len(), glove_dim), device)?;
        let cat_flat: Vec<f32> = dataset
            .categories
            .embeddings
            .iter()
            .flatten()
            .copied()
            .collect();
        let category_glove =
            Tensor::from_vec(cat_flat, (dataset.categories.len(), glove_dim), device)?;

        let text_encoder = TextEncoder::new(
            crate::rng::derive_seed(seed, "text_encoder"),
            device,
            vocab.len(),
            cfg.model.d_word,
            cfg.model.d_phrase,
            cfg.model.text_dropout,
        )?;
        let graph = GraphModules::new(
            crate::rng::derive_seed(seed, "graph"),
            device,
            dataset.categories.len(),
            glove_dim,
            cfg.model.d_word,
            cfg.model.d_phrase,
        )?;
        let region_encoder =
            RegionEncoder::new(crate::rng::derive_seed(seed, "region"), device, &cfg.model)?;
        let crop_encoder =
            CropEncoder::new(crate::rng::derive_seed(seed, "crop"), device, &cfg.model)?;

        let mut gen_reg = ParamRegistry::new(crate::rng::derive_seed(seed, "generator"), device);
        let composer = Composer::new(&mut gen_reg, &cfg.model)?;
        let decoder = ImageDecoder::new(&mut gen_reg, &cfg.model)?;

        Ok(Pipeline {
            cfg: cfg.clone(),
            device: device.clone(),
            vocab_hash: vocab.hash(),
            n_categories: dataset.categories.len(),
            vocab_glove,
            category_glove,
            text_encoder,
            graph,
            region_encoder,
            crop_encoder,
            gen_reg,
            composer,
            decoder,
        })
    }

    pub fn word_glove_for(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_vec(ids.to_vec(), ids.len(), &self.device)?;
        Ok(self.vocab_glove.index_select(&idx, 0)?)
    }

    pub fn object_glove_for(&self, labels: &[usize]) -> Result<Tensor> {
        for &l in labels {
            if l >= self.n_categories {
                return Err(Error::Data(format!(
                    "label {l} out of range for {} categories",
                    self.n_categories
                )));
            }
        }
        let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        let idx = Tensor::from_vec(ids, labels.len(), &self.device)?;
        Ok(self.category_glove.index_select(&idx, 0)?)
    }

    /// Encode captions and build per-image graphs and features.
    /// `noise` holds one (50,) vector per scene.
    pub fn build_scenes(
        &self,
        inputs: &[SceneInput],
        noise: &[Tensor],
    ) -> Result<(Vec<SceneArtifacts>, Tensor)> {
        if inputs.is_empty() {
            return Err(Error::Data("empty scene batch".into()));
        }
        let b = inputs.len();
        let t = inputs[0].caption_ids.len();
        let mut flat_ids = Vec::with_capacity(b * t);
        for input in inputs {
            if input.caption_ids.len() != t {
                return Err(Error::Data("caption lengths differ within batch".into()));
            }
            flat_ids.extend_from_slice(&input.caption_ids);
        }
        let ids = Tensor::from_vec(flat_ids, (b, t), &self.device)?;
        let words = self.text_encoder.encode(&ids, None)?;

        let mut scenes = Vec::with_capacity(b);
        let mut globals = Vec::with_capacity(b);
        for (i, input) in inputs.iter().enumerate() {
            let object_glove = self.object_glove_for(&input.labels)?;
            let word_glove = self.word_glove_for(&input.caption_ids)?;
            let word_rows = words.word_rows(i)?;
            let mask = words.mask_row(i)?;
            let graph = self.graph.build_graph(
                &input.labels,
                &object_glove,
                &word_glove,
                &word_rows,
                &mask,
                &noise[i],
            )?;
            let feats = self.graph.ige.encode(&graph)?;
            let boxes_pred = self.composer.box_regressor.forward(&feats.objects)?;
            let layout_boxes = match (&input.gt_boxes, self.cfg.model.box_source) {
                (Some(gt), BoxSource::GroundTruth) => gt.clone(),
                (None, BoxSource::GroundTruth) => {
                    return Err(Error::Data(
                        "box_source = ground_truth but no boxes supplied".into(),
                    ))
                }
                _ => {
                    let rows = boxes_pred.to_vec2::<f32>()?;
                    rows.iter().map(|r| [r[0], r[1], r[2], r[3]]).collect()
                }
            };
            globals.push(feats.global.clone());
            scenes.push(SceneArtifacts {
                graph,
                feats,
                boxes_pred,
                layout_boxes,
                labels: input.labels.clone(),
            });
        }
        let global = Tensor::stack(&globals, 0)?; // (B, 128)
        Ok((scenes, global))
    }

    /// Layout boxes for training: ground truth when available (the regressor
    /// trains through its own loss), predicted otherwise.
    pub fn training_layout_boxes(scene: &SceneArtifacts, input: &SceneInput) -> Vec<[f32; 4]> {
        input
            .gt_boxes
            .clone()
            .unwrap_or_else(|| scene.layout_boxes.clone())
    }

    fn layout_at(
        &self,
        scenes: &[SceneArtifacts],
        boxes: &[Vec<[f32; 4]>],
        resolution: usize,
    ) -> Result<Tensor> {
        let mut maps = Vec::with_capacity(scenes.len());
        for (scene, bx) in scenes.iter().zip(boxes) {
            let map = crate::composer::compose_phrase_layout(
                &scene.feats.objects,
                &scene.feats.relations,
                bx,
                &scene.graph.pairs,
                resolution,
                resolution,
                self.cfg.model.layout_merge,
                &self.device,
            )?;
            maps.push(map.unsqueeze(0)?);
        }
        Ok(Tensor::cat(&maps.iter().collect::<Vec<_>>(), 0)?)
    }

    /// Full cascade over `n_stages` stages.
    pub fn run_cascade(
        &self,
        scenes: &[SceneArtifacts],
        global: &Tensor,
        layout_boxes: &[Vec<[f32; 4]>],
        n_stages: usize,
        train: bool,
    ) -> Result<GenOutputs> {
        if n_stages == 0 || n_stages > self.cfg.model.stages {
            return Err(Error::Config(format!(
                "n_stages must be in 1..={}, got {n_stages}",
                self.cfg.model.stages
            )));
        }
        let mut stage_images = Vec::new();
        let mut stage_hidden = Vec::new();
        let mut h_prev: Option<Tensor> = None;
        for stage in 0..n_stages {
            let work_res = if stage == 0 { 64 } else { 64 << (stage - 1) };
            let fused = if stage == 0 {
                let lphr = self.layout_at(scenes, layout_boxes, work_res)?;
                let lig = self
                    .composer
                    .graph_map
                    .forward(global, work_res, train)?;
                self.composer.aggregators[0].forward(&[&lphr, &lig], train)?
            } else {
                let h = h_prev.as_ref().expect("previous stage ran");
                let lphr = self.layout_at(scenes, layout_boxes, work_res)?;
                let mut ctx_rows = Vec::with_capacity(scenes.len());
                for (i, scene) in scenes.iter().enumerate() {
                    let hi = h.narrow(0, i, 1)?;
                    ctx_rows.push(self.composer.contexts[stage - 1]
                        .forward(&scene.feats.phrases, &hi)?);
                }
                let ctx = Tensor::cat(&ctx_rows.iter().collect::<Vec<_>>(), 0)?;
                let mut parts: Vec<&Tensor> = vec![h, &lphr, &ctx];
                let lig;
                if self.cfg.model.lig_in_later_stages {
                    lig = self.composer.graph_map.forward(global, work_res, train)?;
                    parts.push(&lig);
                }
                self.composer.aggregators[stage].forward(&parts, train)?
            };
            let (h, img) = self.decoder.stage(stage, &fused, train)?;
            stage_hidden.push(h.clone());
            stage_images.push(img);
            h_prev = Some(h);
        }
        Ok(GenOutputs {
            stage_images,
            stage_hidden,
            scenes: Vec::new(),
        })
    }

    /// Generate images for a batch of scenes. Returns artifacts inside the
    /// outputs for loss computation.
    pub fn generate_batch(
        &self,
        inputs: &[SceneInput],
        noise: &[Tensor],
        n_stages: usize,
        train: bool,
    ) -> Result<GenOutputs> {
        let (scenes, global) = self.build_scenes(inputs, noise)?;
        let layout_boxes: Vec<Vec<[f32; 4]>> = if train {
            scenes
                .iter()
                .zip(inputs)
                .map(|(s, i)| Self::training_layout_boxes(s, i))
                .collect()
        } else {
            scenes.iter().map(|s| s.layout_boxes.clone()).collect()
        };
        let mut out = self.run_cascade(&scenes, &global, &layout_boxes, n_stages, train)?;
        out.scenes = scenes;
        Ok(out)
    }

    /// Single-scene convenience: deterministic given the seed.
    pub fn generate(
        &self,
        labels: &[usize],
        caption_ids: &[u32],
        seed: u64,
        n_stages: usize,
        gt_boxes: Option<Vec<[f32; 4]>>,
    ) -> Result<GenOutputs> {
        let mut stream = Stream::new(seed, "generate/z");
        let z = Tensor::from_vec(
            stream.normal_vec(self.cfg.model.glove_dim),
            self.cfg.model.glove_dim,
            &self.device,
        )?;
        let input = SceneInput {
            labels: labels.to_vec(),
            caption_ids: caption_ids.to_vec(),
            gt_boxes,
        };
        self.generate_batch(&[input], &[z], n_stages, false)
    }

    // --- checkpoint plumbing -------------------------------------------------

    pub fn save_graph_checkpoint(&self, stem: &Path) -> Result<()> {
        if let Some(parent) = stem.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.graph
            .reg
            .save(&stem.with_extension("graph.safetensors"))?;
        self.region_encoder
            .proj_reg
            .save(&stem.with_extension("proj.safetensors"))?;
        let header = GraphHeader {
            version: GRAPH_CHECKPOINT_VERSION.to_string(),
            vocab_hash: self.vocab_hash.clone(),
            n_categories: self.n_categories,
            d_phrase: self.cfg.model.d_phrase,
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&header).expect("header serializes"),
        )?;
        Ok(())
    }

    pub fn load_graph_checkpoint(&mut self, stem: &Path) -> Result<()> {
        let header_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&header_path).map_err(|e| {
            Error::Checkpoint(format!("missing header {}: {e}", header_path.display()))
        })?;
        let header: GraphHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad graph header: {e}")))?;
        if header.version != GRAPH_CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "graph checkpoint version `{}` does not match `{GRAPH_CHECKPOINT_VERSION}`",
                header.version
            )));
        }
        if header.vocab_hash != self.vocab_hash {
            return Err(Error::Checkpoint(
                "graph checkpoint was built against a different vocabulary".into(),
            ));
        }
        if header.n_categories != self.n_categories || header.d_phrase != self.cfg.model.d_phrase {
            return Err(Error::Checkpoint(
                "graph checkpoint dimensions do not match the current config".into(),
            ));
        }
        self.graph
            .reg
            .load(&stem.with_extension("graph.safetensors"))?;
        self.region_encoder
            .proj_reg
            .load(&stem.with_extension("proj.safetensors"))?;
        Ok(())
    }

    /// Load both pretraining artifacts, mapping absence to the stage that
    /// must run first.
    pub fn load_pretrained(&mut self, dir: &Path) -> Result<()> {
        let te_stem = dir.join("text_encoder");
        if !te_stem.with_extension("json").exists() {
            return Err(Error::MissingPrerequisite {
                stage: "pretrain-text".into(),
                what: format!("{} not found", te_stem.with_extension("json").display()),
            });
        }
        let vocab_hash = self.vocab_hash.clone();
        self.text_encoder.load(&te_stem, &vocab_hash)?;
        let graph_stem = dir.join("graph_modules");
        if !graph_stem.with_extension("json").exists() {
            return Err(Error::MissingPrerequisite {
                stage: "pretrain-damsm".into(),
                what: format!("{} not found", graph_stem.with_extension("json").display()),
            });
        }
        self.load_graph_checkpoint(&graph_stem)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphHeader {
    version: String,
    vocab_hash: String,
    n_categories: usize,
    d_phrase: usize,
}

/// Stack the images of a batch of examples at one resolution.
pub fn examples_to_batch(
    examples: &[TrainingExample],
    resolution: usize,
    _device: &Device,
) -> Result<Tensor> {
    let mut imgs = Vec::with_capacity(examples.len());
    for ex in examples {
        let img = ex.image_at(resolution).ok_or_else(|| {
            Error::Data(format!("example {} lacks resolution {resolution}", ex.image_id))
        })?;
        imgs.push(img.unsqueeze(0)?);
    }
    Ok(Tensor::cat(&imgs.iter().collect::<Vec<_>>(), 0)?)
}
