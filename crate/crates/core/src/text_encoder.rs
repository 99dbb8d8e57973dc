//! Caption encoder: a single-layer bidirectional LSTM over learned input
//! embeddings. Each word is represented by the concatenation of the two
//! directional hidden states (256-d); the concatenated final states form the
//! global caption vector. Pretrained with a word-level matching loss, then
//! frozen for every downstream stage.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::layers::{Embedding, Linear};
use crate::nn::lstm::BiLstm;
use crate::nn::ParamRegistry;
use crate::rng::Stream;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "text-encoder-v1";
const INPUT_DIM: usize = 128;

/// Per-word features for a batch of captions.
pub struct WordFeatures {
    /// (B, T, D_w); padded positions are all-zero.
    pub states: Tensor,
    /// (B, D_w) global caption vectors.
    pub global: Tensor,
    /// (B, T) validity flags in {0,1}.
    pub mask: Tensor,
}

impl WordFeatures {
    /// Column-major matrix (D_w, T) for a single batch element.
    pub fn word_matrix(&self, b: usize) -> Result<Tensor> {
        Ok(self.states.narrow(0, b, 1)?.squeeze(0)?.t()?.contiguous()?)
    }

    /// (T, D_w) row view for a single batch element.
    pub fn word_rows(&self, b: usize) -> Result<Tensor> {
        Ok(self.states.narrow(0, b, 1)?.squeeze(0)?.contiguous()?)
    }

    pub fn mask_row(&self, b: usize) -> Result<Tensor> {
        Ok(self.mask.narrow(0, b, 1)?.squeeze(0)?.contiguous()?)
    }
}

pub struct TextEncoder {
    pub reg: ParamRegistry,
    embedding: Embedding,
    rnn: BiLstm,
    /// 256 -> 128 projection used only by word-level matching pretraining.
    pub word_query_proj: Linear,
    pub global_query_proj: Linear,
    pub vocab_size: usize,
    pub d_word: usize,
    dropout: f64,
}

impl TextEncoder {
    pub fn new(
        seed: u64,
        device: &Device,
        vocab_size: usize,
        d_word: usize,
        d_phrase: usize,
        dropout: f64,
    ) -> Result<Self> {
        if d_word % 2 != 0 {
            return Err(Error::Config("d_word must be even (two directions)".into()));
        }
        let mut reg = ParamRegistry::new(seed, device);
        let embedding = Embedding::new(&mut reg, "te.embedding", vocab_size, INPUT_DIM)?;
        let rnn = BiLstm::new(&mut reg, "te.rnn", INPUT_DIM, d_word / 2)?;
        let word_query_proj = Linear::new(&mut reg, "te.word_query_proj", d_word, d_phrase)?;
        let global_query_proj = Linear::new(&mut reg, "te.global_query_proj", d_word, d_phrase)?;
        Ok(TextEncoder {
            reg,
            embedding,
            rnn,
            word_query_proj,
            global_query_proj,
            vocab_size,
            d_word,
            dropout,
        })
    }

    fn mask_from_ids(&self, ids: &Tensor) -> Result<Tensor> {
        let zeros = ids.zeros_like()?;
        let mask = ids.ne(&zeros)?.to_dtype(candle_core::DType::F32)?;
        Ok(mask)
    }

    /// Encode a batch of (B, T) token ids. `dropout_stream` enables input
    /// dropout and is only passed during pretraining.
    pub fn encode(
        &self,
        ids: &Tensor,
        mut dropout_stream: Option<&mut Stream>,
    ) -> Result<WordFeatures> {
        let (b, t) = ids.dims2()?;
        let max_id = ids.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max_id as usize >= self.vocab_size {
            return Err(Error::Data(format!(
                "token id {max_id} out of vocabulary range {}",
                self.vocab_size
            )));
        }
        let mask = self.mask_from_ids(ids)?;
        let per_caption = mask.sum(1)?.to_vec1::<f32>()?;
        if per_caption.iter().any(|&n| n < 1.0) {
            return Err(Error::Data("empty caption in batch".into()));
        }
        let flat = ids.flatten_all()?;
        let mut emb = self.embedding.forward(&flat)?.reshape((b, t, INPUT_DIM))?;
        if let Some(stream) = dropout_stream.as_deref_mut() {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let noise: Vec<f32> = (0..emb.elem_count())
                    .map(|_| if (stream.f32() as f64) < keep { 1.0 / keep as f32 } else { 0.0 })
                    .collect();
                let noise = Tensor::from_vec(noise, emb.shape(), emb.device())?;
                emb = (emb * noise)?;
            }
        }
        let out = self.rnn.forward(&emb, &mask)?;
        Ok(WordFeatures {
            states: out.states,
            global: out.finals,
            mask,
        })
    }

    /// Convenience wrapper for one caption.
    pub fn encode_single(&self, ids: &[u32], device: &Device) -> Result<WordFeatures> {
        let t = ids.len();
        if t == 0 {
            return Err(Error::Data("empty caption".into()));
        }
        let ids = Tensor::from_vec(ids.to_vec(), (1, t), device)?;
        self.encode(&ids, None)
    }

    pub fn save(&self, stem: &Path, vocab_hash: &str) -> Result<()> {
        if let Some(parent) = stem.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.reg.save(&stem.with_extension("safetensors"))?;
        let header = TextEncoderHeader {
            version: CHECKPOINT_VERSION.to_string(),
            vocab_hash: vocab_hash.to_string(),
            vocab_size: self.vocab_size,
            d_word: self.d_word,
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&header).expect("header serializes"),
        )?;
        Ok(())
    }

    /// Load parameters, refusing a checkpoint built against a different
    /// vocabulary.
    pub fn load(&mut self, stem: &Path, vocab_hash: &str) -> Result<()> {
        let header_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&header_path).map_err(|e| {
            Error::Checkpoint(format!("missing header {}: {e}", header_path.display()))
        })?;
        let header: TextEncoderHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version `{}` does not match `{CHECKPOINT_VERSION}`",
                header.version
            )));
        }
        if header.vocab_hash != vocab_hash {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {} vs current {vocab_hash}",
                header.vocab_hash
            )));
        }
        self.reg.load(&stem.with_extension("safetensors"))
    }
}

#[derive(Serialize, Deserialize)]
struct TextEncoderHeader {
    version: String,
    vocab_hash: String,
    vocab_size: usize,
    d_word: usize,
}
