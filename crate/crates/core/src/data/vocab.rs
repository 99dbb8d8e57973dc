//! Caption tokenization, the token vocabulary with 50-d distributional word
//! vectors, and the object-category embedding table.
//!
//! Word vectors come from a GloVe-format text file when configured; otherwise
//! each word gets a deterministic pseudo-vector derived from its hash, so the
//! whole pipeline runs without external downloads. Out-of-vocabulary tokens
//! map to `unk` with a zero embedding row.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::rng::Stream;
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '\'' { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

/// Source of 50-d word vectors.
pub enum WordVectors {
    /// word -> vector, parsed from a GloVe text file.
    File(HashMap<String, Vec<f32>>),
    /// Deterministic hash-derived vectors.
    Synthetic { dim: usize },
}

impl WordVectors {
    pub fn from_glove_file(path: &Path, dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read word vectors {}: {e}", path.display())))?;
        let mut map = HashMap::new();
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            let word = match parts.next() {
                Some(w) => w.to_string(),
                None => continue,
            };
            let vec: Vec<f32> = parts.filter_map(|p| p.parse().ok()).collect();
            if vec.len() == dim {
                map.insert(word, vec);
            }
        }
        if map.is_empty() {
            return Err(Error::Data(format!(
                "no {dim}-d vectors found in {}",
                path.display()
            )));
        }
        Ok(WordVectors::File(map))
    }

    pub fn synthetic(dim: usize) -> Self {
        WordVectors::Synthetic { dim }
    }

    pub fn dim(&self) -> usize {
        match self {
            WordVectors::File(m) => m.values().next().map(|v| v.len()).unwrap_or(0),
            WordVectors::Synthetic { dim } => *dim,
        }
    }

    /// Vector for a word; zeros when the word is unknown to a file source.
    pub fn get(&self, word: &str) -> Vec<f32> {
        match self {
            WordVectors::File(m) => m
                .get(word)
                .cloned()
                .unwrap_or_else(|| vec![0.0; self.dim()]),
            WordVectors::Synthetic { dim } => {
                let digest = Sha256::digest(word.as_bytes());
                let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
                let mut s = Stream::new(seed, "wordvec");
                let v = s.normal_vec(*dim);
                let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-8);
                v.iter().map(|x| x / norm).collect()
            }
        }
    }
}

/// Token vocabulary with an embedding row per token.
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
    /// |V| x dim; rows 0 (pad) and 1 (unk) are zero.
    pub embedding_table: Vec<Vec<f32>>,
    pub dim: usize,
}

impl Vocabulary {
    /// Build from caption corpora: tokens ordered by descending frequency
    /// (ties by token) after the two specials.
    pub fn build(captions: impl Iterator<Item = String>, vectors: &WordVectors) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for caption in captions {
            for tok in tokenize(&caption) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut ordered: Vec<(String, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

        let dim = vectors.dim();
        let mut id_to_token = vec!["<pad>".to_string(), "<unk>".to_string()];
        let mut embedding_table = vec![vec![0.0; dim], vec![0.0; dim]];
        for (tok, _) in ordered {
            embedding_table.push(vectors.get(&tok));
            id_to_token.push(tok);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            embedding_table,
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> &str {
        self.id_to_token
            .get(id as usize)
            .map(|s| s.as_str())
            .unwrap_or("<unk>")
    }

    /// Encode a caption: tokenize, map to ids, truncate/pad to `max_len`.
    pub fn encode(&self, caption: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(caption)
            .iter()
            .take(max_len)
            .map(|t| self.id(t))
            .collect();
        ids.resize(max_len, PAD_ID);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    /// Hash over the ordered token list; checkpoints refuse to load against a
    /// different vocabulary.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.id_to_token {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(&hasher.finalize()[..16])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let lines: Vec<String> = self
            .id_to_token
            .iter()
            .zip(&self.embedding_table)
            .map(|(tok, vec)| {
                let nums: Vec<String> = vec.iter().map(|x| format!("{x}")).collect();
                format!("{tok} {}", nums.join(" "))
            })
            .collect();
        std::fs::write(path, lines.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocab {}: {e}", path.display())))?;
        let mut id_to_token = Vec::new();
        let mut embedding_table = Vec::new();
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            let tok = parts
                .next()
                .ok_or_else(|| Error::Data("empty vocab line".into()))?;
            let vec: Vec<f32> = parts.filter_map(|p| p.parse().ok()).collect();
            id_to_token.push(tok.to_string());
            embedding_table.push(vec);
        }
        if id_to_token.len() < 2 {
            return Err(Error::Data("vocab missing special tokens".into()));
        }
        let dim = embedding_table.first().map(|v| v.len()).unwrap_or(0);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            embedding_table,
            dim,
        })
    }
}

/// Object categories with their 50-d embeddings (mean of the word vectors of
/// the category name's words).
#[derive(Clone)]
pub struct CategoryTable {
    /// category_id (annotation space) -> label index
    id_to_label: BTreeMap<u32, usize>,
    pub names: Vec<String>,
    pub embeddings: Vec<Vec<f32>>,
}

impl CategoryTable {
    pub fn new(mut categories: Vec<(u32, String)>, vectors: &WordVectors) -> Self {
        categories.sort_by_key(|(id, _)| *id);
        let dim = vectors.dim();
        let mut id_to_label = BTreeMap::new();
        let mut names = Vec::new();
        let mut embeddings = Vec::new();
        for (label, (cat_id, name)) in categories.into_iter().enumerate() {
            let words = tokenize(&name);
            let mut mean = vec![0.0f32; dim];
            if !words.is_empty() {
                for w in &words {
                    for (m, x) in mean.iter_mut().zip(vectors.get(w)) {
                        *m += x;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= words.len() as f32;
                }
            }
            id_to_label.insert(cat_id, label);
            names.push(name);
            embeddings.push(mean);
        }
        CategoryTable {
            id_to_label,
            names,
            embeddings,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn label_of(&self, category_id: u32) -> Option<usize> {
        self.id_to_label.get(&category_id).copied()
    }

    pub fn label_by_name(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_strips_punctuation_and_lowercases() {
        assert_eq!(
            tokenize("A dog, catching the Frisbee!"),
            vec!["a", "dog", "catching", "the", "frisbee"]
        );
    }

    #[test]
    fn encode_truncates_and_pads() {
        let vectors = WordVectors::synthetic(8);
        let vocab = Vocabulary::build(
            ["a b c d e f".to_string()].into_iter(),
            &vectors,
        );
        let long: String = (0..30).map(|_| "a ").collect();
        let ids = vocab.encode(&long, 20);
        assert_eq!(ids.len(), 20);
        assert!(ids.iter().all(|&i| i != PAD_ID));
        let short = vocab.encode("a b", 20);
        assert_eq!(short.iter().filter(|&&i| i != PAD_ID).count(), 2);
    }

    #[test]
    fn roundtrip_decode_of_in_vocab_tokens() {
        let vectors = WordVectors::synthetic(8);
        let vocab = Vocabulary::build(
            ["the red block above the green tile".to_string()].into_iter(),
            &vectors,
        );
        let toks = tokenize("red block above green");
        let ids: Vec<u32> = toks.iter().map(|t| vocab.id(t)).collect();
        assert_eq!(vocab.decode(&ids), toks);
    }

    #[test]
    fn oov_maps_to_unk_with_zero_row() {
        let vectors = WordVectors::synthetic(8);
        let vocab = Vocabulary::build(["hello world".to_string()].into_iter(), &vectors);
        assert_eq!(vocab.id("nonexistent"), UNK_ID);
        assert!(vocab.embedding_table[UNK_ID as usize].iter().all(|&x| x == 0.0));
        assert!(vocab.embedding_table[PAD_ID as usize].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn synthetic_vectors_are_deterministic_and_unit_norm() {
        let v = WordVectors::synthetic(50);
        let a = v.get("zebra");
        let b = v.get("zebra");
        assert_eq!(a, b);
        let n: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        assert_ne!(v.get("zebra"), v.get("horse"));
    }

    #[test]
    fn multiword_category_embeds_as_mean() {
        let v = WordVectors::synthetic(50);
        let table = CategoryTable::new(vec![(7, "stop sign".into())], &v);
        let stop = v.get("stop");
        let sign = v.get("sign");
        for (i, x) in table.embeddings[0].iter().enumerate() {
            assert!((x - 0.5 * (stop[i] + sign[i])).abs() < 1e-6);
        }
        assert_eq!(table.label_of(7), Some(0));
    }

    #[test]
    fn vocab_save_load_preserves_hash() {
        let vectors = WordVectors::synthetic(8);
        let vocab = Vocabulary::build(["a red block above a green tile".to_string()].into_iter(), &vectors);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        vocab.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(vocab.hash(), loaded.hash());
        assert_eq!(vocab.len(), loaded.len());
    }
}
