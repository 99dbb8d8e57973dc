//! Implicit graph construction.
//!
//! For an image with `n` labeled objects, every ordered pair (subject,
//! object) forms a phrase. A noise-conditioned MLP turns each pair of 50-d
//! label vectors into a query which attends over the caption's words; the
//! attention-weighted word features (mapped 256 -> 128) become the pair's
//! implicit relation vector. Three graph-convolution layers then propagate
//! information along edges and two MLP heads produce per-phrase features `u`
//! and a phrase-order-invariant global vector `u_bar`, both in the 128-d
//! joint matching space.

use candle_core::{Device, Tensor};

use crate::nn::layers::{Embedding, Linear};
use crate::nn::{ops, ParamRegistry};
use crate::{Error, Result};

/// Deterministic enumeration of ordered pairs (i, k), i != k.
pub fn ordered_pairs(n: usize) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::Data(format!(
            "need at least 2 objects to form phrases, got {n}"
        )));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for k in 0..n {
            if i != k {
                pairs.push((i, k));
            }
        }
    }
    Ok(pairs)
}

/// Phrase queries for one image: `q` is (T_p, 50).
pub struct PhraseQuery {
    pub q: Tensor,
    pub pairs: Vec<(usize, usize)>,
}

/// The inferred graph: object identities plus attention-derived relations.
pub struct ImplicitGraph {
    pub object_labels: Vec<usize>,
    /// (n, 128) learned label embeddings.
    pub object_embeddings: Tensor,
    /// (T_p, 128) implicit relation vectors.
    pub relations: Tensor,
    pub pairs: Vec<(usize, usize)>,
}

/// Output of the graph encoder.
pub struct GraphFeatures {
    /// (n, 128)
    pub objects: Tensor,
    /// (T_p, 128)
    pub relations: Tensor,
    /// (T_p, 128) phrase features in the joint matching space.
    pub phrases: Tensor,
    /// (128,) global graph vector.
    pub global: Tensor,
}

/// Attention core of the relation estimator. All inputs share a dtype, so
/// gradient checks can run in f64.
///
/// * `q`: (T_p, G) queries
/// * `word_glove`: (T_w, G)
/// * `word_features`: (T_w, D_w)
/// * `mask`: (T_w,) with {0,1}
/// * `word_map_w`/`word_map_b`: D_w -> D_p projection applied to word features
///
/// Returns ((T_p, D_p) relations, (T_p, T_w) attention weights).
pub fn relation_attention(
    q: &Tensor,
    word_glove: &Tensor,
    word_features: &Tensor,
    mask: &Tensor,
    word_map_w: &Tensor,
    word_map_b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let valid = mask
        .sum_all()?
        .to_dtype(candle_core::DType::F32)?
        .to_scalar::<f32>()?;
    if valid < 1.0 {
        return Err(Error::Data("all-pad caption: nothing to attend to".into()));
    }
    let scores = q.matmul(&word_glove.t()?)?; // (T_p, T_w)
    let beta = ops::masked_softmax(&scores, &mask.unsqueeze(0)?, 1)?;
    let mapped = word_features
        .matmul(&word_map_w.t()?)?
        .broadcast_add(word_map_b)?; // (T_w, D_p)
    let relations = beta.matmul(&mapped)?;
    Ok((relations, beta))
}

/// One graph-convolution layer as a pure function: an MLP over each
/// (subject, edge, object) triple produces candidate vectors; nodes take the
/// mean of their candidates over all incident edges, edges update directly.
pub fn graph_conv(
    nodes: &Tensor,
    edges: &Tensor,
    pairs: &[(usize, usize)],
    lin_w: &Tensor,
    lin_b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, d) = nodes.dims2()?;
    let t_p = pairs.len();
    let dev = nodes.device();
    let dtype = nodes.dtype();

    let subj_idx: Vec<u32> = pairs.iter().map(|(s, _)| *s as u32).collect();
    let obj_idx: Vec<u32> = pairs.iter().map(|(_, o)| *o as u32).collect();
    let subj_idx = Tensor::from_vec(subj_idx, t_p, dev)?;
    let obj_idx = Tensor::from_vec(obj_idx, t_p, dev)?;

    let triples = Tensor::cat(
        &[
            &nodes.index_select(&subj_idx, 0)?,
            edges,
            &nodes.index_select(&obj_idx, 0)?,
        ],
        1,
    )?; // (T_p, 3d)
    let cand = triples.matmul(&lin_w.t()?)?.broadcast_add(lin_b)?.relu()?;
    let cand_s = cand.narrow(1, 0, d)?;
    let cand_p = cand.narrow(1, d, d)?;
    let cand_o = cand.narrow(1, 2 * d, d)?;

    // Scatter-mean via incidence matrices; every node under full pair
    // enumeration is incident to 2(n-1) edges.
    let mut s_inc = vec![0f32; n * t_p];
    let mut o_inc = vec![0f32; n * t_p];
    let mut degree = vec![0f32; n];
    for (j, (s, o)) in pairs.iter().enumerate() {
        s_inc[s * t_p + j] = 1.0;
        o_inc[o * t_p + j] = 1.0;
        degree[*s] += 1.0;
        degree[*o] += 1.0;
    }
    if degree.iter().any(|&dg| dg == 0.0) {
        return Err(Error::Data("isolated node in graph".into()));
    }
    let s_inc = Tensor::from_vec(s_inc, (n, t_p), dev)?.to_dtype(dtype)?;
    let o_inc = Tensor::from_vec(o_inc, (n, t_p), dev)?.to_dtype(dtype)?;
    let degree = Tensor::from_vec(degree, (n, 1), dev)?.to_dtype(dtype)?;

    let summed = (s_inc.matmul(&cand_s.contiguous()?)? + o_inc.matmul(&cand_o.contiguous()?)?)?;
    let new_nodes = summed.broadcast_div(&degree)?;
    Ok((new_nodes, cand_p.contiguous()?))
}

/// Relation estimator parameters: pair MLP plus the word-feature map.
pub struct RelationEstimator {
    pair_fc1: Linear,
    pair_fc2: Linear,
    word_map: Linear,
}

impl RelationEstimator {
    pub fn new(
        reg: &mut ParamRegistry,
        glove_dim: usize,
        d_word: usize,
        d_phrase: usize,
    ) -> Result<Self> {
        Ok(RelationEstimator {
            pair_fc1: Linear::new_relu(reg, "ire.pair_fc1", 3 * glove_dim, 6 * glove_dim)?,
            pair_fc2: Linear::new(reg, "ire.pair_fc2", 6 * glove_dim, glove_dim)?,
            word_map: Linear::new(reg, "ire.word_map", d_word, d_phrase)?,
        })
    }

    /// Build phrase queries from (n, 50) label vectors and a shared 50-d noise.
    pub fn build_queries(&self, object_glove: &Tensor, z: &Tensor) -> Result<PhraseQuery> {
        let (n, _g) = object_glove.dims2()?;
        let pairs = ordered_pairs(n)?;
        let t_p = pairs.len();
        let dev = object_glove.device();

        let subj_idx: Vec<u32> = pairs.iter().map(|(s, _)| *s as u32).collect();
        let obj_idx: Vec<u32> = pairs.iter().map(|(_, o)| *o as u32).collect();
        let subj = object_glove.index_select(&Tensor::from_vec(subj_idx, t_p, dev)?, 0)?;
        let obj = object_glove.index_select(&Tensor::from_vec(obj_idx, t_p, dev)?, 0)?;
        let zb = z.unsqueeze(0)?.broadcast_as(subj.shape())?;
        let cat = Tensor::cat(&[&subj, &zb, &obj], 1)?; // (T_p, 150)
        let q = self.pair_fc2.forward(&self.pair_fc1.forward(&cat)?.relu()?)?;
        Ok(PhraseQuery { q, pairs })
    }

    /// Infer (T_p, 128) relation vectors by attending over caption words.
    pub fn infer_relations(
        &self,
        query: &PhraseQuery,
        word_glove: &Tensor,
        word_features: &Tensor,
        mask: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        relation_attention(
            &query.q,
            word_glove,
            word_features,
            mask,
            self.word_map.w.as_tensor(),
            self.word_map
                .b
                .as_ref()
                .expect("word_map has bias")
                .as_tensor(),
        )
    }
}

struct GraphConvLayer {
    lin: Linear,
}

/// Graph encoder: three graph-conv layers plus phrase and global heads.
pub struct GraphEncoder {
    layers: Vec<GraphConvLayer>,
    phrase_fc1: Linear,
    phrase_fc2: Linear,
    phrase_proj: Linear,
    global_fc1: Linear,
    global_fc2: Linear,
    global_proj: Linear,
    d_phrase: usize,
}

impl GraphEncoder {
    pub fn new(reg: &mut ParamRegistry, d_phrase: usize) -> Result<Self> {
        let d3 = 3 * d_phrase;
        let mut layers = Vec::new();
        for i in 0..3 {
            layers.push(GraphConvLayer {
                lin: Linear::new_relu(reg, &format!("ige.gconv{i}"), d3, d3)?,
            });
        }
        Ok(GraphEncoder {
            layers,
            phrase_fc1: Linear::new_relu(reg, "ige.phrase_fc1", d3, 2 * d3)?,
            phrase_fc2: Linear::new_relu(reg, "ige.phrase_fc2", 2 * d3, d3)?,
            phrase_proj: Linear::new(reg, "ige.phrase_proj", d3, d_phrase)?,
            global_fc1: Linear::new_relu(reg, "ige.global_fc1", d3, 2 * d3)?,
            global_fc2: Linear::new_relu(reg, "ige.global_fc2", 2 * d3, d3)?,
            global_proj: Linear::new(reg, "ige.global_proj", d3, d_phrase)?,
            d_phrase,
        })
    }

    pub fn encode(&self, graph: &ImplicitGraph) -> Result<GraphFeatures> {
        let mut nodes = graph.object_embeddings.clone();
        let mut edges = graph.relations.clone();
        for layer in &self.layers {
            let (n2, e2) = graph_conv(
                &nodes,
                &edges,
                &graph.pairs,
                layer.lin.w.as_tensor(),
                layer.lin.b.as_ref().expect("gconv has bias").as_tensor(),
            )?;
            nodes = n2;
            edges = e2;
        }

        // Re-form triples from the final node/edge vectors for the heads.
        let t_p = graph.pairs.len();
        let dev = nodes.device();
        let subj_idx: Vec<u32> = graph.pairs.iter().map(|(s, _)| *s as u32).collect();
        let obj_idx: Vec<u32> = graph.pairs.iter().map(|(_, o)| *o as u32).collect();
        let triples = Tensor::cat(
            &[
                &nodes.index_select(&Tensor::from_vec(subj_idx, t_p, dev)?, 0)?,
                &edges,
                &nodes.index_select(&Tensor::from_vec(obj_idx, t_p, dev)?, 0)?,
            ],
            1,
        )?; // (T_p, 384)

        let phr = self
            .phrase_fc2
            .forward(&self.phrase_fc1.forward(&triples)?.relu()?)?;
        let phrases = self.phrase_proj.forward(&phr)?; // (T_p, 128)

        let glob = self
            .global_fc2
            .forward(&self.global_fc1.forward(&triples)?.relu()?)?;
        let pooled = glob.mean(0)?; // (384,)
        let global = self
            .global_proj
            .forward(&pooled.unsqueeze(0)?)?
            .squeeze(0)?; // (128,)
        debug_assert_eq!(global.dims(), &[self.d_phrase]);

        Ok(GraphFeatures {
            objects: nodes,
            relations: edges,
            phrases,
            global,
        })
    }
}

/// Everything trained during phrase-level matching pretraining: relation
/// estimator, graph encoder and the learned object-label embedding table.
pub struct GraphModules {
    pub reg: ParamRegistry,
    pub ire: RelationEstimator,
    pub ige: GraphEncoder,
    pub object_embedding: Embedding,
    pub n_categories: usize,
}

impl GraphModules {
    pub fn new(
        seed: u64,
        device: &Device,
        n_categories: usize,
        glove_dim: usize,
        d_word: usize,
        d_phrase: usize,
    ) -> Result<Self> {
        let mut reg = ParamRegistry::new(seed, device);
        let ire = RelationEstimator::new(&mut reg, glove_dim, d_word, d_phrase)?;
        let ige = GraphEncoder::new(&mut reg, d_phrase)?;
        let object_embedding =
            Embedding::new(&mut reg, "object_embedding", n_categories, d_phrase)?;
        Ok(GraphModules {
            reg,
            ire,
            ige,
            object_embedding,
            n_categories,
        })
    }

    /// Build the implicit graph for one image.
    ///
    /// * `labels`: object label indices
    /// * `object_glove`: (n, 50) label vectors
    /// * `word_glove`: (T_w, 50), `word_features`: (T_w, 256), `mask`: (T_w,)
    /// * `z`: (50,) noise shared by all phrases of the image
    pub fn build_graph(
        &self,
        labels: &[usize],
        object_glove: &Tensor,
        word_glove: &Tensor,
        word_features: &Tensor,
        mask: &Tensor,
        z: &Tensor,
    ) -> Result<ImplicitGraph> {
        let query = self.ire.build_queries(object_glove, z)?;
        let (relations, _beta) = self
            .ire
            .infer_relations(&query, word_glove, word_features, mask)?;
        let ids: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        let ids = Tensor::from_vec(ids, labels.len(), object_glove.device())?;
        let object_embeddings = self.object_embedding.forward(&ids)?;
        Ok(ImplicitGraph {
            object_labels: labels.to_vec(),
            object_embeddings,
            relations,
            pairs: query.pairs,
        })
    }
}
