//! Attention-based image/graph matching: region-context attention, the
//! pooled matching score, and the contrastive batch loss used by both
//! word-level (text-encoder) and phrase-level (relation/graph-encoder)
//! pretraining and by the generator's matching loss term.

use candle_core::Tensor;

use crate::nn::ops;
use crate::{Error, Result};

/// Smoothing/sharpening factors; all strictly positive.
#[derive(Debug, Clone, Copy)]
pub struct GammaConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
}

impl GammaConfig {
    pub fn new(gamma1: f64, gamma2: f64, gamma3: f64) -> Result<Self> {
        if gamma1 <= 0.0 || gamma2 <= 0.0 || gamma3 <= 0.0 {
            return Err(Error::Config("gamma factors must be positive".into()));
        }
        Ok(GammaConfig {
            gamma1,
            gamma2,
            gamma3,
        })
    }
}

impl From<&crate::config::DamsmConfig> for GammaConfig {
    fn from(cfg: &crate::config::DamsmConfig) -> Self {
        GammaConfig {
            gamma1: cfg.gamma1,
            gamma2: cfg.gamma2,
            gamma3: cfg.gamma3,
        }
    }
}

/// One matching batch: positionally-paired query sets (words or phrases) and
/// region features, plus the global vectors.
pub struct MatchingBatch {
    /// M items, each (T_i, D).
    pub query_sets: Vec<Tensor>,
    /// M items, each (D, R).
    pub key_sets: Vec<Tensor>,
    /// (M, D)
    pub global_queries: Tensor,
    /// (M, D)
    pub global_keys: Tensor,
}

/// Region-context attention for one (query set, region set) pair.
///
/// * `u`: (T, D) queries
/// * `f`: (D, R) region features
///
/// The raw similarities are first normalized over queries per region, then a
/// sharpened softmax over regions yields per-query attention; contexts are
/// the attention-weighted region features.
///
/// Returns ((T, D) contexts, (T, R) attention weights).
pub fn region_context(u: &Tensor, f: &Tensor, gamma1: f64) -> Result<(Tensor, Tensor)> {
    let (t, d) = u.dims2()?;
    let (d2, r) = f.dims2()?;
    if t == 0 || r == 0 || d == 0 {
        return Err(Error::Data("zero-width inputs to region_context".into()));
    }
    if d != d2 {
        return Err(Error::Data(format!(
            "query width {d} does not match region width {d2}"
        )));
    }
    let s = u.matmul(f)?; // (T, R)
    let s_norm = ops::softmax(&s, 0)?; // normalize over queries per region
    let alpha = ops::softmax(&(s_norm * gamma1)?, 1)?; // (T, R) over regions
    let contexts = alpha.matmul(&f.t()?)?; // (T, D)
    Ok((contexts, alpha))
}

/// Log-sum-exp pooling of per-query similarities into one score:
/// R = (1/g2) * log sum_i exp(g2 * r_i).
pub fn pooled_similarity(sims: &Tensor, gamma2: f64) -> Result<Tensor> {
    let scaled = (sims * gamma2)?;
    let lse = ops::log_sum_exp_keepdim(&scaled.unsqueeze(0)?, 1)?;
    Ok((lse.squeeze(1)?.squeeze(0)? / gamma2)?)
}

/// Image-graph matching score R(X, Y) between one set of queries and one set
/// of regions.
pub fn matching_score(u: &Tensor, f: &Tensor, gamma: &GammaConfig) -> Result<Tensor> {
    let (contexts, _alpha) = region_context(u, f, gamma.gamma1)?;
    let norms = u
        .sqr()?
        .sum(1)?
        .sqrt()?
        .min(0)?
        .to_dtype(candle_core::DType::F32)?
        .to_scalar::<f32>()?;
    if norms < 1e-8 {
        log::warn!("zero-norm query vector in matching_score; cosine treated as 0");
    }
    let sims = ops::cosine_sim(&contexts, u, 1e-8)?; // (T,)
    pooled_similarity(&sims, gamma.gamma2)
}

/// Pairwise score matrix: entry (i, j) is R(X_i, Y_j) — image i's regions
/// against item j's queries.
pub fn pairwise_scores(batch: &MatchingBatch, gamma: &GammaConfig) -> Result<Tensor> {
    let m = batch.query_sets.len();
    if m == 0 || batch.key_sets.len() != m {
        return Err(Error::Data("matching batch must pair queries with keys".into()));
    }
    let mut rows = Vec::with_capacity(m);
    for key in &batch.key_sets {
        let mut row = Vec::with_capacity(m);
        for query in &batch.query_sets {
            row.push(matching_score(query, key, gamma)?);
        }
        rows.push(Tensor::stack(&row, 0)?);
    }
    Ok(Tensor::stack(&rows, 0)?) // (M, M)
}

/// Individual loss terms (logged values).
#[derive(Debug, Clone, Copy)]
pub struct DamsmLossParts {
    pub phrase_query: f32,
    pub phrase_image: f32,
    pub global_query: f32,
    pub global_image: f32,
}

/// Contrastive matching loss over a batch: negative log posterior of the
/// correct pairing, summed over the batch, in both matching directions, at
/// both the per-query and global levels.
pub fn damsm_loss(batch: &MatchingBatch, gamma: &GammaConfig) -> Result<(Tensor, DamsmLossParts)> {
    let m = batch.query_sets.len();
    let scores = pairwise_scores(batch, gamma)?; // (M, M): rows images, cols graphs
    let scaled = (&scores * gamma.gamma3)?;

    // P(Y_i | X_i): softmax over graphs per image row.
    let log_p_y = candle_nn::ops::log_softmax(&scaled, 1)?;
    // P(X_i | Y_i): softmax over images per graph column.
    let log_p_x = candle_nn::ops::log_softmax(&scaled, 0)?;

    let eye = Tensor::eye(m, scores.dtype(), scores.device())?;
    let l_p1 = (log_p_y * &eye)?.sum_all()?.neg()?;
    let l_p2 = (log_p_x * &eye)?.sum_all()?.neg()?;

    // Global level: cosine between paired global vectors.
    let gq = &batch.global_queries; // (M, D)
    let gk = &batch.global_keys; // (M, D)
    let qn = gq.broadcast_div(&gq.sqr()?.sum_keepdim(1)?.sqrt()?.maximum(1e-8)?)?;
    let kn = gk.broadcast_div(&gk.sqr()?.sum_keepdim(1)?.sqrt()?.maximum(1e-8)?)?;
    let g = kn.matmul(&qn.t()?)?; // (M, M): rows images, cols graphs
    let g_scaled = (&g * gamma.gamma3)?;
    let l_g1 = (candle_nn::ops::log_softmax(&g_scaled, 1)?* &eye)?.sum_all()?.neg()?;
    let l_g2 = (candle_nn::ops::log_softmax(&g_scaled, 0)?* &eye)?.sum_all()?.neg()?;

    let total = (((&l_p1 + &l_p2)? + &l_g1)? + &l_g2)?;
    let parts = DamsmLossParts {
        phrase_query: l_p1.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?,
        phrase_image: l_p2.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?,
        global_query: l_g1.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?,
        global_image: l_g2.to_dtype(candle_core::DType::F32)?.to_scalar::<f32>()?,
    };
    for (name, v) in [
        ("phrase_query", parts.phrase_query),
        ("phrase_image", parts.phrase_image),
        ("global_query", parts.global_query),
        ("global_image", parts.global_image),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite matching loss term {name}: {v}; batch size {m}, score range [{:?}]",
                scores.flatten_all()?.to_vec1::<f32>().ok()
            )));
        }
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, IndexOp, Var};

    fn dev() -> Device {
        Device::Cpu
    }

    fn gamma() -> GammaConfig {
        GammaConfig::new(5.0, 5.0, 10.0).unwrap()
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(GammaConfig::new(0.0, 5.0, 10.0).is_err());
        assert!(GammaConfig::new(5.0, -1.0, 10.0).is_err());
    }

    #[test]
    fn identical_regions_give_that_region_as_context() {
        let u = Tensor::randn(0f32, 1f32, (1, 4), &dev()).unwrap();
        let v = Tensor::randn(0f32, 1f32, (4, 1), &dev()).unwrap();
        let f = v.broadcast_as((4, 6)).unwrap().contiguous().unwrap();
        let (c, alpha) = region_context(&u, &f, 5.0).unwrap();
        let expect = v.squeeze(1).unwrap();
        let d = (c.i(0).unwrap() - expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-6);
        let asum = alpha.sum(1).unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((asum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn vanishing_gamma1_gives_mean_of_regions() {
        let u = Tensor::randn(0f32, 1f32, (2, 4), &dev()).unwrap();
        let f = Tensor::randn(0f32, 1f32, (4, 5), &dev()).unwrap();
        let (c, _) = region_context(&u, &f, 1e-8).unwrap();
        let mean = f.mean(1).unwrap();
        for i in 0..2 {
            let d = (c.i(i).unwrap() - mean.clone())
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(d < 1e-5, "context {i} differs from region mean by {d}");
        }
    }

    /// Scalar double-softmax oracle.
    fn oracle_region_context(u: &[Vec<f32>], f: &[Vec<f32>], g1: f32) -> Vec<Vec<f32>> {
        let t = u.len();
        let d = u[0].len();
        let r = f[0].len();
        // s[i][j] = u_i . f_col_j
        let mut s = vec![vec![0f32; r]; t];
        for i in 0..t {
            for j in 0..r {
                for k in 0..d {
                    s[i][j] += u[i][k] * f[k][j];
                }
            }
        }
        // normalize over queries per column
        let mut sn = vec![vec![0f32; r]; t];
        for j in 0..r {
            let mx = (0..t).map(|i| s[i][j]).fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = (0..t).map(|i| (s[i][j] - mx).exp()).sum();
            for i in 0..t {
                sn[i][j] = (s[i][j] - mx).exp() / z;
            }
        }
        // softmax over regions per query, sharpened
        let mut out = vec![vec![0f32; d]; t];
        for i in 0..t {
            let mx = (0..r).map(|j| g1 * sn[i][j]).fold(f32::NEG_INFINITY, f32::max);
            let z: f32 = (0..r).map(|j| (g1 * sn[i][j] - mx).exp()).sum();
            for j in 0..r {
                let a = (g1 * sn[i][j] - mx).exp() / z;
                for k in 0..d {
                    out[i][k] += a * f[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn region_context_matches_double_softmax_oracle() {
        let mut st = crate::rng::Stream::new(5, "rc-oracle");
        let (t, d, r) = (2, 4, 3);
        let uv: Vec<Vec<f32>> = (0..t).map(|_| st.normal_vec(d)).collect();
        let fv: Vec<Vec<f32>> = (0..d).map(|_| st.normal_vec(r)).collect();
        let flat = |m: &Vec<Vec<f32>>| -> Vec<f32> { m.iter().flatten().copied().collect() };
        let u = Tensor::from_vec(flat(&uv), (t, d), &dev()).unwrap();
        let f = Tensor::from_vec(flat(&fv), (d, r), &dev()).unwrap();
        let (c, _) = region_context(&u, &f, 5.0).unwrap();
        let expect = oracle_region_context(&uv, &fv, 5.0);
        let got = c.to_vec2::<f32>().unwrap();
        for (rg, re) in got.iter().zip(&expect) {
            for (a, b) in rg.iter().zip(re) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_term_score_is_the_cosine() {
        let u = Tensor::randn(0f32, 1f32, (1, 8), &dev()).unwrap();
        let f = Tensor::randn(0f32, 1f32, (8, 5), &dev()).unwrap();
        let g = gamma();
        let r = matching_score(&u, &f, &g).unwrap().to_scalar::<f32>().unwrap();
        let (c, _) = region_context(&u, &f, g.gamma1).unwrap();
        let cos = ops::cosine_sim(&c, &u, 1e-8).unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((r - cos).abs() < 1e-6, "T=1 score {r} vs cosine {cos}");
    }

    #[test]
    fn large_gamma2_approaches_max_similarity() {
        let sims = Tensor::new(&[0.9f32, 0.1], &dev()).unwrap();
        let r = pooled_similarity(&sims, 100.0).unwrap().to_scalar::<f32>().unwrap();
        assert!((r - 0.9).abs() < 0.03, "{r}");
        assert!(r >= 0.9);
    }

    #[test]
    fn equal_similarities_give_max_plus_log_t_over_gamma2() {
        let t = 6;
        let sims = Tensor::ones(t, DType::F32, &dev()).unwrap();
        let g2 = 5.0;
        let r = pooled_similarity(&sims, g2).unwrap().to_scalar::<f32>().unwrap();
        let expect = 1.0 + (t as f32).ln() / g2 as f32;
        assert!((r - expect).abs() < 1e-6, "{r} vs {expect}");
    }

    #[test]
    fn log_sum_exp_sandwich_holds_on_random_instances() {
        let mut st = crate::rng::Stream::new(8, "sandwich");
        for _ in 0..100 {
            let t = 1 + st.usize_below(8);
            let g2 = 0.5 + 10.0 * st.f32() as f64;
            let sims_v = st.uniform_vec(t, -1.0, 1.0);
            let max = sims_v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sims = Tensor::from_vec(sims_v, t, &dev()).unwrap();
            let r = pooled_similarity(&sims, g2).unwrap().to_scalar::<f32>().unwrap();
            let upper = max + (t as f32).ln() / g2 as f32;
            assert!(r >= max - 1e-5 && r <= upper + 1e-5, "r={r} max={max} upper={upper}");
        }
    }

    #[test]
    fn cosine_stage_ignores_query_rescaling() {
        let c = Tensor::randn(0f32, 1f32, (3, 8), &dev()).unwrap();
        let u = Tensor::randn(0f32, 1f32, (3, 8), &dev()).unwrap();
        let s1 = ops::cosine_sim(&c, &u, 1e-8).unwrap();
        let s2 = ops::cosine_sim(&c, &(u * 2.0).unwrap(), 1e-8).unwrap();
        let d = (s1 - s2)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert!(d < 1e-6);
    }

    fn toy_batch(m: usize, t: usize, d: usize, r: usize, seed: u64) -> MatchingBatch {
        let mut st = crate::rng::Stream::new(seed, "batch");
        let query_sets = (0..m)
            .map(|_| Tensor::from_vec(st.normal_vec(t * d), (t, d), &dev()).unwrap())
            .collect();
        let key_sets = (0..m)
            .map(|_| Tensor::from_vec(st.normal_vec(d * r), (d, r), &dev()).unwrap())
            .collect();
        MatchingBatch {
            query_sets,
            key_sets,
            global_queries: Tensor::from_vec(st.normal_vec(m * d), (m, d), &dev()).unwrap(),
            global_keys: Tensor::from_vec(st.normal_vec(m * d), (m, d), &dev()).unwrap(),
        }
    }

    #[test]
    fn singleton_batch_loss_is_zero() {
        let batch = toy_batch(1, 3, 6, 4, 0);
        let (loss, parts) = damsm_loss(&batch, &gamma()).unwrap();
        let v = loss.to_scalar::<f32>().unwrap();
        assert!(v.abs() < 1e-6, "{v}");
        assert!(parts.phrase_query.abs() < 1e-6);
    }

    #[test]
    fn uniform_scores_give_analytic_loss() {
        // Identical items: every pairwise score equals, posteriors are 1/M,
        // so each of the four terms contributes M ln M.
        let m = 4;
        let one_query = Tensor::randn(0f32, 1f32, (3, 6), &dev()).unwrap();
        let one_key = Tensor::randn(0f32, 1f32, (6, 5), &dev()).unwrap();
        let gq = Tensor::randn(0f32, 1f32, (1, 6), &dev()).unwrap();
        let batch = MatchingBatch {
            query_sets: (0..m).map(|_| one_query.clone()).collect(),
            key_sets: (0..m).map(|_| one_key.clone()).collect(),
            global_queries: gq.broadcast_as((m, 6)).unwrap().contiguous().unwrap(),
            global_keys: gq.broadcast_as((m, 6)).unwrap().contiguous().unwrap(),
        };
        let (loss, _) = damsm_loss(&batch, &gamma()).unwrap();
        let v = loss.to_scalar::<f32>().unwrap();
        let analytic = 4.0 * (m as f32) * (m as f32).ln(); // 16 ln 4
        let rel = (v - analytic).abs() / analytic;
        assert!(rel < 0.10, "loss {v} vs analytic {analytic}");
    }

    #[test]
    fn saturated_diagonal_drives_loss_to_zero() {
        // Orthogonal one-hot globals and scaled-up diagonal agreement.
        let m = 3;
        let d = 8;
        let mut queries = Vec::new();
        let mut keys = Vec::new();
        let mut gq = vec![0f32; m * d];
        for i in 0..m {
            // Query set equals the key columns exactly: cosine 1 on diagonal.
            let basis = Tensor::zeros((2, d), DType::F32, &dev()).unwrap();
            let mut bv = vec![0f32; 2 * d];
            bv[i] = 1.0;
            bv[d + ((i + 3) % d)] = 1.0;
            let q = (basis + Tensor::from_vec(bv.clone(), (2, d), &dev()).unwrap()).unwrap();
            queries.push(q.clone());
            keys.push(q.t().unwrap().contiguous().unwrap());
            gq[i * d + i] = 1.0;
        }
        let gq = Tensor::from_vec(gq, (m, d), &dev()).unwrap();
        let batch = MatchingBatch {
            query_sets: queries,
            key_sets: keys,
            global_queries: gq.clone(),
            global_keys: gq,
        };
        // gamma3 large enough that gamma3 * score-gap >= 20.
        let g = GammaConfig::new(5.0, 5.0, 60.0).unwrap();
        let (loss, _) = damsm_loss(&batch, &g).unwrap();
        let v = loss.to_scalar::<f32>().unwrap();
        assert!(v < 1e-3, "saturated loss should vanish, got {v}");
    }

    #[test]
    fn posteriors_sum_to_one_in_both_directions() {
        let batch = toy_batch(5, 3, 6, 4, 9);
        let g = gamma();
        let scores = pairwise_scores(&batch, &g).unwrap();
        let scaled = (scores * g.gamma3).unwrap();
        let rows = ops::softmax(&scaled, 1).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        let cols = ops::softmax(&scaled, 0).unwrap().sum(0).unwrap().to_vec1::<f32>().unwrap();
        for v in rows.iter().chain(cols.iter()) {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn damsm_gradient_matches_finite_differences() {
        // f64, M=2, T=2: gradient w.r.t. the first query set.
        let d = dev();
        let mut st = crate::rng::Stream::new(4, "damsm-grad");
        let to64 = |v: Vec<f32>| -> Vec<f64> { v.into_iter().map(|x| x as f64).collect() };
        let (m, t, dd, r) = (2usize, 2usize, 4usize, 3usize);
        let u0v = to64(st.normal_vec(t * dd));
        let u0 = Var::from_tensor(&Tensor::from_vec(u0v.clone(), (t, dd), &d).unwrap()).unwrap();
        let u1 = Tensor::from_vec(to64(st.normal_vec(t * dd)), (t, dd), &d).unwrap();
        let k0 = Tensor::from_vec(to64(st.normal_vec(dd * r)), (dd, r), &d).unwrap();
        let k1 = Tensor::from_vec(to64(st.normal_vec(dd * r)), (dd, r), &d).unwrap();
        let gq = Tensor::from_vec(to64(st.normal_vec(m * dd)), (m, dd), &d).unwrap();
        let gk = Tensor::from_vec(to64(st.normal_vec(m * dd)), (m, dd), &d).unwrap();
        let g = gamma();

        let loss_of = |q0: &Tensor| -> f64 {
            let batch = MatchingBatch {
                query_sets: vec![q0.clone(), u1.clone()],
                key_sets: vec![k0.clone(), k1.clone()],
                global_queries: gq.clone(),
                global_keys: gk.clone(),
            };
            let scores = pairwise_scores(&batch, &g).unwrap();
            let scaled = (&scores * g.gamma3).unwrap();
            let eye = Tensor::eye(m, scores.dtype(), scores.device()).unwrap();
            let l1 = (candle_nn::ops::log_softmax(&scaled, 1).unwrap() * &eye)
                .unwrap()
                .sum_all()
                .unwrap()
                .neg()
                .unwrap();
            let l2 = (candle_nn::ops::log_softmax(&scaled, 0).unwrap() * &eye)
                .unwrap()
                .sum_all()
                .unwrap()
                .neg()
                .unwrap();
            (l1 + l2).unwrap().to_scalar::<f64>().unwrap()
        };

        // Autodiff gradient of the per-query terms (global terms do not
        // depend on u0).
        let batch = MatchingBatch {
            query_sets: vec![u0.as_tensor().clone(), u1.clone()],
            key_sets: vec![k0.clone(), k1.clone()],
            global_queries: gq.clone(),
            global_keys: gk.clone(),
        };
        let scores = pairwise_scores(&batch, &g).unwrap();
        let scaled = (&scores * g.gamma3).unwrap();
        let eye = Tensor::eye(m, scores.dtype(), scores.device()).unwrap();
        let l1 = (candle_nn::ops::log_softmax(&scaled, 1).unwrap() * &eye)
            .unwrap()
            .sum_all()
            .unwrap()
            .neg()
            .unwrap();
        let l2 = (candle_nn::ops::log_softmax(&scaled, 0).unwrap() * &eye)
            .unwrap()
            .sum_all()
            .unwrap()
            .neg()
            .unwrap();
        let loss = (l1 + l2).unwrap();
        let grads = loss.backward().unwrap();
        let gq0 = grads
            .get(u0.as_tensor())
            .expect("gradient for query set")
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();

        let h = 1e-5;
        for idx in 0..u0v.len() {
            let mut plus = u0v.clone();
            plus[idx] += h;
            let mut minus = u0v.clone();
            minus[idx] -= h;
            let fp = loss_of(&Tensor::from_vec(plus, (t, dd), &d).unwrap());
            let fm = loss_of(&Tensor::from_vec(minus, (t, dd), &d).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            let rel = (gq0[idx] - fd).abs() / gq0[idx].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "grad[{idx}] autodiff {} vs fd {fd}", gq0[idx]);
        }
    }
}
