//! Second-order importance scores over calibration Grams, and the
//! mask-initialization rule that keeps the highest-scoring attention and MLP
//! dimensions at a requested ratio.
//!
//! The element score divides each squared weight by the matching diagonal of
//! the inverse (damped) Gram, which equals twice the best achievable
//! reconstruction error of removing that single weight and re-solving the
//! rest of its row. Dimension scores aggregate the element scores that one
//! retained unit would carry: projection rows entering the dimension plus
//! projection columns leaving it.

use crate::error::{Error, Result};
use crate::genome::{BlockGenome, Genome, GenomeMeta, SearchSpace, SelectionMask};
use crate::model::{GramSet, ModelConfig, ModelWeights};
use crate::numerics::{damped_inverse_diag_auto, Matrix};
use serde::{Deserialize, Serialize};

/// Element-importance matrices for one block, plus the damping that the
/// Gram inversion needed at each capture point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScores {
    pub phi_q: Matrix,
    pub phi_k: Matrix,
    pub phi_v: Matrix,
    pub phi_o: Matrix,
    pub phi_u: Matrix,
    pub phi_g: Matrix,
    pub phi_d: Matrix,
    pub lambda_qkv: f64,
    pub lambda_o: f64,
    pub lambda_ug: f64,
    pub lambda_d: f64,
}

/// Per-block importance scores for the whole model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub per_block: Vec<BlockScores>,
}

/// Per-element importance `phi[i,j] = w[i,j]^2 / [(2G + lambda I)^-1]_jj`
/// where `G` is the Gram of the layer input. Damping escalates only if the
/// undamped inverse fails; the lambda used is returned.
pub fn element_importance(w: &Matrix, g: &Matrix) -> Result<(Matrix, f64)> {
    if w.cols() != g.rows() {
        return Err(Error::ShapeMismatch(format!(
            "importance: W is {}x{}, G is {}x{}",
            w.rows(),
            w.cols(),
            g.rows(),
            g.cols()
        )));
    }
    let (diag, lambda) = damped_inverse_diag_auto(g)?;
    let phi = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        let wij = w.get(i, j);
        wij * wij / diag[j]
    });
    Ok((phi, lambda))
}

/// Sum of each row of a score matrix.
pub fn row_scores(phi: &Matrix) -> Vec<f64> {
    (0..phi.rows()).map(|i| phi.row(i).iter().sum()).collect()
}

/// Sum of each column of a score matrix.
pub fn col_scores(phi: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0f64; phi.cols()];
    for i in 0..phi.rows() {
        for (o, v) in out.iter_mut().zip(phi.row(i)) {
            *o += *v;
        }
    }
    out
}

/// Score every projection of every block against the captured Grams.
pub fn score_model(
    weights: &ModelWeights,
    config: &ModelConfig,
    grams: &GramSet,
) -> Result<ScoreSet> {
    if grams.per_block.len() != config.depth || weights.blocks.len() != config.depth {
        return Err(Error::ShapeMismatch(format!(
            "score_model: {} gram blocks, {} weight blocks, depth {}",
            grams.per_block.len(),
            weights.blocks.len(),
            config.depth
        )));
    }
    let mut per_block = Vec::with_capacity(config.depth);
    for (bw, bg) in weights.blocks.iter().zip(&grams.per_block) {
        let (phi_q, lambda_qkv) = element_importance(&bw.w_q.to_matrix(), &bg.g_qkv)?;
        let (phi_k, _) = element_importance(&bw.w_k.to_matrix(), &bg.g_qkv)?;
        let (phi_v, _) = element_importance(&bw.w_v.to_matrix(), &bg.g_qkv)?;
        let (phi_o, lambda_o) = element_importance(&bw.w_o.to_matrix(), &bg.g_o)?;
        let (phi_u, lambda_ug) = element_importance(&bw.w_u.to_matrix(), &bg.g_ug)?;
        let (phi_g, _) = element_importance(&bw.w_g.to_matrix(), &bg.g_ug)?;
        let (phi_d, lambda_d) = element_importance(&bw.w_d.to_matrix(), &bg.g_d)?;
        per_block.push(BlockScores {
            phi_q,
            phi_k,
            phi_v,
            phi_o,
            phi_u,
            phi_g,
            phi_d,
            lambda_qkv,
            lambda_o,
            lambda_ug,
            lambda_d,
        });
    }
    Ok(ScoreSet { per_block })
}

/// Combined per-attention-dimension score: what the dimension's retained
/// rows of W_Q/W_K/W_V and column of W_O together carry. Length M.
pub fn attention_dim_scores(scores: &BlockScores) -> Vec<f64> {
    let q = row_scores(&scores.phi_q);
    let k = row_scores(&scores.phi_k);
    let v = row_scores(&scores.phi_v);
    let o = col_scores(&scores.phi_o);
    q.iter().zip(&k).zip(&v).zip(&o).map(|(((qv, kv), vv), ov)| qv + kv + vv + ov).collect()
}

/// Combined per-MLP-dimension score: rows of W_U/W_G plus column of W_D.
/// Length P.
pub fn mlp_dim_scores(scores: &BlockScores) -> Vec<f64> {
    let u = row_scores(&scores.phi_u);
    let g = row_scores(&scores.phi_g);
    let d = col_scores(&scores.phi_d);
    u.iter().zip(&g).zip(&d).map(|((uv, gv), dv)| uv + gv + dv).collect()
}

/// Keep the top `ceil(gamma * n_units)` units by score, ties broken toward
/// the lower index. `unit` > 1 groups adjacent dimensions (rotary pairs):
/// unit scores are summed and whole units are kept or dropped together.
pub fn top_score_mask(scores: &[f64], gamma: f64, unit: usize) -> SelectionMask {
    assert!(unit >= 1 && scores.len().is_multiple_of(unit));
    let n_units = scores.len() / unit;
    let unit_scores: Vec<f64> =
        (0..n_units).map(|u| scores[u * unit..(u + 1) * unit].iter().sum()).collect();
    let keep = ((gamma * n_units as f64).ceil() as usize).clamp(1, n_units);
    let mut order: Vec<usize> = (0..n_units).collect();
    order.sort_by(|a, b| {
        unit_scores[*b]
            .partial_cmp(&unit_scores[*a])
            .expect("importance scores are finite")
            .then(a.cmp(b))
    });
    let mut bits = vec![false; scores.len()];
    for &u in order.iter().take(keep) {
        for b in bits.iter_mut().skip(u * unit).take(unit) {
            *b = true;
        }
    }
    SelectionMask::from_bits(bits)
}

/// Importance-guided genome at a uniform target ratio: every block kept,
/// per-head and MLP ratios snapped to the search grids, and each mask
/// keeping its top-scored dimensions at that ratio.
pub fn init_genome(
    weights: &ModelWeights,
    config: &ModelConfig,
    grams: &GramSet,
    target_ratio: f64,
    space: &SearchSpace,
) -> Result<Genome> {
    let scores = score_model(weights, config, grams)?;
    let unit = if config.rotary() { 2 } else { 1 };
    let gamma_attn = SearchSpace::snap(&space.head_ratio_grid, target_ratio);
    let gamma_mlp = SearchSpace::snap(&space.mlp_ratio_grid, target_ratio);
    let mut blocks = Vec::with_capacity(config.depth);
    for bs in &scores.per_block {
        let attn = attention_dim_scores(bs);
        let mlp = mlp_dim_scores(bs);
        let head_masks: Vec<SelectionMask> = (0..config.n_heads)
            .map(|h| {
                let head = &attn[h * config.head_dim..(h + 1) * config.head_dim];
                top_score_mask(head, gamma_attn, unit)
            })
            .collect();
        let mlp_mask = top_score_mask(&mlp, gamma_mlp, 1);
        blocks.push(BlockGenome {
            kept: true,
            head_masks,
            mlp_mask,
            head_ratios: vec![gamma_attn; config.n_heads],
            mlp_ratio: gamma_mlp,
        });
    }
    Ok(Genome {
        blocks,
        config_fingerprint: config.fingerprint(),
        meta: GenomeMeta { seed: 0, lineage: "init".to_string(), init_ratio: Some(target_ratio) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CalibrationSet;
    use crate::model::{
        capture_grams, full_block_param_count, init_weights, param_count, CountScope, LayerInputTap,
    };
    use crate::reference::constrained_removal_error;
    use crate::util::derive_rng;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = derive_rng(seed, &["matrix"]);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn gram_from_samples(dim: usize, samples: usize, seed: u64) -> Matrix {
        let x = random_matrix(dim, samples, seed);
        x.matmul(&x.transpose())
    }

    #[test]
    fn identity_gram_gives_twice_squared_weights() {
        // X = I means G = I, so the inverse diagonal of 2G is 1/2 everywhere
        let w = random_matrix(5, 4, 1);
        let g = Matrix::identity(4);
        let (phi, lambda) = element_importance(&w, &g).unwrap();
        assert_eq!(lambda, 0.0);
        for i in 0..5 {
            for j in 0..4 {
                let expect = 2.0 * w.get(i, j) * w.get(i, j);
                assert!((phi.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn importance_is_twice_removal_error() {
        let w = random_matrix(6, 6, 2);
        let g = gram_from_samples(6, 24, 3);
        let (phi, _) = element_importance(&w, &g).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let err = constrained_removal_error(&w, &g, i, j).unwrap();
                let rel = (phi.get(i, j) - 2.0 * err).abs() / (2.0 * err).max(1e-30);
                assert!(rel < 1e-6, "({i},{j}): phi {} vs 2e {}", phi.get(i, j), 2.0 * err);
            }
        }
    }

    #[test]
    fn zero_weights_score_zero() {
        let w = Matrix::zeros(3, 4);
        let g = gram_from_samples(4, 16, 4);
        let (phi, _) = element_importance(&w, &g).unwrap();
        assert_eq!(phi.max_abs(), 0.0);
    }

    #[test]
    fn ranking_is_scale_equivariant() {
        let w = random_matrix(5, 5, 5);
        let g = gram_from_samples(5, 20, 6);
        let (phi, _) = element_importance(&w, &g).unwrap();
        let (phi_w_scaled, _) = element_importance(&w.scaled(3.0), &g).unwrap();
        let (phi_g_scaled, _) = element_importance(&w, &g.scaled(7.0)).unwrap();
        // scaling W by c scales every score by c^2 exactly
        assert!(phi_w_scaled.sub(&phi.scaled(9.0)).max_abs() < 1e-9);
        // scaling G rescales all scores equally, so rankings agree
        let rank = |m: &Matrix| {
            let mut ix: Vec<usize> = (0..m.rows() * m.cols()).collect();
            ix.sort_by(|a, b| m.data()[*b].partial_cmp(&m.data()[*a]).unwrap().then(a.cmp(b)));
            ix
        };
        assert_eq!(rank(&phi), rank(&phi_w_scaled));
        assert_eq!(rank(&phi), rank(&phi_g_scaled));
    }

    #[test]
    fn top_mask_keeps_cardinality_and_breaks_ties_low() {
        // equal scores: the lowest indices win
        let mask = top_score_mask(&[1.0; 8], 0.5, 1);
        assert_eq!(mask.kept_indices(), vec![0, 1, 2, 3]);
        // ceil: 0.6 of 8 units keeps 5
        let mask = top_score_mask(&[1.0; 8], 0.6, 1);
        assert_eq!(mask.popcount(), 5);
        // highest scores win when distinct
        let mask = top_score_mask(&[0.1, 5.0, 0.2, 4.0, 0.3, 3.0], 0.5, 1);
        assert_eq!(mask.kept_indices(), vec![1, 3, 5]);
    }

    #[test]
    fn top_mask_pairs_stay_together() {
        let scores = [0.0, 9.0, 1.0, 1.0, 5.0, 0.0, 2.0, 2.0];
        let mask = top_score_mask(&scores, 0.5, 2);
        // pair sums: 9, 2, 5, 4 -> keep pairs 0 and 2
        assert_eq!(mask.kept_indices(), vec![0, 1, 4, 5]);
        assert!(mask.is_pairwise());
    }

    #[test]
    fn keep_sets_nest_as_gamma_grows() {
        let mut rng = derive_rng(7, &["nest"]);
        let scores: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut prev: Vec<usize> = Vec::new();
        for gamma in [0.25, 0.5, 0.7, 0.9, 1.0] {
            let kept = top_score_mask(&scores, gamma, 1).kept_indices();
            assert!(prev.iter().all(|i| kept.contains(i)), "gamma {gamma} lost a dim");
            prev = kept;
        }
        assert_eq!(prev.len(), 16);
    }

    fn toy_grams() -> (ModelConfig, ModelWeights, GramSet) {
        let config = ModelConfig::toy();
        let weights = init_weights(&config, 11);
        let mut rng = derive_rng(12, &["calib"]);
        let sequences: Vec<Vec<u32>> =
            (0..6).map(|_| (0..16).map(|_| rng.gen_range(0..256u32)).collect()).collect();
        let calib = CalibrationSet { sequences, seed: 12, source: "test".to_string() };
        let grams = capture_grams(&weights, &config, &calib, &LayerInputTap::all()).unwrap();
        (config, weights, grams)
    }

    #[test]
    fn init_genome_hits_requested_budget() {
        let (config, weights, grams) = toy_grams();
        let full = full_block_param_count(&config) as f64;
        for target in [0.5, 0.7, 0.8] {
            let space = SearchSpace::toy_default(&config, target);
            let genome = init_genome(&weights, &config, &grams, target, &space).unwrap();
            let errs = crate::genome::validate(&genome, &config, &space);
            assert!(errs.is_empty(), "target {target}: {errs:?}");
            let frac = param_count(&config, &genome, CountScope::BlocksOnly) as f64 / full;
            assert!((frac - target).abs() <= 0.02, "target {target} landed at fraction {frac}");
            assert_eq!(genome.meta.lineage, "init");
            assert_eq!(genome.meta.init_ratio, Some(target));
        }
    }

    #[test]
    fn init_masks_follow_scores() {
        let (config, weights, grams) = toy_grams();
        let space = SearchSpace::toy_default(&config, 0.5);
        let genome = init_genome(&weights, &config, &grams, 0.5, &space).unwrap();
        let scores = score_model(&weights, &config, &grams).unwrap();
        for (bix, block) in genome.blocks.iter().enumerate() {
            let attn = attention_dim_scores(&scores.per_block[bix]);
            for (h, mask) in block.head_masks.iter().enumerate() {
                let head = &attn[h * config.head_dim..(h + 1) * config.head_dim];
                // every kept score must be >= every dropped score
                let kept_min =
                    mask.kept_indices().iter().map(|&i| head[i]).fold(f64::INFINITY, f64::min);
                let dropped_max = (0..config.head_dim)
                    .filter(|i| !mask.get(*i))
                    .map(|i| head[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(kept_min >= dropped_max, "block {bix} head {h}");
            }
        }
    }

    #[test]
    fn rotary_init_pairs_masks() {
        let mut config = ModelConfig::toy();
        config.positional_mode = crate::model::PositionalMode::Rotary;
        let weights = init_weights(&config, 13);
        let mut rng = derive_rng(14, &["calib"]);
        let sequences: Vec<Vec<u32>> =
            (0..4).map(|_| (0..12).map(|_| rng.gen_range(0..256u32)).collect()).collect();
        let calib = CalibrationSet { sequences, seed: 14, source: "test".to_string() };
        let grams = capture_grams(&weights, &config, &calib, &LayerInputTap::all()).unwrap();
        let space = SearchSpace::toy_default(&config, 0.5);
        let genome = init_genome(&weights, &config, &grams, 0.5, &space).unwrap();
        for block in &genome.blocks {
            for mask in &block.head_masks {
                assert!(mask.is_pairwise());
            }
        }
        assert!(crate::genome::validate(&genome, &config, &space).is_empty());
    }

    #[test]
    fn score_model_lambda_zero_on_healthy_grams() {
        let (config, weights, grams) = toy_grams();
        let scores = score_model(&weights, &config, &grams).unwrap();
        assert_eq!(scores.per_block.len(), config.depth);
        for bs in &scores.per_block {
            assert!(bs.phi_q.all_finite());
            assert!(bs.phi_d.all_finite());
        }
    }
}
