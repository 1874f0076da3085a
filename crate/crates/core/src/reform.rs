//! ADMM weight reformation: re-solve the kept columns of a projection so the
//! subnet's output matches the dense layer's output on calibration data.
//!
//! The objective is `trace((W_hat - W) G (W_hat - W)^T)` subject to the
//! pruned columns of `W_hat` being zero. The primal update solves a ridge
//! system against `G + rho I` (factored once), the splitting variable is
//! projected onto the column-sparsity constraint, and the scaled dual
//! accumulates the gap. The final answer is the last primal iterate with the
//! pruned columns zeroed, so it is always feasible.

use crate::error::{Error, Result};
use crate::genome::Genome;
use crate::model::{GramSet, ModelConfig, ModelWeights, WMat};
use crate::numerics::{Matrix, SpdFactor};
use crate::reference::gauss_solve;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One column-sparse reformation instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ReformProblem {
    /// Layer weights, output dim x input dim.
    pub w: Matrix,
    /// Gram of the layer input, input dim square.
    pub g: Matrix,
    /// true = this input column is pruned and must end at zero.
    pub pruned: Vec<bool>,
    pub rho: f64,
    pub iters: usize,
}

/// Solution plus per-iteration traces (both have length `iters`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReformResult {
    pub w_hat: Matrix,
    /// Frobenius norm of the primal-splitting gap after each iteration.
    pub primal_trace: Vec<f64>,
    /// Objective of the feasible (projected) iterate after each iteration.
    pub objective_trace: Vec<f64>,
}

/// `trace((W_hat - W) G (W_hat - W)^T)`.
pub fn reform_objective(w_hat: &Matrix, w: &Matrix, g: &Matrix) -> f64 {
    assert_eq!(w_hat.rows(), w.rows());
    assert_eq!(w_hat.cols(), w.cols());
    assert_eq!(w.cols(), g.rows());
    let n = g.rows();
    let mut total = 0.0;
    let mut gv = vec![0.0f64; n];
    for r in 0..w.rows() {
        let delta: Vec<f64> = w_hat.row(r).iter().zip(w.row(r)).map(|(a, b)| a - b).collect();
        for (i, out) in gv.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (gij, dj) in g.row(i).iter().zip(&delta) {
                acc += gij * dj;
            }
            *out = acc;
        }
        for (di, gi) in delta.iter().zip(&gv) {
            total += di * gi;
        }
    }
    total
}

fn zero_pruned_columns(m: &Matrix, pruned: &[bool]) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, p) in out.row_mut(r).iter_mut().zip(pruned) {
            if *p {
                *v = 0.0;
            }
        }
    }
    out
}

fn frobenius(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Run the splitting iteration. Nothing-pruned instances hold the weights
/// fixed (up to solver rounding); everything-pruned instances end at exactly
/// zero because the final projection is exact.
pub fn admm_reform(p: &ReformProblem) -> Result<ReformResult> {
    let n = p.g.rows();
    if p.g.cols() != n || p.w.cols() != n || p.pruned.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "reform: W is {}x{}, G is {}x{}, mask has {} entries",
            p.w.rows(),
            p.w.cols(),
            p.g.rows(),
            p.g.cols(),
            p.pruned.len()
        )));
    }
    assert!(p.rho > 0.0, "rho must be positive");
    assert!(p.iters >= 1, "at least one iteration required");
    let mut a = p.g.clone();
    a.symmetrize();
    for i in 0..n {
        a.set(i, i, a.get(i, i) + p.rho);
    }
    let factor = SpdFactor::cholesky(&a)?;
    let gwt = p.g.matmul(&p.w.transpose());
    let d_out = p.w.rows();

    let mut w_hat = p.w.clone();
    let mut z = p.w.clone();
    let mut u = Matrix::zeros(d_out, n);
    let mut primal_trace = Vec::with_capacity(p.iters);
    let mut objective_trace = Vec::with_capacity(p.iters);
    for step in 0..p.iters {
        // rhs = G W^T + rho (Z - U)^T, one column per output row
        let mut rhs = gwt.clone();
        for i in 0..n {
            let row = rhs.row_mut(i);
            for (r, out) in row.iter_mut().enumerate() {
                *out += p.rho * (z.get(r, i) - u.get(r, i));
            }
        }
        w_hat = factor.solve_matrix(&rhs).transpose();
        if !w_hat.all_finite() {
            return Err(Error::NonFiniteIterate { step });
        }
        for r in 0..d_out {
            for i in 0..n {
                let zi = if p.pruned[i] { 0.0 } else { w_hat.get(r, i) + u.get(r, i) };
                z.set(r, i, zi);
                u.set(r, i, u.get(r, i) + w_hat.get(r, i) - zi);
            }
        }
        primal_trace.push(frobenius(&w_hat.sub(&z)));
        objective_trace.push(reform_objective(&zero_pruned_columns(&w_hat, &p.pruned), &p.w, &p.g));
    }
    Ok(ReformResult {
        w_hat: zero_pruned_columns(&w_hat, &p.pruned),
        primal_trace,
        objective_trace,
    })
}

/// Closed-form optimum of the same problem, solved independently: the kept
/// columns satisfy `W_hat[:, kept] G[kept, kept] = W G[:, kept]`, one
/// Gaussian-elimination solve over the kept submatrix.
pub fn exact_column_ls_oracle(w: &Matrix, g: &Matrix, pruned: &[bool]) -> Result<Matrix> {
    let n = g.rows();
    assert_eq!(w.cols(), n);
    assert_eq!(pruned.len(), n);
    let kept: Vec<usize> = (0..n).filter(|i| !pruned[*i]).collect();
    let mut out = Matrix::zeros(w.rows(), n);
    if kept.is_empty() {
        return Ok(out);
    }
    let mut sym = g.clone();
    sym.symmetrize();
    let g_kk = Matrix::from_fn(kept.len(), kept.len(), |a, b| sym.get(kept[a], kept[b]));
    // rhs[a, r] = (G W^T)[kept[a], r]
    let gwt = sym.matmul(&w.transpose());
    let rhs = Matrix::from_fn(kept.len(), w.rows(), |a, r| gwt.get(kept[a], r));
    let solved = gauss_solve(&g_kk, &rhs)?;
    for (a, &col) in kept.iter().enumerate() {
        for r in 0..w.rows() {
            out.set(r, col, solved.get(a, r));
        }
    }
    Ok(out)
}

/// Zero the pruned columns and change nothing else.
pub fn truncation_baseline(w: &Matrix, pruned: &[bool]) -> Matrix {
    zero_pruned_columns(w, pruned)
}

/// Reformation hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReformSettings {
    pub rho: f64,
    pub iters: usize,
}

impl Default for ReformSettings {
    fn default() -> Self {
        ReformSettings { rho: 1.0, iters: 30 }
    }
}

/// Outcome for one reformed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReform {
    pub block: usize,
    pub layer: String,
    pub pruned_cols: usize,
    pub objective_admm: f64,
    pub objective_trunc: f64,
    /// True when truncation beat the iteration and was kept instead
    /// (should not happen on healthy instances).
    pub fallback: bool,
    pub final_primal_residual: f64,
}

/// Reformation summary across all touched layers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReformReport {
    pub layers: Vec<LayerReform>,
    pub rho: f64,
    pub iters: usize,
}

enum TargetLayer {
    WO,
    WD,
}

/// Re-solve the kept output columns (W_O per attention dim, W_D per MLP dim)
/// of every kept block against the captured Grams, normalized per token so
/// the default rho is well-scaled. Returns updated weights plus the report.
/// Q/K/V/U/G rows are not touched: the masked forward already ignores them
/// and extraction drops them.
pub fn reform_subnet(
    weights: &ModelWeights,
    config: &ModelConfig,
    genome: &Genome,
    grams: &GramSet,
    settings: &ReformSettings,
) -> Result<(ModelWeights, ReformReport)> {
    if genome.config_fingerprint != config.fingerprint() {
        return Err(Error::ConfigMismatch {
            a: genome.config_fingerprint.clone(),
            b: config.fingerprint(),
        });
    }
    if grams.per_block.len() != config.depth || weights.blocks.len() != config.depth {
        return Err(Error::ShapeMismatch(format!(
            "reform_subnet: {} gram blocks, {} weight blocks, depth {}",
            grams.per_block.len(),
            weights.blocks.len(),
            config.depth
        )));
    }
    let inv_tokens = 1.0 / grams.token_count.max(1) as f64;
    let mut jobs: Vec<(usize, TargetLayer, Matrix, Matrix, Vec<bool>)> = Vec::new();
    for (bix, bg) in genome.blocks.iter().enumerate() {
        if !bg.kept {
            continue;
        }
        let attn_pruned: Vec<bool> = bg.attn_mask_flat().iter().map(|k| !k).collect();
        let mlp_pruned: Vec<bool> = bg.mlp_mask.bits().iter().map(|k| !k).collect();
        jobs.push((
            bix,
            TargetLayer::WO,
            weights.blocks[bix].w_o.to_matrix(),
            grams.per_block[bix].g_o.scaled(inv_tokens),
            attn_pruned,
        ));
        jobs.push((
            bix,
            TargetLayer::WD,
            weights.blocks[bix].w_d.to_matrix(),
            grams.per_block[bix].g_d.scaled(inv_tokens),
            mlp_pruned,
        ));
    }
    let solved: Vec<Result<(usize, TargetLayer, Matrix, LayerReform)>> = jobs
        .into_par_iter()
        .map(|(bix, layer, w, g, pruned)| {
            let name = match layer {
                TargetLayer::WO => "w_o",
                TargetLayer::WD => "w_d",
            };
            let pruned_cols = pruned.iter().filter(|p| **p).count();
            let trunc = truncation_baseline(&w, &pruned);
            let obj_trunc = reform_objective(&trunc, &w, &g);
            if pruned_cols == 0 {
                let entry = LayerReform {
                    block: bix,
                    layer: name.to_string(),
                    pruned_cols,
                    objective_admm: 0.0,
                    objective_trunc: 0.0,
                    fallback: false,
                    final_primal_residual: 0.0,
                };
                return Ok((bix, layer, w, entry));
            }
            let result = admm_reform(&ReformProblem {
                w: w.clone(),
                g: g.clone(),
                pruned,
                rho: settings.rho,
                iters: settings.iters,
            })?;
            let obj_admm = reform_objective(&result.w_hat, &w, &g);
            let fallback = obj_admm > obj_trunc;
            let chosen = if fallback { trunc } else { result.w_hat };
            let entry = LayerReform {
                block: bix,
                layer: name.to_string(),
                pruned_cols,
                objective_admm: obj_admm,
                objective_trunc: obj_trunc,
                fallback,
                final_primal_residual: *result.primal_trace.last().unwrap(),
            };
            Ok((bix, layer, chosen, entry))
        })
        .collect();

    let mut out = weights.clone();
    let mut report = ReformReport { layers: Vec::new(), rho: settings.rho, iters: settings.iters };
    for item in solved {
        let (bix, layer, w_new, entry) = item?;
        match layer {
            TargetLayer::WO => out.blocks[bix].w_o = WMat::from_matrix(&w_new),
            TargetLayer::WD => out.blocks[bix].w_d = WMat::from_matrix(&w_new),
        }
        report.layers.push(entry);
    }
    Ok((out, report))
}

/// Relative-gap trace against the closed-form optimum for one rho value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoCurve {
    pub rho: f64,
    pub rel_gap: Vec<f64>,
}

/// Objective gap curves for a sweep of rho values on one instance.
pub fn rho_sensitivity(
    w: &Matrix,
    g: &Matrix,
    pruned: &[bool],
    rhos: &[f64],
    iters: usize,
) -> Result<Vec<RhoCurve>> {
    let oracle = exact_column_ls_oracle(w, g, pruned)?;
    let opt = reform_objective(&oracle, w, g);
    let floor = opt.abs().max(1e-12);
    rhos.iter()
        .map(|&rho| {
            let result = admm_reform(&ReformProblem {
                w: w.clone(),
                g: g.clone(),
                pruned: pruned.to_vec(),
                rho,
                iters,
            })?;
            let rel_gap = result.objective_trace.iter().map(|o| (o - opt) / floor).collect();
            Ok(RhoCurve { rho, rel_gap })
        })
        .collect()
}
