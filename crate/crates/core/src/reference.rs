//! Slow, obviously-correct reference implementations used to cross-check the
//! production paths in tests. Nothing here shares code with the kernels it
//! verifies: solves use Gaussian elimination with partial pivoting instead of
//! Cholesky, and counts are brute-force enumerations.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Solve `A·Y = B` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() || a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "gauss_solve: A is {}x{}, B is {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.rows();
    let m = b.cols();
    let mut aug = Matrix::zeros(n, n + m);
    for i in 0..n {
        for j in 0..n {
            aug.set(i, j, a.get(i, j));
        }
        for j in 0..m {
            aug.set(i, n + j, b.get(i, j));
        }
    }
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = aug.get(col, col).abs();
        for r in (col + 1)..n {
            let v = aug.get(r, col).abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val == 0.0 {
            return Err(Error::NotPositiveDefinite { index: col, pivot: 0.0 });
        }
        if pivot_row != col {
            for j in 0..(n + m) {
                let tmp = aug.get(col, j);
                aug.set(col, j, aug.get(pivot_row, j));
                aug.set(pivot_row, j, tmp);
            }
        }
        let p = aug.get(col, col);
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = aug.get(r, col) / p;
            if f == 0.0 {
                continue;
            }
            for j in col..(n + m) {
                let v = aug.get(r, j) - f * aug.get(col, j);
                aug.set(r, j, v);
            }
        }
    }
    let mut y = Matrix::zeros(n, m);
    for i in 0..n {
        let p = aug.get(i, i);
        for j in 0..m {
            y.set(i, j, aug.get(i, n + j) / p);
        }
    }
    Ok(y)
}

/// Explicit inverse via [`gauss_solve`] against the identity.
pub fn gauss_inverse(a: &Matrix) -> Result<Matrix> {
    gauss_solve(a, &Matrix::identity(a.rows()))
}

/// Best achievable `(w_hat - w)^T G (w_hat - w)` for row `i` when entry
/// `(i, j)` is forced to zero and the rest of the row is re-solved. Set up
/// and solved from scratch: minimize over the free coordinates of
/// `delta = w_hat - w` with `delta_j = -w[i,j]` held fixed.
pub fn constrained_removal_error(w: &Matrix, g: &Matrix, i: usize, j: usize) -> Result<f64> {
    let n = g.rows();
    assert_eq!(w.cols(), n);
    let w_ij = w.get(i, j);
    let rest: Vec<usize> = (0..n).filter(|&c| c != j).collect();
    let g_rr = Matrix::from_fn(n - 1, n - 1, |a, b| g.get(rest[a], rest[b]));
    let g_rj = Matrix::from_fn(n - 1, 1, |a, _| g.get(rest[a], j));
    let delta_rest = gauss_solve(&g_rr, &g_rj)?.scaled(w_ij);
    let mut delta = vec![0.0f64; n];
    for (a, &c) in rest.iter().enumerate() {
        delta[c] = delta_rest.get(a, 0);
    }
    delta[j] = -w_ij;
    let mut err = 0.0;
    for a in 0..n {
        for b in 0..n {
            err += delta[a] * g.get(a, b) * delta[b];
        }
    }
    Ok(err)
}

/// Count retained parameters one slot at a time by walking every stored
/// weight position and testing it against the genome's masks.
pub fn brute_force_param_count(
    config: &crate::model::ModelConfig,
    genome: &crate::genome::Genome,
    scope: crate::model::CountScope,
) -> u64 {
    let d = config.d_model;
    let m_dim = config.n_heads * config.head_dim;
    let mut count = 0u64;
    for block in &genome.blocks {
        if !block.kept {
            continue;
        }
        let attn = block.attn_mask_flat();
        let mlp = block.mlp_mask.bits();
        // W_Q, W_K, W_V: row r kept iff attention dim r kept
        for _ in 0..3 {
            for r in 0..m_dim {
                for _c in 0..d {
                    if attn[r] {
                        count += 1;
                    }
                }
            }
        }
        // W_O: column c kept iff attention dim c kept
        for _r in 0..d {
            for c in 0..m_dim {
                if attn[c] {
                    count += 1;
                }
            }
        }
        // W_U, W_G: row r kept iff MLP dim r kept
        for _ in 0..2 {
            for r in 0..config.d_mlp {
                for _c in 0..d {
                    if mlp[r] {
                        count += 1;
                    }
                }
            }
        }
        // W_D: column c kept iff MLP dim c kept
        for _r in 0..d {
            for c in 0..config.d_mlp {
                if mlp[c] {
                    count += 1;
                }
            }
        }
        // the two norm gains stay dense in kept blocks
        count += 2 * d as u64;
    }
    if scope == crate::model::CountScope::Full {
        count += (config.vocab_size * d) as u64;
        count += (d * config.vocab_size) as u64;
        count += d as u64;
        if config.positional_mode == crate::model::PositionalMode::AbsoluteLearned {
            count += (config.max_seq_len * d) as u64;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_known_2x2() {
        // [2 1; 1 3]·[1; 2] = [4; 7]
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![4.0], vec![7.0]]);
        let y = gauss_solve(&a, &b).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((y.get(1, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pivoting_survives_zero_leading_entry() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![5.0]]);
        let y = gauss_solve(&a, &b).unwrap();
        assert!((y.get(0, 0) - 5.0).abs() < 1e-12);
        assert!((y.get(1, 0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn inverse_times_input_is_identity() {
        let a =
            Matrix::from_rows(&[vec![4.0, 1.0, 0.5], vec![1.0, 3.0, -0.2], vec![0.5, -0.2, 5.0]]);
        let inv = gauss_inverse(&a).unwrap();
        let prod = a.matmul(&inv);
        let err = prod.sub(&Matrix::identity(3)).max_abs();
        assert!(err < 1e-12, "identity error {err}");
    }

    #[test]
    fn rejects_singular() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(gauss_solve(&a, &Matrix::identity(2)).is_err());
    }
}
