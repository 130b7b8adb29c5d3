//! Per-PRG precoding: SVD-aligned, random orthonormal, or wideband identity.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use super::{ChansimError, ChannelRealization};
use crate::grid::{GridLayout, SYMBOLS_PER_SLOT};
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PrecodingMode {
    Svd,
    Random,
    Wideband,
}

impl PrecodingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svd" => Some(Self::Svd),
            "random" => Some(Self::Random),
            "wideband" => Some(Self::Wideband),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Svd => "svd",
            Self::Random => "random",
            Self::Wideband => "wideband",
        }
    }
}

/// One `n_tx x n_layers` matrix per PRG.
#[derive(Debug, Clone)]
pub struct PrecodingPlan {
    pub mode: PrecodingMode,
    pub w: Vec<DMatrix<C64>>,
}

impl PrecodingPlan {
    pub fn n_layers(&self) -> usize {
        self.w[0].ncols()
    }
}

/// Gram-Schmidt orthonormalisation of the columns. Near-dependent columns
/// are replaced by fresh random draws so the result always has orthonormal
/// columns.
pub fn gram_schmidt(mut m: DMatrix<C64>, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
    use rand::Rng;
    let (rows, cols) = m.shape();
    for c in 0..cols {
        loop {
            for prev in 0..c {
                let proj: C64 = (0..rows).map(|r| m[(r, prev)].conj() * m[(r, c)]).sum();
                for r in 0..rows {
                    let sub = proj * m[(r, prev)];
                    m[(r, c)] -= sub;
                }
            }
            let norm: f64 = (0..rows).map(|r| m[(r, c)].norm_sqr()).sum::<f64>().sqrt();
            if norm > 1e-9 {
                for r in 0..rows {
                    m[(r, c)] /= C64::new(norm, 0.0);
                }
                break;
            }
            for r in 0..rows {
                m[(r, c)] = C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            }
        }
    }
    m
}

/// Columns of the dominant right-singular subspace of `h_bar`, computed from
/// the Hermitian eigendecomposition of h_bar^H h_bar. Eigenvectors are sorted
/// by descending eigenvalue; a rank-deficient average simply yields columns
/// from the orthonormal complement.
fn dominant_right_singular(h_bar: &DMatrix<C64>, n_layers: usize) -> DMatrix<C64> {
    let gram = h_bar.adjoint() * h_bar;
    let se = nalgebra::SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..se.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| se.eigenvalues[b].partial_cmp(&se.eigenvalues[a]).unwrap());
    let n_tx = h_bar.ncols();
    DMatrix::from_fn(n_tx, n_layers, |r, c| se.eigenvectors[(r, order[c])])
}

/// Identity columns: layer l maps straight onto antenna l.
fn identity_columns(n_tx: usize, n_layers: usize) -> DMatrix<C64> {
    DMatrix::from_fn(n_tx, n_layers, |r, c| {
        if r == c {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Builds the per-PRG precoding plan for a sampled channel.
pub fn make_precoder(
    mode: PrecodingMode,
    h: &ChannelRealization,
    layout: &GridLayout,
    n_layers: usize,
    seed: u64,
) -> Result<PrecodingPlan, ChansimError> {
    let n_rx = h.h.shape()[0];
    let n_tx = h.h.shape()[1];
    if n_layers > n_tx {
        return Err(ChansimError::LayerExceedsTx { n_layers, n_tx });
    }
    let n_prg = layout.n_prg();
    let mut w = Vec::with_capacity(n_prg);
    for i in 0..n_prg {
        let m = match mode {
            PrecodingMode::Wideband => identity_columns(n_tx, n_layers),
            PrecodingMode::Random => {
                use rand::Rng;
                let mut rng = crate::util::rng_for(seed, "precoder", i as u64);
                let g = DMatrix::from_fn(n_tx, n_layers, |_, _| {
                    C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                });
                gram_schmidt(g, &mut rng)
            }
            PrecodingMode::Svd => {
                // Average the channel over every RE in the PRG, then align
                // to the dominant right-singular directions.
                let range = layout.prg_subcarriers(i);
                let n_re = (range.len() * SYMBOLS_PER_SLOT) as f64;
                let mut h_bar = DMatrix::<C64>::zeros(n_rx, n_tx);
                for f in range {
                    for t in 0..SYMBOLS_PER_SLOT {
                        for j in 0..n_rx {
                            for k in 0..n_tx {
                                h_bar[(j, k)] += h.h[[j, k, f, t]];
                            }
                        }
                    }
                }
                h_bar /= C64::new(n_re, 0.0);
                dominant_right_singular(&h_bar, n_layers)
            }
        };
        w.push(m);
    }
    Ok(PrecodingPlan { mode, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use rand::Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<C64> {
        DMatrix::from_fn(r, c, |_, _| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn gram_schmidt_orthonormal_columns() {
        let mut rng = rng_for(11, "gs", 0);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 2, 2);
            let q = gram_schmidt(m, &mut rng);
            let g = q.adjoint() * &q;
            assert!((g - DMatrix::<C64>::identity(2, 2)).norm() < 1e-10);
        }
    }

    #[test]
    fn identity_precoder_shape() {
        let w = identity_columns(2, 2);
        assert_eq!(w, DMatrix::identity(2, 2));
        let w1 = identity_columns(2, 1);
        assert_eq!(w1[(0, 0)], C64::new(1.0, 0.0));
        assert_eq!(w1[(1, 0)], C64::new(0.0, 0.0));
    }

    #[test]
    fn svd_single_layer_maximizes_gain() {
        // Against a brute-force grid over unit vectors w = [cos a, sin a e^{jb}].
        let mut rng = rng_for(12, "svd-grid", 0);
        let h_bar = random_matrix(&mut rng, 2, 2);
        let w = dominant_right_singular(&h_bar, 1);
        let achieved = (&h_bar * &w).norm();

        let mut best = 0.0f64;
        let grid = 100;
        for ia in 0..grid {
            for ib in 0..grid {
                let a = std::f64::consts::FRAC_PI_2 * ia as f64 / (grid - 1) as f64;
                let b = std::f64::consts::TAU * ib as f64 / grid as f64;
                let v = DMatrix::from_column_slice(2, 1, &[
                    C64::new(a.cos(), 0.0),
                    C64::new(a.sin(), 0.0) * C64::new(b.cos(), b.sin()),
                ]);
                best = best.max((&h_bar * v).norm());
            }
        }
        assert!(
            achieved >= best - 1e-3,
            "eig direction {achieved} below grid max {best}"
        );
    }

    #[test]
    fn svd_rank_deficient_pads_orthonormal() {
        // Rank-1 average: second precoder column must come from the
        // orthonormal complement.
        let h_bar = DMatrix::from_row_slice(2, 2, &[
            C64::new(1.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(1.0, 0.0),
            C64::new(1.0, 0.0),
        ]);
        let w = dominant_right_singular(&h_bar, 2);
        let g = w.adjoint() * &w;
        assert!((g - DMatrix::<C64>::identity(2, 2)).norm() < 1e-10);
    }
}
