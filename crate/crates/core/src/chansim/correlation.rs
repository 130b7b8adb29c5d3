//! Kronecker spatial correlation: preset matrices from the conventional
//! one-sided (alpha, beta) construction, with matrix square roots for
//! coloring white channel matrices.

use nalgebra::DMatrix;

use super::ChansimError;
use crate::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CorrelationPreset {
    Low,
    MediumA,
    Medium,
    High,
}

impl CorrelationPreset {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "low" | "l" => Some(Self::Low),
            "medium_a" | "medium-a" | "meda" | "ma" => Some(Self::MediumA),
            "medium" | "med" | "m" => Some(Self::Medium),
            "high" | "h" => Some(Self::High),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::MediumA => "medium_a",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

/// Per-side correlation matrices plus their Hermitian square roots.
#[derive(Debug, Clone)]
pub struct SpatialCorrelation {
    pub r_tx: DMatrix<C64>,
    pub r_rx: DMatrix<C64>,
    pub sqrt_tx: DMatrix<C64>,
    pub sqrt_rx: DMatrix<C64>,
}

/// One-sided correlation matrix: R[i][j] = a^((|i-j|/(n-1))^2) for n > 1.
fn one_sided(a: f64, n: usize) -> DMatrix<C64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(1.0, 0.0)
        } else if a == 0.0 {
            C64::new(0.0, 0.0)
        } else {
            let d = (i as f64 - j as f64).abs() / (n as f64 - 1.0);
            C64::new(a.powf(d * d), 0.0)
        }
    })
}

/// Hermitian PSD square root via eigendecomposition. Eigenvalues slightly
/// below zero (numerical noise) are clamped; anything below -1e-9 is an
/// error.
pub fn hermitian_sqrt(m: &DMatrix<C64>) -> Result<DMatrix<C64>, ChansimError> {
    let se = nalgebra::SymmetricEigen::new(m.clone());
    if se.eigenvalues.iter().any(|&l| l < -1e-9) {
        return Err(ChansimError::NotPsd(format!(
            "eigenvalues {:?}",
            se.eigenvalues.as_slice()
        )));
    }
    let sqrt_lam = DMatrix::from_diagonal(
        &se.eigenvalues.map(|l| C64::new(l.max(0.0).sqrt(), 0.0)),
    );
    Ok(&se.eigenvectors * sqrt_lam * se.eigenvectors.adjoint())
}

impl SpatialCorrelation {
    pub fn from_coefficients(
        alpha: f64,
        beta: f64,
        n_tx: usize,
        n_rx: usize,
    ) -> Result<Self, ChansimError> {
        let r_tx = one_sided(alpha, n_tx);
        let r_rx = one_sided(beta, n_rx);
        let sqrt_tx = hermitian_sqrt(&r_tx)?;
        let sqrt_rx = hermitian_sqrt(&r_rx)?;
        Ok(Self {
            r_tx,
            r_rx,
            sqrt_tx,
            sqrt_rx,
        })
    }

    pub fn preset(preset: CorrelationPreset, n_tx: usize, n_rx: usize) -> Self {
        let (alpha, beta) = preset_coefficients(preset);
        // Preset values are data-validated by tests; construction cannot fail.
        Self::from_coefficients(alpha, beta, n_tx, n_rx).expect("preset correlation")
    }

    pub fn custom(r_tx: DMatrix<C64>, r_rx: DMatrix<C64>) -> Result<Self, ChansimError> {
        for (label, m) in [("r_tx", &r_tx), ("r_rx", &r_rx)] {
            for i in 0..m.nrows() {
                if (m[(i, i)] - C64::new(1.0, 0.0)).norm() > 1e-9 {
                    return Err(ChansimError::NotPsd(format!("{label} diagonal not unit")));
                }
            }
        }
        let sqrt_tx = hermitian_sqrt(&r_tx)?;
        let sqrt_rx = hermitian_sqrt(&r_rx)?;
        Ok(Self {
            r_tx,
            r_rx,
            sqrt_tx,
            sqrt_rx,
        })
    }
}

const CORRELATION_DATA: &str = include_str!("../../data/mimo_correlation.txt");

/// (alpha, beta) for a preset, read from the shipped data table.
pub fn preset_coefficients(preset: CorrelationPreset) -> (f64, f64) {
    for line in CORRELATION_DATA.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let name = it.next().unwrap_or_default();
        if name == preset.label() {
            let alpha = it.next().and_then(|s| s.parse().ok()).unwrap_or(0.0);
            let beta = it.next().and_then(|s| s.parse().ok()).unwrap_or(0.0);
            return (alpha, beta);
        }
    }
    (0.0, 0.0)
}
