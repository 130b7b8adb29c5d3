//! Likelihood module: residual feedback from the forward MIMO model.
//!
//! For the Gaussian observation model the score with respect to the channel
//! estimate factorizes per stream into delta_y_j x_k^H / sigma^2. The
//! feedback is exposed in decomposed form (residual, pilots, mask) so the
//! network can weigh it itself; sigma enters only through the CoarseNet
//! input channel.

use ndarray::{Array2, Array3, Array4};

use crate::chansim::Observation;
use crate::grid::{PilotGrid, SYMBOLS_PER_SLOT};
use crate::C64;

/// Decomposed likelihood feedback, zero outside the DMRS mask.
#[derive(Debug, Clone)]
pub struct LikelihoodFeedback {
    /// Residual delta_y = y - H_hat x per rx antenna: `[n_rx, n_sc, 14]`.
    pub delta_y: Array3<C64>,
    /// Per-port pilot values: `[n_layers, n_sc, 14]`.
    pub pilots: PilotGrid,
    /// DMRS mask `[n_sc, 14]`.
    pub mask: Array2<u8>,
}

/// Computes the residual feedback for a full-grid channel estimate.
pub fn lm_gradient(obs: &Observation, h_hat: &Array4<C64>) -> LikelihoodFeedback {
    let n_rx = obs.n_rx();
    let n_layers = obs.n_layers();
    let n_sc = obs.n_subcarriers();
    assert_eq!(
        h_hat.shape(),
        &[n_rx, n_layers, n_sc, SYMBOLS_PER_SLOT],
        "estimate shape mismatch"
    );
    let mut delta_y = Array3::<C64>::zeros((n_rx, n_sc, SYMBOLS_PER_SLOT));
    for j in 0..n_rx {
        for f in 0..n_sc {
            for t in 0..SYMBOLS_PER_SLOT {
                if obs.layout.mask[[f, t]] == 0 {
                    continue;
                }
                let mut acc = obs.y[[j, f, t]];
                for l in 0..n_layers {
                    acc -= h_hat[[j, l, f, t]] * obs.pilots[[l, f, t]];
                }
                delta_y[[j, f, t]] = acc;
            }
        }
    }
    LikelihoodFeedback {
        delta_y,
        pilots: obs.pilots.clone(),
        mask: obs.layout.mask.clone(),
    }
}

/// Analytic Gaussian score: grad log p(y | H, x) = delta_y_j x_k^H / sigma^2
/// per RE, zero off the mask. Shape `[n_rx, n_layers, n_sc, 14]`.
pub fn gaussian_score(fb: &LikelihoodFeedback, sigma: f64) -> Array4<C64> {
    let n_rx = fb.delta_y.shape()[0];
    let n_layers = fb.pilots.shape()[0];
    let n_sc = fb.delta_y.shape()[1];
    let inv_var = 1.0 / (sigma * sigma);
    let mut out = Array4::<C64>::zeros((n_rx, n_layers, n_sc, SYMBOLS_PER_SLOT));
    for j in 0..n_rx {
        for l in 0..n_layers {
            for f in 0..n_sc {
                for t in 0..SYMBOLS_PER_SLOT {
                    if fb.mask[[f, t]] == 1 {
                        out[[j, l, f, t]] =
                            fb.delta_y[[j, f, t]] * fb.pilots[[l, f, t]].conj() * inv_var;
                    }
                }
            }
        }
    }
    out
}

/// Gaussian log-likelihood up to constants: -sum |delta_y|^2 / (2 sigma^2).
/// The real-part derivative of this quantity with respect to h_hat equals
/// the real part of [`gaussian_score`].
pub fn log_likelihood(obs: &Observation, h_hat: &Array4<C64>, sigma: f64) -> f64 {
    let fb = lm_gradient(obs, h_hat);
    let ss: f64 = fb.delta_y.iter().map(|v| v.norm_sqr()).sum();
    -ss / (2.0 * sigma * sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{
        builtin_tdl, make_precoder, sample_tdl, transmit_dmrs, CorrelationPreset, PrecodingMode,
        SpatialCorrelation, TransmitParams,
    };
    use crate::grid::{
        build_grid, dmrs_symbols, permute_layers, BundleSize, CarrierConfig, DmrsConfig, DmrsType,
        PrgConfig, Scs,
    };
    use crate::util::rng_for;
    use rand::Rng;

    fn obs_2x2(n_rb: usize, snr_db: f64, seed: u64) -> Observation {
        let carrier = CarrierConfig::new(Scs::Khz30, n_rb).unwrap();
        let dmrs = DmrsConfig::new(DmrsType::Type1, 2, 2, 31).unwrap();
        let layout = build_grid(carrier, dmrs.clone(), PrgConfig::new(BundleSize::Rb(2))).unwrap();
        let pilots = dmrs_symbols(&dmrs, &layout);
        let profile = builtin_tdl("TDL-B100", None, 50.0).unwrap();
        let corr = SpatialCorrelation::preset(CorrelationPreset::MediumA, 2, 2);
        let h = sample_tdl(&profile, &corr, &carrier, 2, 2, seed);
        let plan = make_precoder(PrecodingMode::Random, &h, &layout, 2, seed).unwrap();
        transmit_dmrs(
            &h,
            &plan,
            &layout,
            &pilots,
            TransmitParams { snr_db, amp: 1.0, seed, strict_snr: false },
        )
        .unwrap()
    }

    fn random_estimate(obs: &Observation, seed: u64) -> Array4<C64> {
        let mut rng = rng_for(seed, "random-estimate", 0);
        Array4::from_shape_fn(obs.g_true.raw_dim(), |_| {
            C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn exact_noiseless_estimate_gives_zero_residual() {
        let obs = obs_2x2(4, f64::INFINITY, 3);
        let fb = lm_gradient(&obs, &obs.g_true);
        assert!(fb.delta_y.iter().all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn residual_is_zero_off_mask() {
        let obs = obs_2x2(4, 10.0, 4);
        let fb = lm_gradient(&obs, &random_estimate(&obs, 9));
        for f in 0..obs.n_subcarriers() {
            for t in 0..SYMBOLS_PER_SLOT {
                if obs.layout.mask[[f, t]] == 0 {
                    assert_eq!(fb.delta_y[[0, f, t]], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn score_matches_central_finite_differences() {
        // d/dRe and d/dIm of the log-likelihood vs the analytic score,
        // rel err <= 1e-5 at 64-bit over random 2x2 instances.
        let eps = 1e-6;
        for inst in 0..20 {
            let obs = obs_2x2(4, 10.0, 100 + inst);
            let h0 = random_estimate(&obs, 200 + inst);
            let sigma = obs.sigma;
            let fb = lm_gradient(&obs, &h0);
            let score = gaussian_score(&fb, sigma);
            let mut rng = rng_for(300 + inst, "probe", 0);
            for _ in 0..12 {
                let j = rng.random_range(0..2);
                let l = rng.random_range(0..2);
                let f = rng.random_range(0..obs.n_subcarriers());
                let t = obs.layout.dmrs.symbol_indices
                    [rng.random_range(0..obs.layout.dmrs.symbol_indices.len())];
                if obs.layout.mask[[f, t]] == 0 {
                    continue;
                }
                let mut plus = h0.clone();
                let mut minus = h0.clone();
                plus[[j, l, f, t]] += C64::new(eps, 0.0);
                minus[[j, l, f, t]] -= C64::new(eps, 0.0);
                let num_re = (log_likelihood(&obs, &plus, sigma)
                    - log_likelihood(&obs, &minus, sigma))
                    / (2.0 * eps);
                let mut plus = h0.clone();
                let mut minus = h0.clone();
                plus[[j, l, f, t]] += C64::new(0.0, eps);
                minus[[j, l, f, t]] -= C64::new(0.0, eps);
                let num_im = (log_likelihood(&obs, &plus, sigma)
                    - log_likelihood(&obs, &minus, sigma))
                    / (2.0 * eps);
                let a = score[[j, l, f, t]];
                let denom = a.norm().max(1e-9);
                assert!(
                    ((num_re - a.re).powi(2) + (num_im - a.im).powi(2)).sqrt() / denom < 1e-5,
                    "instance {inst}: fd ({num_re}, {num_im}) vs analytic {a}"
                );
            }
        }
    }

    #[test]
    fn score_is_layer_equivariant() {
        let obs = obs_2x2(4, 15.0, 7);
        let h0 = random_estimate(&obs, 8);
        let perm = [1usize, 0];

        let fb = lm_gradient(&obs, &h0);
        let score = gaussian_score(&fb, obs.sigma);

        // Permute estimate columns and pilots together.
        let mut h_perm = h0.clone();
        for (new, &old) in perm.iter().enumerate() {
            h_perm
                .index_axis_mut(ndarray::Axis(1), new)
                .assign(&h0.index_axis(ndarray::Axis(1), old));
        }
        let mut obs_perm = obs.clone();
        obs_perm.pilots = permute_layers(&obs.pilots, &perm).unwrap();
        let fb_p = lm_gradient(&obs_perm, &h_perm);
        let score_p = gaussian_score(&fb_p, obs.sigma);

        for j in 0..2 {
            for (new, &old) in perm.iter().enumerate() {
                for f in 0..obs.n_subcarriers() {
                    for t in 0..SYMBOLS_PER_SLOT {
                        assert!(
                            (score_p[[j, new, f, t]] - score[[j, old, f, t]]).norm() < 1e-12,
                            "equivariance violated at j={j} l={new} f={f} t={t}"
                        );
                    }
                }
            }
        }
    }
}
