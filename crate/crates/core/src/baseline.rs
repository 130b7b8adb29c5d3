//! Classical channel estimators and the NMSE metric.
//!
//! * [`ls_raw`] — per-RE least squares at the DMRS tones, no port separation.
//! * [`ls_occ`] — OCC de-spreading over pilot pairs followed by
//!   nearest-pilot (frequency) / linear (time) interpolation.
//! * [`genie_lmmse`] — per-PRG, per-stream Wiener smoothing granted the exact
//!   generative statistics (taps, Doppler, correlation matrices, noise std).
//!
//! The genie works on OCC-combined pilot pairs when two ports are scheduled;
//! the residual inter-port leakage caused by channel variation across a pair
//! is folded into the effective noise floor as white noise. This keeps the
//! baseline per-stream and per-PRG: it cannot exploit observations outside
//! the PRG it is filtering, which is precisely the processing-gain gap the
//! recurrent estimator targets.

use nalgebra::{DMatrix, DVector};
use ndarray::Array4;
use thiserror::Error;

use crate::chansim::Observation;
use crate::grid::{GridLayout, SYMBOLS_PER_SLOT};
use crate::C64;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("estimator `{0}` needs genie metadata")]
    MissingGenie(String),
    #[error("covariance solve failed even with ridge repair")]
    SolveFailed,
}

/// A full-grid estimate of the precoded channel.
#[derive(Debug, Clone)]
pub struct EstimateGrid {
    /// Shape `[n_rx, n_layers, n_subcarriers, 14]`.
    pub g_hat: Array4<C64>,
    pub estimator_id: String,
}

/// Raw per-RE least squares y_j x_k^H at the DMRS tones, zero elsewhere.
/// No OCC combining, so co-scheduled layers leak into each other.
pub fn ls_raw(obs: &Observation) -> EstimateGrid {
    let n_rx = obs.n_rx();
    let n_layers = obs.n_layers();
    let n_sc = obs.n_subcarriers();
    let layout = &obs.layout;
    let mut g_hat = Array4::<C64>::zeros((n_rx, n_layers, n_sc, SYMBOLS_PER_SLOT));
    for j in 0..n_rx {
        for l in 0..n_layers {
            for &f in &layout.pilot_subcarriers {
                for &t in &layout.dmrs.symbol_indices {
                    g_hat[[j, l, f, t]] = obs.y[[j, f, t]] * obs.pilots[[l, f, t]].conj();
                }
            }
        }
    }
    EstimateGrid {
        g_hat,
        estimator_id: "ls_raw".to_string(),
    }
}

/// OCC-combined LS value for one pilot pair.
///
/// With the base-sequence de-spread values r1, r2 on the two tones of a pair,
/// port 0 is (r1+r2)/2 and port 1 is (r1-r2)/2. A pair with a missing partner
/// falls back to the single tone: port 0 takes the de-spread value, port 1
/// cannot be separated and reads zero.
fn combine_pair(r1: C64, r2: Option<C64>, port: usize) -> C64 {
    match r2 {
        Some(r2) => {
            if port == 0 {
                (r1 + r2) * 0.5
            } else {
                (r1 - r2) * 0.5
            }
        }
        None => {
            if port == 0 {
                r1
            } else {
                C64::new(0.0, 0.0)
            }
        }
    }
}

/// De-spread measurement grid: one combined value per (OCC pair, DMRS
/// symbol, rx, port), positioned at the pair's mean subcarrier.
struct CombinedPilots {
    /// Effective frequency position of each pair, in subcarrier units.
    pair_pos: Vec<f64>,
    /// `values[rx][port][pair][dmrs_symbol]`.
    values: Vec<Vec<Vec<Vec<C64>>>>,
}

fn combine_occ(obs: &Observation) -> CombinedPilots {
    let layout = &obs.layout;
    let n_rx = obs.n_rx();
    let n_layers = obs.n_layers();
    let n_pairs = layout.occ_pairs.len();
    let n_sym = layout.dmrs.symbol_indices.len();
    let pair_pos = layout
        .occ_pairs
        .iter()
        .map(|&(a, b)| (a + b) as f64 / 2.0)
        .collect();
    let mut values = vec![vec![vec![vec![C64::new(0.0, 0.0); n_sym]; n_pairs]; n_layers]; n_rx];
    for j in 0..n_rx {
        for (pi, &(f1, f2)) in layout.occ_pairs.iter().enumerate() {
            for (si, &t) in layout.dmrs.symbol_indices.iter().enumerate() {
                // De-spread with the port-0 (all-plus) base sequence.
                let r1 = obs.y[[j, f1, t]] * obs.pilots[[0, f1, t]].conj();
                let r2 = obs.y[[j, f2, t]] * obs.pilots[[0, f2, t]].conj();
                for port in 0..n_layers {
                    values[j][port][pi][si] = combine_pair(r1, Some(r2), port);
                }
            }
        }
    }
    CombinedPilots { pair_pos, values }
}

/// OCC-combined LS with nearest-pilot interpolation in frequency and linear
/// interpolation in time (held at the slot edges).
pub fn ls_occ(obs: &Observation) -> EstimateGrid {
    let layout = &obs.layout;
    let n_rx = obs.n_rx();
    let n_layers = obs.n_layers();
    let n_sc = obs.n_subcarriers();
    let combined = combine_occ(obs);
    let dmrs_syms = &layout.dmrs.symbol_indices;

    // Nearest pair per subcarrier (ties resolve to the lower pair).
    let nearest: Vec<usize> = (0..n_sc)
        .map(|f| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (pi, &pos) in combined.pair_pos.iter().enumerate() {
                let d = (f as f64 - pos).abs();
                if d < best_d {
                    best_d = d;
                    best = pi;
                }
            }
            best
        })
        .collect();

    let mut g_hat = Array4::<C64>::zeros((n_rx, n_layers, n_sc, SYMBOLS_PER_SLOT));
    for j in 0..n_rx {
        for l in 0..n_layers {
            for f in 0..n_sc {
                let pi = nearest[f];
                let vals = &combined.values[j][l][pi];
                for t in 0..SYMBOLS_PER_SLOT {
                    g_hat[[j, l, f, t]] = interp_time(vals, dmrs_syms, t);
                }
            }
        }
    }
    EstimateGrid {
        g_hat,
        estimator_id: "ls_occ".to_string(),
    }
}

/// Linear interpolation across DMRS symbols, held constant outside the span.
fn interp_time(vals: &[C64], dmrs_syms: &[usize], t: usize) -> C64 {
    debug_assert_eq!(vals.len(), dmrs_syms.len());
    if t <= dmrs_syms[0] {
        return vals[0];
    }
    if t >= *dmrs_syms.last().unwrap() {
        return *vals.last().unwrap();
    }
    let hi = dmrs_syms.iter().position(|&s| s >= t).unwrap();
    let lo = hi - 1;
    let (t0, t1) = (dmrs_syms[lo] as f64, dmrs_syms[hi] as f64);
    let w = (t as f64 - t0) / (t1 - t0);
    vals[lo] * (1.0 - w) + vals[hi] * w
}

/// Diagonal ridge used by every covariance solve.
pub const SOLVE_RIDGE: f64 = 1e-12;

/// Wiener estimate g_hat = R_dp (R_pp + noise_var I)^-1 v via a Hermitian
/// Cholesky solve. A non-PSD system is repaired by escalating the ridge,
/// with a warning log.
pub fn wiener_filter(
    r_pp: &DMatrix<C64>,
    r_dp: &DMatrix<C64>,
    noise_var: f64,
    v: &DVector<C64>,
) -> Result<DVector<C64>, EstimateError> {
    let n = r_pp.nrows();
    let mut ridge = SOLVE_RIDGE;
    for attempt in 0..8 {
        let mut a = r_pp.clone();
        for i in 0..n {
            a[(i, i)] += C64::new(noise_var + ridge, 0.0);
        }
        if let Some(chol) = a.cholesky() {
            let x = chol.solve(v);
            return Ok(r_dp * x);
        }
        if attempt == 0 {
            log::warn!("covariance not PSD at ridge {ridge:.1e}; repairing");
        }
        ridge *= 100.0;
    }
    Err(EstimateError::SolveFailed)
}

/// Positions of every RE in a PRG as (frequency Hz, time seconds).
fn prg_re_positions(layout: &GridLayout, prg: usize) -> Vec<(f64, f64)> {
    let scs = layout.carrier.scs.hz();
    let t_sym = layout.carrier.scs.symbol_duration();
    let mut out = Vec::new();
    for f in layout.prg_subcarriers(prg) {
        for t in 0..SYMBOLS_PER_SLOT {
            out.push((f as f64 * scs, t as f64 * t_sym));
        }
    }
    out
}

fn separable_cov(
    a: &[(f64, f64)],
    b: &[(f64, f64)],
    rho: f64,
    genie: &crate::chansim::GenieInfo,
) -> DMatrix<C64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        let df = a[i].0 - b[j].0;
        let dt = a[i].1 - b[j].1;
        genie.r_f(df) * genie.r_t(dt) * rho
    })
}

/// Genie-aided per-PRG, per-stream Wiener smoothing.
///
/// Measurements are per-tone LS values for a single layer and OCC-combined
/// pair values for two layers; in the latter case the de-spread residual of
/// the co-scheduled port (driven by channel variation across the pair) is
/// treated as extra white noise.
pub fn genie_lmmse(obs: &Observation) -> Result<EstimateGrid, EstimateError> {
    let layout = &obs.layout;
    let n_rx = obs.n_rx();
    let n_layers = obs.n_layers();
    let n_sc = obs.n_subcarriers();
    let genie = &obs.genie;
    let scs = layout.carrier.scs.hz();
    let t_sym = layout.carrier.scs.symbol_duration();

    let mut g_hat = Array4::<C64>::zeros((n_rx, n_layers, n_sc, SYMBOLS_PER_SLOT));
    let combined = if n_layers == 2 {
        Some(combine_occ(obs))
    } else {
        None
    };

    for prg in 0..layout.n_prg() {
        let range = layout.prg_subcarriers(prg);
        let re_pos = prg_re_positions(layout, prg);
        let w = &obs.plan.w[prg];
        // Per-stream prior power: [R_rx]_jj [W^H R_tx W]_ll c.
        let wrw = w.adjoint() * &genie.r_tx * w;

        // Measurement positions within this PRG.
        let (meas_pos, pair_indices): (Vec<(f64, f64)>, Vec<usize>) = match &combined {
            None => {
                let mut pos = Vec::new();
                for &f in &layout.pilot_subcarriers {
                    if range.contains(&f) {
                        for &t in &layout.dmrs.symbol_indices {
                            pos.push((f as f64 * scs, t as f64 * t_sym));
                        }
                    }
                }
                (pos, Vec::new())
            }
            Some(c) => {
                let mut pos = Vec::new();
                let mut idx = Vec::new();
                for (pi, &(a, b)) in layout.occ_pairs.iter().enumerate() {
                    if range.contains(&a) && range.contains(&b) {
                        for &t in &layout.dmrs.symbol_indices {
                            pos.push((c.pair_pos[pi] * scs, t as f64 * t_sym));
                        }
                        idx.push(pi);
                    }
                }
                (pos, idx)
            }
        };
        if meas_pos.is_empty() {
            continue;
        }

        // Residual leakage variance after OCC combining: the co-port term
        // (g(f1) - g(f2))/2 has variance rho_other (1 - Re r_f(pair df)) / 2.
        let pair_df = layout
            .occ_pairs
            .first()
            .map(|&(a, b)| (b as f64 - a as f64) * scs)
            .unwrap_or(0.0);
        let leak_shape = 0.5 * (1.0 - genie.r_f(pair_df).re).max(0.0);

        for j in 0..n_rx {
            let rx_gain = genie.r_rx[(j, j)].re;
            for l in 0..n_layers {
                let rho = rx_gain * wrw[(l, l)].re * obs.amp;
                let (noise_var, v) = match &combined {
                    None => {
                        let mut v = Vec::with_capacity(meas_pos.len());
                        for &f in &layout.pilot_subcarriers {
                            if range.contains(&f) {
                                for &t in &layout.dmrs.symbol_indices {
                                    v.push(obs.y[[j, f, t]] * obs.pilots[[l, f, t]].conj());
                                }
                            }
                        }
                        (obs.sigma * obs.sigma, DVector::from_vec(v))
                    }
                    Some(c) => {
                        let mut v = Vec::with_capacity(meas_pos.len());
                        for &pi in &pair_indices {
                            for si in 0..layout.dmrs.symbol_indices.len() {
                                v.push(c.values[j][l][pi][si]);
                            }
                        }
                        let other = 1 - l;
                        let rho_other = rx_gain * wrw[(other, other)].re * obs.amp;
                        (
                            0.5 * obs.sigma * obs.sigma + rho_other * leak_shape,
                            DVector::from_vec(v),
                        )
                    }
                };
                let r_pp = separable_cov(&meas_pos, &meas_pos, rho, genie);
                let r_dp = separable_cov(&re_pos, &meas_pos, rho, genie);
                let est = wiener_filter(&r_pp, &r_dp, noise_var, &v)?;
                let mut idx = 0usize;
                for f in range.clone() {
                    for t in 0..SYMBOLS_PER_SLOT {
                        g_hat[[j, l, f, t]] = est[idx];
                        idx += 1;
                    }
                }
            }
        }
    }

    Ok(EstimateGrid {
        g_hat,
        estimator_id: "genie_lmmse".to_string(),
    })
}

/// Mean squared error per RE, summed over rx antennas and layers (channel
/// power normalization is omitted; simulated channels are unit-powered).
pub fn nmse(est: &EstimateGrid, obs: &Observation) -> Result<f64, EstimateError> {
    if est.g_hat.shape() != obs.g_true.shape() {
        return Err(EstimateError::ShapeMismatch(format!(
            "estimate {:?} vs truth {:?}",
            est.g_hat.shape(),
            obs.g_true.shape()
        )));
    }
    let n_re = (obs.n_subcarriers() * SYMBOLS_PER_SLOT) as f64;
    let total: f64 = est
        .g_hat
        .iter()
        .zip(obs.g_true.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(total / n_re)
}

/// Channel estimators addressable by string id.
pub trait Estimator: Send + Sync {
    fn id(&self) -> &str;
    fn estimate(&self, obs: &Observation) -> Result<EstimateGrid, EstimateError>;
}

pub struct LsRaw;
impl Estimator for LsRaw {
    fn id(&self) -> &str {
        "ls_raw"
    }
    fn estimate(&self, obs: &Observation) -> Result<EstimateGrid, EstimateError> {
        Ok(ls_raw(obs))
    }
}

pub struct LsOcc;
impl Estimator for LsOcc {
    fn id(&self) -> &str {
        "ls_occ"
    }
    fn estimate(&self, obs: &Observation) -> Result<EstimateGrid, EstimateError> {
        Ok(ls_occ(obs))
    }
}

pub struct GenieLmmse;
impl Estimator for GenieLmmse {
    fn id(&self) -> &str {
        "genie_lmmse"
    }
    fn estimate(&self, obs: &Observation) -> Result<EstimateGrid, EstimateError> {
        genie_lmmse(obs)
    }
}

/// Oracle row: returns the ground truth (NMSE 0 by construction).
pub struct Truth;
impl Estimator for Truth {
    fn id(&self) -> &str {
        "truth"
    }
    fn estimate(&self, obs: &Observation) -> Result<EstimateGrid, EstimateError> {
        Ok(EstimateGrid {
            g_hat: obs.g_true.clone(),
            estimator_id: "truth".to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chansim::{
        builtin_tdl, make_precoder, sample_tdl, transmit_dmrs, CorrelationPreset, PrecodingMode,
        SpatialCorrelation, Tap, TdlProfile, TransmitParams,
    };
    use crate::grid::{
        build_grid, dmrs_symbols, BundleSize, CarrierConfig, DmrsConfig, DmrsType, PrgConfig, Scs,
    };
    use crate::util::rng_for;
    use rand::Rng;

    fn flat_profile() -> TdlProfile {
        TdlProfile {
            name: "flat".to_string(),
            taps: vec![Tap { delay_s: 0.0, power: 1.0, los: false }],
            max_doppler_hz: 0.0,
        }
    }

    fn make_obs(
        n_rb: usize,
        layers: usize,
        profile: &TdlProfile,
        preset: CorrelationPreset,
        mode: PrecodingMode,
        snr_db: f64,
        seed: u64,
    ) -> Observation {
        let carrier = CarrierConfig::new(Scs::Khz30, n_rb).unwrap();
        let dmrs = DmrsConfig::new(DmrsType::Type1, 2, layers, 23).unwrap();
        let layout = build_grid(carrier, dmrs.clone(), PrgConfig::new(BundleSize::Rb(4))).unwrap();
        let pilots = dmrs_symbols(&dmrs, &layout);
        let corr = SpatialCorrelation::preset(preset, 2, 2);
        let h = sample_tdl(profile, &corr, &carrier, 2, 2, seed);
        let plan = make_precoder(mode, &h, &layout, layers, seed ^ 0x5a5a).unwrap();
        transmit_dmrs(
            &h,
            &plan,
            &layout,
            &pilots,
            TransmitParams { snr_db, amp: 1.0, seed, strict_snr: false },
        )
        .unwrap()
    }

    #[test]
    fn ls_raw_single_layer_noiseless_is_exact_at_pilots() {
        let obs = make_obs(
            4,
            1,
            &builtin_tdl("TDL-B100", None, 0.0).unwrap(),
            CorrelationPreset::Low,
            PrecodingMode::Wideband,
            f64::INFINITY,
            5,
        );
        let est = ls_raw(&obs);
        for &f in &obs.layout.pilot_subcarriers {
            for &t in &obs.layout.dmrs.symbol_indices {
                for j in 0..2 {
                    assert!(
                        (est.g_hat[[j, 0, f, t]] - obs.g_true[[j, 0, f, t]]).norm() < 1e-10,
                        "f={f} t={t}"
                    );
                }
            }
        }
    }

    #[test]
    fn ls_raw_zero_input_gives_zero() {
        let mut obs = make_obs(
            4,
            1,
            &flat_profile(),
            CorrelationPreset::Low,
            PrecodingMode::Wideband,
            10.0,
            6,
        );
        obs.y.fill(C64::new(0.0, 0.0));
        let est = ls_raw(&obs);
        assert!(est.g_hat.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn ls_occ_flat_noiseless_two_layers_is_exact() {
        // Flat channel: leakage cancels exactly under the OCC.
        let obs = make_obs(
            4,
            2,
            &flat_profile(),
            CorrelationPreset::MediumA,
            PrecodingMode::Random,
            f64::INFINITY,
            7,
        );
        let est = ls_occ(&obs);
        for j in 0..2 {
            for l in 0..2 {
                for f in 0..obs.n_subcarriers() {
                    for t in 0..SYMBOLS_PER_SLOT {
                        assert!(
                            (est.g_hat[[j, l, f, t]] - obs.g_true[[j, l, f, t]]).norm() < 1e-10,
                            "j={j} l={l} f={f} t={t}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn occ_residual_leakage_is_half_delta() {
        // Symbolic 2x2 solve: if the co-port channel differs by delta across
        // the pair, half of it leaks into the other layer.
        let g0 = C64::new(0.8, -0.1);
        let g1a = C64::new(0.3, 0.4);
        let delta = C64::new(0.05, -0.02);
        let g1b = g1a + delta;
        // De-spread values with unit base pilots: r1 = g0 + g1a, r2 = g0 - g1b.
        let r1 = g0 + g1a;
        let r2 = g0 - g1b;
        let p0 = combine_pair(r1, Some(r2), 0);
        let p1 = combine_pair(r1, Some(r2), 1);
        assert!((p0 - (g0 - delta * 0.5)).norm() < 1e-15);
        assert!((p1 - (g1a + delta * 0.5)).norm() < 1e-15);
        assert!(((p0 - g0).norm() - delta.norm() * 0.5).abs() < 1e-15);
    }

    #[test]
    fn combine_pair_fallback_without_partner() {
        let r = C64::new(0.5, 0.5);
        assert_eq!(combine_pair(r, None, 0), r);
        assert_eq!(combine_pair(r, None, 1), C64::new(0.0, 0.0));
    }

    #[test]
    fn ls_occ_single_layer_equals_pair_average_of_ls_raw() {
        let obs = make_obs(
            4,
            1,
            &builtin_tdl("TDL-C300", None, 0.0).unwrap(),
            CorrelationPreset::Low,
            PrecodingMode::Wideband,
            f64::INFINITY,
            8,
        );
        let raw = ls_raw(&obs);
        let occ = ls_occ(&obs);
        for &(f1, f2) in &obs.layout.occ_pairs {
            for &t in &obs.layout.dmrs.symbol_indices {
                let avg = (raw.g_hat[[0, 0, f1, t]] + raw.g_hat[[0, 0, f2, t]]) * 0.5;
                assert!((occ.g_hat[[0, 0, f1, t]] - avg).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn wiener_scalar_toy_gain_and_nmse() {
        // One pilot, prior var 1, noise var 1: gain 1/2, NMSE 1/2.
        let r = DMatrix::from_element(1, 1, C64::new(1.0, 0.0));
        let mut rng = rng_for(9, "wiener-toy", 0);
        let mut draw = || {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let m = (-u1.ln()).sqrt();
            let th = std::f64::consts::TAU * u2;
            C64::new(m * th.cos(), m * th.sin())
        };
        let n_mc = 100_000;
        let mut err = 0.0;
        for _ in 0..n_mc {
            let g = draw();
            let n = draw();
            let v = DVector::from_vec(vec![g + n]);
            let est = wiener_filter(&r, &r, 1.0, &v).unwrap();
            // Gain is exactly 1/(1+1).
            assert!((est[0] - (g + n) * 0.5).norm() < 1e-9);
            err += (est[0] - g).norm_sqr();
        }
        let nmse = err / n_mc as f64;
        assert!((nmse - 0.5).abs() < 0.02, "scalar Wiener NMSE {nmse}");
    }

    #[test]
    fn genie_reproduces_pilot_ls_in_noiseless_limit() {
        // Single layer, full-rank pilot covariance, sigma -> 0.
        let two_tap = TdlProfile {
            name: "two-tap".to_string(),
            taps: vec![
                Tap { delay_s: 0.0, power: 0.5, los: false },
                Tap { delay_s: 120e-9, power: 0.5, los: false },
            ],
            max_doppler_hz: 80.0,
        };
        let obs = make_obs(
            4,
            1,
            &two_tap,
            CorrelationPreset::Low,
            PrecodingMode::Wideband,
            f64::INFINITY,
            10,
        );
        let genie = genie_lmmse(&obs).unwrap();
        let raw = ls_raw(&obs);
        for &f in &obs.layout.pilot_subcarriers {
            for &t in &obs.layout.dmrs.symbol_indices {
                assert!(
                    (genie.g_hat[[0, 0, f, t]] - raw.g_hat[[0, 0, f, t]]).norm() < 1e-4,
                    "f={f} t={t}: {} vs {}",
                    genie.g_hat[[0, 0, f, t]],
                    raw.g_hat[[0, 0, f, t]]
                );
            }
        }
    }

    #[test]
    fn genie_flat_channel_is_shrunk_pilot_average() {
        // Rank-one covariance: the Wiener output is constant over the PRG and
        // equals the pilot mean shrunk by P rho / (P rho + sigma^2).
        let obs = make_obs(
            4,
            1,
            &flat_profile(),
            CorrelationPreset::Low,
            PrecodingMode::Wideband,
            10.0,
            11,
        );
        let genie = genie_lmmse(&obs).unwrap();
        let raw = ls_raw(&obs);
        let layout = &obs.layout;
        let range = layout.prg_subcarriers(0);
        let mut vals = Vec::new();
        for &f in &layout.pilot_subcarriers {
            if range.contains(&f) {
                for &t in &layout.dmrs.symbol_indices {
                    vals.push(raw.g_hat[[0, 0, f, t]]);
                }
            }
        }
        let p = vals.len() as f64;
        let mean = vals.iter().sum::<C64>() / p;
        let sigma2 = obs.sigma * obs.sigma;
        let expect = mean * (p / (p + sigma2));
        for f in range {
            for t in 0..SYMBOLS_PER_SLOT {
                assert!(
                    (genie.g_hat[[0, 0, f, t]] - expect).norm() < 1e-6,
                    "f={f} t={t}"
                );
            }
        }
    }

    #[test]
    fn nmse_examples() {
        let obs = make_obs(
            4,
            2,
            &builtin_tdl("TDL-B100", None, 50.0).unwrap(),
            CorrelationPreset::MediumA,
            PrecodingMode::Random,
            20.0,
            12,
        );
        // Perfect estimate -> 0.
        let truth = Truth.estimate(&obs).unwrap();
        assert_eq!(nmse(&truth, &obs).unwrap(), 0.0);
        // Constant offset eps on every entry: NMSE = n_rx n_layers eps^2.
        let eps = 0.1;
        let mut shifted = truth.clone();
        shifted.g_hat.mapv_inplace(|v| v + C64::new(eps, 0.0));
        let expect = 2.0 * 2.0 * eps * eps;
        assert!((nmse(&shifted, &obs).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn nmse_zero_estimator_near_stream_count() {
        // Unit-power streams: the zero estimator scores ~ n_rx * n_layers.
        let mut acc = 0.0;
        let n_mc = 60;
        for i in 0..n_mc {
            let obs = make_obs(
                4,
                2,
                &builtin_tdl("TDL-B100", None, 0.0).unwrap(),
                CorrelationPreset::Low,
                PrecodingMode::Random,
                20.0,
                100 + i,
            );
            let zero = EstimateGrid {
                g_hat: Array4::zeros(obs.g_true.raw_dim()),
                estimator_id: "zero".to_string(),
            };
            acc += nmse(&zero, &obs).unwrap();
        }
        let mean = acc / n_mc as f64;
        assert!((mean - 4.0).abs() < 0.4, "zero-estimator NMSE {mean}");
    }

    #[test]
    fn nmse_shape_mismatch_is_error() {
        let obs = make_obs(
            4,
            1,
            &flat_profile(),
            CorrelationPreset::Low,
            PrecodingMode::Wideband,
            10.0,
            13,
        );
        let bad = EstimateGrid {
            g_hat: Array4::zeros((2, 2, 12, SYMBOLS_PER_SLOT)),
            estimator_id: "bad".to_string(),
        };
        assert!(nmse(&bad, &obs).is_err());
    }

    #[test]
    fn genie_prg_locality() {
        // Scrambling observations outside PRG 0 must not change PRG 0 output.
        let obs = make_obs(
            8,
            2,
            &builtin_tdl("TDL-B100", None, 100.0).unwrap(),
            CorrelationPreset::MediumA,
            PrecodingMode::Random,
            15.0,
            14,
        );
        let base = genie_lmmse(&obs).unwrap();
        let mut tampered = obs.clone();
        let range0 = obs.layout.prg_subcarriers(0);
        for j in 0..2 {
            for f in 0..obs.n_subcarriers() {
                if range0.contains(&f) {
                    continue;
                }
                for t in 0..SYMBOLS_PER_SLOT {
                    tampered.y[[j, f, t]] *= C64::new(-3.0, 1.5);
                }
            }
        }
        let after = genie_lmmse(&tampered).unwrap();
        for j in 0..2 {
            for l in 0..2 {
                for f in range0.clone() {
                    for t in 0..SYMBOLS_PER_SLOT {
                        assert_eq!(
                            base.g_hat[[j, l, f, t]],
                            after.g_hat[[j, l, f, t]],
                            "PRG 0 output changed"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn genie_beats_ls_occ_on_fading_channel() {
        // Spot check of the dominance invariant (the full sweep lives in the
        // integration tests).
        let mut nmse_g = 0.0;
        let mut nmse_l = 0.0;
        let n_mc = 40;
        for i in 0..n_mc {
            let obs = make_obs(
                8,
                2,
                &builtin_tdl("TDL-B100", None, 100.0).unwrap(),
                CorrelationPreset::MediumA,
                PrecodingMode::Random,
                10.0,
                500 + i,
            );
            nmse_g += nmse(&genie_lmmse(&obs).unwrap(), &obs).unwrap();
            nmse_l += nmse(&ls_occ(&obs), &obs).unwrap();
        }
        assert!(
            nmse_g < nmse_l,
            "genie {nmse_g} should beat ls_occ {nmse_l}"
        );
    }
}
