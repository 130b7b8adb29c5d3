//! Fading MIMO channel simulation and noisy DMRS observations.
//!
//! Channels are sampled per slot: tapped-delay-line profiles (standard
//! tables, randomized draws, or user files) with sum-of-sinusoids Doppler and
//! Kronecker spatial correlation, or a CDL-like cluster model with uniform
//! linear array steering. Observations follow y = (H W) x sqrt(c) + n on the
//! DMRS positions, with the precoded channel G = H W sqrt(c) retained on the
//! full grid as ground truth.

mod correlation;
mod precoding;
mod profiles;
mod sos;

pub use correlation::{hermitian_sqrt, preset_coefficients, CorrelationPreset, SpatialCorrelation};
pub use precoding::{gram_schmidt, make_precoder, PrecodingMode, PrecodingPlan};
pub use profiles::{
    builtin_cdl, builtin_table, builtin_tdl, cdl_from_text, random_tdl, split_profile_shorthand,
    tdl_from_file, tdl_from_text, CdlCluster, CdlProfile, Tap, TdlProfile,
};
pub use sos::{TapProcess, LOS_DOPPLER_FACTOR, SINUSOIDS_PER_TAP};

use ndarray::{Array3, Array4};
use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::grid::{CarrierConfig, GridLayout, PilotGrid, SYMBOLS_PER_SLOT};
use crate::util::rng_for;
use crate::C64;

#[derive(Debug, Error)]
pub enum ChansimError {
    #[error("unknown channel profile `{0}`")]
    UnknownProfile(String),
    #[error("cannot read tap table: {0}")]
    MissingTable(String),
    #[error("bad tap table `{name}` line {line}: {reason}")]
    BadTable {
        name: String,
        line: usize,
        reason: String,
    },
    #[error("correlation matrix is not PSD: {0}")]
    NotPsd(String),
    #[error("n_layers = {n_layers} exceeds n_tx = {n_tx}")]
    LayerExceedsTx { n_layers: usize, n_tx: usize },
    #[error("snr_db = {0} outside the supported range 0..=40 dB")]
    SnrOutOfRange(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Time-correlation component of one tap or cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeCorr {
    /// Rayleigh tap with the classic Doppler spectrum.
    Jakes(f64),
    /// Deterministic phasor at a fixed Doppler shift (LOS tap, CDL cluster).
    Phasor(f64),
}

/// Exact generative statistics of a sampled channel, granted to the genie
/// estimator.
#[derive(Debug, Clone)]
pub struct GenieInfo {
    pub label: String,
    /// (delay seconds, power) per tap; powers sum to one.
    pub freq_taps: Vec<(f64, f64)>,
    /// (time correlation kind, power) per tap; powers sum to one.
    pub time_components: Vec<(TimeCorr, f64)>,
    pub max_doppler_hz: f64,
    pub r_tx: DMatrix<C64>,
    pub r_rx: DMatrix<C64>,
}

impl GenieInfo {
    /// Frequency correlation at spacing `delta_f` Hz:
    /// r_f = sum_p P_p exp(-j 2 pi delta_f tau_p).
    pub fn r_f(&self, delta_f_hz: f64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for &(tau, p) in &self.freq_taps {
            let phi = -std::f64::consts::TAU * delta_f_hz * tau;
            acc += C64::new(p, 0.0) * C64::new(phi.cos(), phi.sin());
        }
        acc
    }

    /// Time correlation at lag `delta_t` seconds, aggregated over taps.
    pub fn r_t(&self, delta_t_s: f64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for &(kind, p) in &self.time_components {
            acc += C64::new(p, 0.0)
                * match kind {
                    TimeCorr::Jakes(fd) => {
                        C64::new(libm::j0(std::f64::consts::TAU * fd * delta_t_s), 0.0)
                    }
                    TimeCorr::Phasor(f) => {
                        let phi = std::f64::consts::TAU * f * delta_t_s;
                        C64::new(phi.cos(), phi.sin())
                    }
                }
        }
        acc
    }
}

/// One slot of the MIMO channel response with its genie metadata.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// Complex response, shape `[n_rx, n_tx, n_subcarriers, 14]`.
    pub h: Array4<C64>,
    pub genie: GenieInfo,
    pub seed: u64,
}

/// Samples a TDL channel: per-tap sum-of-sinusoids processes, colored across
/// antennas as R_rx^(1/2) H_w (R_tx^(1/2))^T.
pub fn sample_tdl(
    profile: &TdlProfile,
    corr: &SpatialCorrelation,
    carrier: &CarrierConfig,
    n_rx: usize,
    n_tx: usize,
    seed: u64,
) -> ChannelRealization {
    let n_sc = carrier.n_subcarriers();
    let n_taps = profile.taps.len();
    let t_sym = carrier.scs.symbol_duration();
    let scs_hz = carrier.scs.hz();

    // Independent process per (tap, rx, tx); seeds derived by index so the
    // realization does not depend on iteration order.
    let procs: Vec<TapProcess> = (0..n_taps * n_rx * n_tx)
        .map(|idx| {
            let mut rng = rng_for(seed, "tap-process", idx as u64);
            let p = idx / (n_rx * n_tx);
            if profile.taps[p].los {
                TapProcess::los(profile.max_doppler_hz, &mut rng)
            } else {
                TapProcess::rayleigh(profile.max_doppler_hz, &mut rng)
            }
        })
        .collect();

    // Colored per-symbol tap gains.
    let mut colored = vec![DMatrix::<C64>::zeros(n_rx, n_tx); n_taps * SYMBOLS_PER_SLOT];
    for p in 0..n_taps {
        for t in 0..SYMBOLS_PER_SLOT {
            let time = t as f64 * t_sym;
            let white = DMatrix::from_fn(n_rx, n_tx, |j, k| {
                procs[(p * n_rx + j) * n_tx + k].value(time)
            });
            colored[p * SYMBOLS_PER_SLOT + t] =
                &corr.sqrt_rx * white * corr.sqrt_tx.transpose();
        }
    }

    // Per-tap frequency phase ramps.
    let mut phases = vec![C64::new(0.0, 0.0); n_taps * n_sc];
    for (p, tap) in profile.taps.iter().enumerate() {
        for f in 0..n_sc {
            let phi = -std::f64::consts::TAU * (f as f64 * scs_hz) * tap.delay_s;
            phases[p * n_sc + f] = C64::new(phi.cos(), phi.sin());
        }
    }

    let mut h = Array4::<C64>::zeros((n_rx, n_tx, n_sc, SYMBOLS_PER_SLOT));
    for j in 0..n_rx {
        for k in 0..n_tx {
            for t in 0..SYMBOLS_PER_SLOT {
                for (p, tap) in profile.taps.iter().enumerate() {
                    let gain = colored[p * SYMBOLS_PER_SLOT + t][(j, k)] * tap.power.sqrt();
                    for f in 0..n_sc {
                        h[[j, k, f, t]] += gain * phases[p * n_sc + f];
                    }
                }
            }
        }
    }

    let time_components = profile
        .taps
        .iter()
        .map(|tap| {
            let kind = if tap.los {
                TimeCorr::Phasor(LOS_DOPPLER_FACTOR * profile.max_doppler_hz)
            } else {
                TimeCorr::Jakes(profile.max_doppler_hz)
            };
            (kind, tap.power)
        })
        .collect();
    let genie = GenieInfo {
        label: profile.name.clone(),
        freq_taps: profile.taps.iter().map(|t| (t.delay_s, t.power)).collect(),
        time_components,
        max_doppler_hz: profile.max_doppler_hz,
        r_tx: corr.r_tx.clone(),
        r_rx: corr.r_rx.clone(),
    };
    ChannelRealization { h, genie, seed }
}

/// Samples a CDL-like cluster channel with uniform-linear-array steering at
/// half-wavelength spacing. Spatial correlation emerges from the cluster
/// angles rather than Kronecker coloring.
pub fn sample_cdl(
    profile: &CdlProfile,
    carrier: &CarrierConfig,
    n_rx: usize,
    n_tx: usize,
    seed: u64,
) -> ChannelRealization {
    let n_sc = carrier.n_subcarriers();
    let t_sym = carrier.scs.symbol_duration();
    let scs_hz = carrier.scs.hz();
    let mut rng = rng_for(seed, "cdl", 0);
    let travel_dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    struct ClusterDraw {
        doppler_hz: f64,
        phase: f64,
        a_rx: Vec<C64>,
        a_tx: Vec<C64>,
    }
    let steering = |deg: f64, n: usize| -> Vec<C64> {
        (0..n)
            .map(|m| {
                let phi = std::f64::consts::PI * m as f64 * deg.to_radians().sin();
                C64::new(phi.cos(), phi.sin())
            })
            .collect()
    };
    let draws: Vec<ClusterDraw> = profile
        .clusters
        .iter()
        .map(|c| ClusterDraw {
            doppler_hz: profile.max_doppler_hz * (c.aoa_deg.to_radians() - travel_dir).cos(),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            a_rx: steering(c.aoa_deg, n_rx),
            a_tx: steering(c.aod_deg, n_tx),
        })
        .collect();

    let mut h = Array4::<C64>::zeros((n_rx, n_tx, n_sc, SYMBOLS_PER_SLOT));
    for (c, d) in profile.clusters.iter().zip(draws.iter()) {
        let amp = c.power.sqrt();
        for t in 0..SYMBOLS_PER_SLOT {
            let phi_t = std::f64::consts::TAU * d.doppler_hz * (t as f64 * t_sym) + d.phase;
            let gain_t = C64::new(phi_t.cos(), phi_t.sin()) * amp;
            for f in 0..n_sc {
                let phi_f = -std::f64::consts::TAU * (f as f64 * scs_hz) * c.delay_s;
                let g = gain_t * C64::new(phi_f.cos(), phi_f.sin());
                for j in 0..n_rx {
                    for k in 0..n_tx {
                        h[[j, k, f, t]] += g * d.a_rx[j] * d.a_tx[k].conj();
                    }
                }
            }
        }
    }

    // Exact second-order statistics of this model.
    let mut r_rx = DMatrix::<C64>::zeros(n_rx, n_rx);
    let mut r_tx = DMatrix::<C64>::zeros(n_tx, n_tx);
    for (c, d) in profile.clusters.iter().zip(draws.iter()) {
        for a in 0..n_rx {
            for b in 0..n_rx {
                r_rx[(a, b)] += C64::new(c.power, 0.0) * d.a_rx[a] * d.a_rx[b].conj();
            }
        }
        for a in 0..n_tx {
            for b in 0..n_tx {
                r_tx[(a, b)] += C64::new(c.power, 0.0) * d.a_tx[a].conj() * d.a_tx[b];
            }
        }
    }

    let genie = GenieInfo {
        label: profile.name.clone(),
        freq_taps: profile.clusters.iter().map(|c| (c.delay_s, c.power)).collect(),
        time_components: profile
            .clusters
            .iter()
            .zip(draws.iter())
            .map(|(c, d)| (TimeCorr::Phasor(d.doppler_hz), c.power))
            .collect(),
        max_doppler_hz: profile.max_doppler_hz,
        r_tx,
        r_rx,
    };
    ChannelRealization { h, genie, seed }
}

/// Config-level channel description, resolvable by name.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    /// A shipped TDL table, e.g. "TDL-B100" or ("TDL-B", 100 ns).
    TdlStandard {
        profile: String,
        delay_spread_s: Option<f64>,
        doppler_hz: f64,
        corr: CorrelationPreset,
    },
    /// Randomized tap table drawn per slot seed.
    TdlRandom {
        delay_spread_s: f64,
        doppler_hz: f64,
        corr: CorrelationPreset,
    },
    /// Tap table from a file on disk.
    TdlFile {
        path: std::path::PathBuf,
        delay_spread_s: f64,
        doppler_hz: f64,
        corr: CorrelationPreset,
    },
    /// A shipped CDL-like cluster table, e.g. "CDL-A".
    Cdl {
        profile: String,
        delay_spread_s: Option<f64>,
        doppler_hz: f64,
    },
}

/// Samples one channel realization for a config-level spec.
pub fn sample_channel(
    spec: &ChannelSpec,
    carrier: &CarrierConfig,
    n_rx: usize,
    n_tx: usize,
    seed: u64,
) -> Result<ChannelRealization, ChansimError> {
    match spec {
        ChannelSpec::TdlStandard {
            profile,
            delay_spread_s,
            doppler_hz,
            corr,
        } => {
            let p = builtin_tdl(profile, *delay_spread_s, *doppler_hz)?;
            let c = SpatialCorrelation::preset(*corr, n_tx, n_rx);
            Ok(sample_tdl(&p, &c, carrier, n_rx, n_tx, seed))
        }
        ChannelSpec::TdlRandom {
            delay_spread_s,
            doppler_hz,
            corr,
        } => {
            let mut rng = rng_for(seed, "random-profile", 0);
            let p = random_tdl(&mut rng, *delay_spread_s, *doppler_hz);
            let c = SpatialCorrelation::preset(*corr, n_tx, n_rx);
            Ok(sample_tdl(&p, &c, carrier, n_rx, n_tx, seed))
        }
        ChannelSpec::TdlFile {
            path,
            delay_spread_s,
            doppler_hz,
            corr,
        } => {
            let p = tdl_from_file(path, *delay_spread_s, *doppler_hz)?;
            let c = SpatialCorrelation::preset(*corr, n_tx, n_rx);
            Ok(sample_tdl(&p, &c, carrier, n_rx, n_tx, seed))
        }
        ChannelSpec::Cdl {
            profile,
            delay_spread_s,
            doppler_hz,
        } => {
            let p = builtin_cdl(profile, *delay_spread_s, *doppler_hz)?;
            Ok(sample_cdl(&p, carrier, n_rx, n_tx, seed))
        }
    }
}

/// Noisy DMRS observation of one slot together with its ground truth.
#[derive(Debug, Clone)]
pub struct Observation {
    pub layout: GridLayout,
    /// Received samples at DMRS REs, zero elsewhere: `[n_rx, n_sc, 14]`.
    pub y: Array3<C64>,
    /// Per-port pilot values: `[n_layers, n_sc, 14]`.
    pub pilots: PilotGrid,
    /// True noise standard deviation of `y` (genie value).
    pub sigma: f64,
    /// Noise std reported to the estimator (augmentation may perturb it).
    pub sigma_reported: f64,
    /// Precoded ground-truth channel at every RE: `[n_rx, n_layers, n_sc, 14]`.
    pub g_true: Array4<C64>,
    pub snr_db: f64,
    /// Amplification factor c applied to the channel.
    pub amp: f64,
    pub genie: GenieInfo,
    pub plan: PrecodingPlan,
}

impl Observation {
    pub fn n_rx(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn n_layers(&self) -> usize {
        self.pilots.shape()[0]
    }

    pub fn n_subcarriers(&self) -> usize {
        self.y.shape()[1]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransmitParams {
    pub snr_db: f64,
    /// Amplification factor c; the channel seen by the receiver is H·W·sqrt(c).
    pub amp: f64,
    pub seed: u64,
    /// Enforce the supported 0..=40 dB SNR range.
    pub strict_snr: bool,
}

impl Default for TransmitParams {
    fn default() -> Self {
        Self {
            snr_db: 20.0,
            amp: 1.0,
            seed: 0,
            strict_snr: true,
        }
    }
}

/// Synthesizes the received DMRS grid: y = (H W) x sqrt(c) + n on masked REs,
/// with per-RE noise variance 10^(-snr/10).
pub fn transmit_dmrs(
    h: &ChannelRealization,
    plan: &PrecodingPlan,
    layout: &GridLayout,
    pilots: &PilotGrid,
    params: TransmitParams,
) -> Result<Observation, ChansimError> {
    if params.strict_snr && !(0.0..=40.0).contains(&params.snr_db) {
        return Err(ChansimError::SnrOutOfRange(params.snr_db));
    }
    let n_rx = h.h.shape()[0];
    let n_tx = h.h.shape()[1];
    let n_sc = h.h.shape()[2];
    let n_layers = pilots.shape()[0];
    if n_sc != layout.n_subcarriers() || pilots.shape()[1] != n_sc {
        return Err(ChansimError::ShapeMismatch(format!(
            "channel has {n_sc} subcarriers, layout {}",
            layout.n_subcarriers()
        )));
    }
    if plan.w.len() != layout.n_prg() || plan.w[0].nrows() != n_tx || plan.n_layers() != n_layers {
        return Err(ChansimError::ShapeMismatch(
            "precoding plan inconsistent with layout/pilots".to_string(),
        ));
    }

    let sqrt_c = params.amp.sqrt();
    let mut g_true = Array4::<C64>::zeros((n_rx, n_layers, n_sc, SYMBOLS_PER_SLOT));
    for (i, _) in layout.prg_spans.iter().enumerate() {
        let w = &plan.w[i];
        for f in layout.prg_subcarriers(i) {
            for t in 0..SYMBOLS_PER_SLOT {
                for j in 0..n_rx {
                    for l in 0..n_layers {
                        let mut acc = C64::new(0.0, 0.0);
                        for k in 0..n_tx {
                            acc += h.h[[j, k, f, t]] * w[(k, l)];
                        }
                        g_true[[j, l, f, t]] = acc * sqrt_c;
                    }
                }
            }
        }
    }

    let sigma = if params.snr_db.is_infinite() {
        0.0
    } else {
        10f64.powf(-params.snr_db / 20.0)
    };
    let mut rng = rng_for(params.seed, "noise", 0);
    let noise_scale = sigma / 2f64.sqrt();
    let mut y = Array3::<C64>::zeros((n_rx, n_sc, SYMBOLS_PER_SLOT));
    for j in 0..n_rx {
        for f in 0..n_sc {
            for t in 0..SYMBOLS_PER_SLOT {
                if layout.mask[[f, t]] == 0 {
                    continue;
                }
                let mut acc = C64::new(0.0, 0.0);
                for l in 0..n_layers {
                    acc += g_true[[j, l, f, t]] * pilots[[l, f, t]];
                }
                if sigma > 0.0 {
                    let (g0, g1) = gauss_pair(&mut rng);
                    acc += C64::new(noise_scale * g0, noise_scale * g1);
                }
                y[[j, f, t]] = acc;
            }
        }
    }

    Ok(Observation {
        layout: layout.clone(),
        y,
        pilots: pilots.clone(),
        sigma,
        sigma_reported: sigma,
        g_true,
        snr_db: params.snr_db,
        amp: params.amp,
        genie: h.genie.clone(),
        plan: plan.clone(),
    })
}

fn gauss_pair(rng: &mut rand_chacha::ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = std::f64::consts::TAU * u2;
    (r * th.cos(), r * th.sin())
}

/// Two observations of the same channel under independent, unknown random
/// precoders, exposing the relative transformation (W1)^-1 W2 for tests.
#[derive(Debug)]
pub struct MraScenario {
    pub obs: [Observation; 2],
    pub w: [DMatrix<C64>; 2],
    /// (W1)^-1 W2.
    pub relative: DMatrix<C64>,
}

/// The unknown transformation between two precoders.
pub fn relative_transform(w1: &DMatrix<C64>, w2: &DMatrix<C64>) -> DMatrix<C64> {
    w1.clone()
        .lu()
        .solve(w2)
        .expect("precoder must be invertible")
}

/// Builds the canonical two-PRG alignment scenario: one channel realization,
/// two independent square random precoders.
pub fn mra_scenario(seed: u64) -> MraScenario {
    let carrier = CarrierConfig::new(crate::grid::Scs::Khz30, 4).unwrap();
    let dmrs = crate::grid::DmrsConfig::new(crate::grid::DmrsType::Type1, 2, 2, 7).unwrap();
    let layout = crate::grid::build_grid(
        carrier,
        dmrs.clone(),
        crate::grid::PrgConfig::new(crate::grid::BundleSize::Wideband),
    )
    .unwrap();
    let pilots = crate::grid::dmrs_symbols(&dmrs, &layout);

    let profile = builtin_tdl("TDL-B100", None, 0.0).unwrap();
    let corr = SpatialCorrelation::preset(CorrelationPreset::Low, 2, 2);
    let h = sample_tdl(&profile, &corr, &carrier, 2, 2, seed);

    let mut plans = Vec::new();
    for i in 0..2 {
        plans.push(
            make_precoder(
                PrecodingMode::Random,
                &h,
                &layout,
                2,
                crate::util::derive_seed(seed, "mra-precoder", i),
            )
            .unwrap(),
        );
    }
    let obs = [0, 1].map(|i| {
        transmit_dmrs(
            &h,
            &plans[i],
            &layout,
            &pilots,
            TransmitParams {
                snr_db: 20.0,
                amp: 1.0,
                seed: crate::util::derive_seed(seed, "mra-noise", i as u64),
                strict_snr: true,
            },
        )
        .unwrap()
    });
    let w1 = plans[0].w[0].clone();
    let w2 = plans[1].w[0].clone();
    let relative = relative_transform(&w1, &w2);
    MraScenario {
        obs,
        w: [w1, w2],
        relative,
    }
}
