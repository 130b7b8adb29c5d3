//! Sum-of-sinusoids fading processes approximating the Jakes spectrum.
//!
//! Each Rayleigh tap is a Gaussian-weighted sum of sinusoids: complex
//! Gaussian amplitudes on Doppler frequencies f_d·cos(angle) with random
//! angles, giving true Rayleigh envelope statistics and the J0(2π f_d τ)
//! ensemble autocorrelation. LOS taps are deterministic phasors at 0.7·f_d
//! with a random initial phase.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::C64;

pub const SINUSOIDS_PER_TAP: usize = 32;

/// Factor of the maximum Doppler applied to the specular (LOS) component.
pub const LOS_DOPPLER_FACTOR: f64 = 0.7;

#[derive(Debug, Clone)]
pub enum TapProcess {
    Rayleigh {
        amps: Vec<C64>,
        freqs_hz: Vec<f64>,
    },
    Phasor {
        freq_hz: f64,
        phase: f64,
    },
}

impl TapProcess {
    pub fn rayleigh(max_doppler_hz: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = SINUSOIDS_PER_TAP;
        let amp_std = (0.5 / n as f64).sqrt();
        let mut amps = Vec::with_capacity(n);
        let mut freqs = Vec::with_capacity(n);
        for _ in 0..n {
            let (g0, g1) = gauss_pair(rng);
            amps.push(C64::new(amp_std * g0, amp_std * g1));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            freqs.push(max_doppler_hz * angle.cos());
        }
        TapProcess::Rayleigh {
            amps,
            freqs_hz: freqs,
        }
    }

    pub fn los(max_doppler_hz: f64, rng: &mut ChaCha8Rng) -> Self {
        TapProcess::Phasor {
            freq_hz: LOS_DOPPLER_FACTOR * max_doppler_hz,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Complex gain at time `t` seconds. Unit power in expectation.
    pub fn value(&self, t: f64) -> C64 {
        match self {
            TapProcess::Rayleigh { amps, freqs_hz } => {
                let mut acc = C64::new(0.0, 0.0);
                for (a, f) in amps.iter().zip(freqs_hz.iter()) {
                    let phi = std::f64::consts::TAU * f * t;
                    acc += a * C64::new(phi.cos(), phi.sin());
                }
                acc
            }
            TapProcess::Phasor { freq_hz, phase } => {
                let phi = std::f64::consts::TAU * freq_hz * t + phase;
                C64::new(phi.cos(), phi.sin())
            }
        }
    }
}

fn gauss_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    // Box-Muller.
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let th = std::f64::consts::TAU * u2;
    (r * th.cos(), r * th.sin())
}
