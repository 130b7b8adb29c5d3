//! Online scenario sampling over the full simulation configuration space.

use rand::Rng;

use crate::chansim::{ChannelSpec, CorrelationPreset, PrecodingMode};
use crate::grid::{BundleSize, CarrierConfig, DmrsConfig, DmrsType, PrgConfig, Scs};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainVariant {
    /// Standard TDL tap tables.
    Standard,
    /// Randomized tap tables only.
    Random,
}

/// Bounds for the sampler; the full space follows the simulation parameter
/// table, the desk preset keeps carriers laptop-sized.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub variant: TrainVariant,
    pub n_rb_range: (usize, usize),
    pub snr_range_db: (f64, f64),
    pub delay_spread_ns: (f64, f64),
    pub doppler_hz: (f64, f64),
}

impl SamplerConfig {
    pub fn paper(variant: TrainVariant) -> Self {
        Self {
            variant,
            n_rb_range: (4, 272),
            snr_range_db: (0.0, 40.0),
            delay_spread_ns: (1.0, 300.0),
            doppler_hz: (0.0, 450.0),
        }
    }

    pub fn desk(variant: TrainVariant) -> Self {
        Self {
            n_rb_range: (4, 32),
            ..Self::paper(variant)
        }
    }
}

/// One fully resolved scenario: grid geometry, channel, precoding, SNR.
#[derive(Debug, Clone)]
pub struct ScenarioDraw {
    pub carrier: CarrierConfig,
    pub dmrs: DmrsConfig,
    pub prg: PrgConfig,
    pub channel: ChannelSpec,
    pub precoding: PrecodingMode,
    pub snr_db: f64,
    pub n_layers: usize,
}

const STANDARD_PROFILES: [&str; 3] = ["TDL-A", "TDL-B", "TDL-C"];

/// Uniform draw over the configuration space. Deterministic in `seed`.
pub fn sample_train_config(seed: u64, cfg: &SamplerConfig) -> ScenarioDraw {
    let mut rng = rng_for(seed, "scenario", 0);

    let scs = if rng.random_range(0..2u8) == 0 {
        Scs::Khz15
    } else {
        Scs::Khz30
    };
    let bs = if rng.random_range(0..2u8) == 0 { 2 } else { 4 };
    let n_rb = rng
        .random_range(cfg.n_rb_range.0..=cfg.n_rb_range.1)
        .max(bs);
    let carrier = CarrierConfig::new(scs, n_rb).expect("sampler bounds");

    let add_pos = rng.random_range(1..=3usize);
    let config_type = if rng.random_range(0..2u8) == 0 {
        DmrsType::Type1
    } else {
        DmrsType::Type2
    };
    let n_layers = rng.random_range(1..=2usize);
    let c_init: u32 = rng.random();
    let dmrs = DmrsConfig::new(config_type, add_pos + 1, n_layers, c_init).expect("sampler dmrs");

    let delay_spread_s =
        rng.random_range(cfg.delay_spread_ns.0..=cfg.delay_spread_ns.1) * 1e-9;
    let doppler_hz = rng.random_range(cfg.doppler_hz.0..=cfg.doppler_hz.1);
    let corr = match rng.random_range(0..4u8) {
        0 => CorrelationPreset::Low,
        1 => CorrelationPreset::MediumA,
        2 => CorrelationPreset::Medium,
        _ => CorrelationPreset::High,
    };
    let channel = match cfg.variant {
        TrainVariant::Standard => ChannelSpec::TdlStandard {
            profile: STANDARD_PROFILES[rng.random_range(0..STANDARD_PROFILES.len())].to_string(),
            delay_spread_s: Some(delay_spread_s),
            doppler_hz,
            corr,
        },
        TrainVariant::Random => ChannelSpec::TdlRandom {
            delay_spread_s,
            doppler_hz,
            corr,
        },
    };

    let precoding = match rng.random_range(0..3u8) {
        0 => PrecodingMode::Svd,
        1 => PrecodingMode::Random,
        _ => PrecodingMode::Wideband,
    };
    let snr_db = rng.random_range(cfg.snr_range_db.0..=cfg.snr_range_db.1);

    ScenarioDraw {
        carrier,
        dmrs,
        prg: PrgConfig::new(BundleSize::Rb(bs)),
        channel,
        precoding,
        snr_db,
        n_layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn coverage_over_categoricals() {
        let cfg = SamplerConfig::paper(TrainVariant::Standard);
        let mut scs = HashSet::new();
        let mut bs = HashSet::new();
        let mut ct = HashSet::new();
        let mut add_pos = HashSet::new();
        let mut layers = HashSet::new();
        let mut profiles = HashSet::new();
        let mut precodings = HashSet::new();
        for i in 0..10_000u64 {
            let d = sample_train_config(i, &cfg);
            scs.insert(d.carrier.scs.khz());
            if let BundleSize::Rb(b) = d.prg.bundle_size {
                bs.insert(b);
            }
            ct.insert(d.dmrs.config_type);
            add_pos.insert(d.dmrs.n_dmrs_symbols);
            layers.insert(d.n_layers);
            precodings.insert(d.precoding);
            if let ChannelSpec::TdlStandard { profile, .. } = &d.channel {
                profiles.insert(profile.clone());
            }
        }
        assert_eq!(scs.len(), 2);
        assert_eq!(bs.len(), 2);
        assert_eq!(ct.len(), 2);
        assert_eq!(add_pos.len(), 3);
        assert_eq!(layers.len(), 2);
        assert_eq!(precodings.len(), 3);
        assert_eq!(profiles.len(), 3);
    }

    #[test]
    fn random_variant_never_names_standard_profiles() {
        let cfg = SamplerConfig::paper(TrainVariant::Random);
        for i in 0..500u64 {
            let d = sample_train_config(i, &cfg);
            assert!(matches!(d.channel, ChannelSpec::TdlRandom { .. }));
        }
    }

    #[test]
    fn bounds_respected() {
        let cfg = SamplerConfig::desk(TrainVariant::Standard);
        for i in 0..20_000u64 {
            let d = sample_train_config(i, &cfg);
            assert!((0.0..=40.0).contains(&d.snr_db));
            assert!(d.carrier.n_rb >= 4 && d.carrier.n_rb <= 32);
            if let ChannelSpec::TdlStandard {
                delay_spread_s,
                doppler_hz,
                ..
            } = d.channel
            {
                let ds = delay_spread_s.unwrap();
                assert!((1e-9..=300e-9).contains(&ds));
                assert!((0.0..=450.0).contains(&doppler_hz));
            }
            if let BundleSize::Rb(b) = d.prg.bundle_size {
                assert!(b <= d.carrier.n_rb);
            }
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = SamplerConfig::paper(TrainVariant::Standard);
        let a = sample_train_config(42, &cfg);
        let b = sample_train_config(42, &cfg);
        assert_eq!(a.carrier, b.carrier);
        assert_eq!(a.dmrs, b.dmrs);
        assert_eq!(a.snr_db, b.snr_db);
        assert_eq!(a.channel, b.channel);
    }
}
