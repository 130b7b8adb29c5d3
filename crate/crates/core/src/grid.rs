//! 5G-NR-style time-frequency resource grid: carrier geometry, DMRS masks and
//! pilot symbols, and the PRG (precoding resource-block group) partition.
//!
//! The DMRS mapping is a simplified but structurally faithful rendition of the
//! standard patterns: type 1 places pilots on a comb-2 (six tones per RB per
//! DMRS symbol), type 2 places two adjacent-subcarrier pairs per RB (four
//! tones). Two ports share the same tones and are separated by a frequency
//! domain OCC of (+,+) / (+,-) over adjacent pilot pairs.

use ndarray::{Array2, Array3};
use thiserror::Error;

use crate::C64;

pub const SYMBOLS_PER_SLOT: usize = 14;
pub const SC_PER_RB: usize = 12;
pub const MIN_RB: usize = 4;
pub const MAX_RB: usize = 272;

/// Default DMRS symbol positions: front-loaded at symbol 2, additional
/// positions taken in order from this list.
pub const DMRS_SYMBOL_POSITIONS: [usize; 4] = [2, 5, 8, 11];

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("n_rb = {0} outside supported range {MIN_RB}..={MAX_RB}")]
    InvalidNrb(usize),
    #[error("bundle size {bs} exceeds n_rb = {n_rb}")]
    BundleTooLarge { bs: usize, n_rb: usize },
    #[error("bundle size {0} unsupported (expected 2, 4, or wideband)")]
    InvalidBundle(usize),
    #[error("n_dmrs_symbols = {0} outside supported range 2..=4")]
    InvalidDmrsCount(usize),
    #[error("dmrs symbol indices {0:?} must be strictly increasing and < {SYMBOLS_PER_SLOT}")]
    InvalidSymbolIndices(Vec<usize>),
    #[error("n_layers = {0} exceeds the 2 ports available in the CDM group")]
    TooManyLayers(usize),
    #[error("permutation {perm:?} is not a bijection on [0, {n})")]
    BadPermutation { perm: Vec<usize>, n: usize },
}

/// Subcarrier spacing. Sets the slot duration and hence the symbol period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scs {
    Khz15,
    Khz30,
}

impl Scs {
    pub fn hz(self) -> f64 {
        match self {
            Scs::Khz15 => 15e3,
            Scs::Khz30 => 30e3,
        }
    }

    /// Slot duration in seconds (14 symbols, normal CP).
    pub fn slot_duration(self) -> f64 {
        match self {
            Scs::Khz15 => 1e-3,
            Scs::Khz30 => 0.5e-3,
        }
    }

    pub fn symbol_duration(self) -> f64 {
        self.slot_duration() / SYMBOLS_PER_SLOT as f64
    }

    pub fn from_khz(khz: u32) -> Option<Self> {
        match khz {
            15 => Some(Scs::Khz15),
            30 => Some(Scs::Khz30),
            _ => None,
        }
    }

    pub fn khz(self) -> u32 {
        match self {
            Scs::Khz15 => 15,
            Scs::Khz30 => 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CarrierConfig {
    pub scs: Scs,
    pub n_rb: usize,
}

impl CarrierConfig {
    pub fn new(scs: Scs, n_rb: usize) -> Result<Self, GridError> {
        if !(MIN_RB..=MAX_RB).contains(&n_rb) {
            return Err(GridError::InvalidNrb(n_rb));
        }
        Ok(Self { scs, n_rb })
    }

    pub fn n_subcarriers(&self) -> usize {
        SC_PER_RB * self.n_rb
    }

    pub fn n_symbols(&self) -> usize {
        SYMBOLS_PER_SLOT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum DmrsType {
    Type1,
    Type2,
}

impl DmrsType {
    /// Pilot tones per RB per DMRS symbol within one CDM group.
    pub fn pilots_per_rb(self) -> usize {
        match self {
            DmrsType::Type1 => 6,
            DmrsType::Type2 => 4,
        }
    }

    /// Pilot subcarrier offsets within an RB for CDM group 0.
    pub fn rb_offsets(self) -> &'static [usize] {
        match self {
            DmrsType::Type1 => &[0, 2, 4, 6, 8, 10],
            DmrsType::Type2 => &[0, 1, 6, 7],
        }
    }

    /// OCC pair offsets within an RB: each pair carries the (+,+)/(+,-) cover.
    pub fn rb_pairs(self) -> &'static [(usize, usize)] {
        match self {
            DmrsType::Type1 => &[(0, 2), (4, 6), (8, 10)],
            DmrsType::Type2 => &[(0, 1), (6, 7)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DmrsConfig {
    pub config_type: DmrsType,
    pub n_dmrs_symbols: usize,
    pub symbol_indices: Vec<usize>,
    pub n_layers: usize,
    /// Seed for the pilot Gold sequence (used directly as c_init).
    pub c_init: u32,
}

impl DmrsConfig {
    pub fn new(
        config_type: DmrsType,
        n_dmrs_symbols: usize,
        n_layers: usize,
        c_init: u32,
    ) -> Result<Self, GridError> {
        let cfg = Self {
            config_type,
            n_dmrs_symbols,
            symbol_indices: default_symbol_indices(n_dmrs_symbols)?,
            n_layers,
            c_init,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(2..=4).contains(&self.n_dmrs_symbols) {
            return Err(GridError::InvalidDmrsCount(self.n_dmrs_symbols));
        }
        let idx = &self.symbol_indices;
        let increasing = idx.windows(2).all(|w| w[0] < w[1]);
        if idx.len() != self.n_dmrs_symbols
            || !increasing
            || idx.iter().any(|&s| s >= SYMBOLS_PER_SLOT)
        {
            return Err(GridError::InvalidSymbolIndices(idx.clone()));
        }
        if self.n_layers == 0 || self.n_layers > 2 {
            return Err(GridError::TooManyLayers(self.n_layers));
        }
        Ok(())
    }
}

/// Default DMRS symbol placement: the first `n` entries of
/// [`DMRS_SYMBOL_POSITIONS`].
pub fn default_symbol_indices(n: usize) -> Result<Vec<usize>, GridError> {
    if !(2..=4).contains(&n) {
        return Err(GridError::InvalidDmrsCount(n));
    }
    Ok(DMRS_SYMBOL_POSITIONS[..n].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BundleSize {
    Rb(usize),
    Wideband,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrgConfig {
    pub bundle_size: BundleSize,
}

impl PrgConfig {
    pub fn new(bundle_size: BundleSize) -> Self {
        Self { bundle_size }
    }

    /// Contiguous, covering spans of (start_rb, n_rb). When n_rb is not a
    /// multiple of the bundle size the final PRG is short.
    pub fn prg_spans(&self, n_rb: usize) -> Result<Vec<(usize, usize)>, GridError> {
        match self.bundle_size {
            BundleSize::Wideband => Ok(vec![(0, n_rb)]),
            BundleSize::Rb(bs) => {
                if bs != 2 && bs != 4 {
                    return Err(GridError::InvalidBundle(bs));
                }
                if bs > n_rb {
                    return Err(GridError::BundleTooLarge { bs, n_rb });
                }
                let mut spans = Vec::with_capacity(n_rb.div_ceil(bs));
                let mut start = 0;
                while start < n_rb {
                    let len = bs.min(n_rb - start);
                    spans.push((start, len));
                    start += len;
                }
                Ok(spans)
            }
        }
    }
}

/// Complex pilot values per port, zero away from DMRS tones.
/// Shape `[n_layers, n_subcarriers, 14]`.
pub type PilotGrid = Array3<C64>;

/// Resolved grid geometry shared by the simulator and the estimators.
#[derive(Debug, Clone)]
pub struct GridLayout {
    pub carrier: CarrierConfig,
    pub dmrs: DmrsConfig,
    pub prg_spans: Vec<(usize, usize)>,
    /// 0/1 DMRS mask, shape `[n_subcarriers, 14]`.
    pub mask: Array2<u8>,
    /// Sorted pilot subcarrier indices over the whole band.
    pub pilot_subcarriers: Vec<usize>,
    /// OCC pairs as (subcarrier, subcarrier), both pilots of one cover.
    pub occ_pairs: Vec<(usize, usize)>,
}

impl GridLayout {
    pub fn n_subcarriers(&self) -> usize {
        self.carrier.n_subcarriers()
    }

    pub fn n_prg(&self) -> usize {
        self.prg_spans.len()
    }

    /// Subcarrier range of PRG `i`.
    pub fn prg_subcarriers(&self, i: usize) -> std::ops::Range<usize> {
        let (start_rb, len_rb) = self.prg_spans[i];
        start_rb * SC_PER_RB..(start_rb + len_rb) * SC_PER_RB
    }

    /// OCC sign of `port` at pilot subcarrier `sc`: port 0 is all-plus,
    /// port 1 flips the second tone of each pair.
    pub fn occ_sign(&self, port: usize, sc: usize) -> f64 {
        if port == 0 {
            return 1.0;
        }
        match self.occ_pairs.iter().find(|&&(a, b)| a == sc || b == sc) {
            Some(&(_, b)) if b == sc => -1.0,
            _ => 1.0,
        }
    }

    /// Number of pilot REs per port.
    pub fn pilot_re_count(&self) -> usize {
        self.pilot_subcarriers.len() * self.dmrs.symbol_indices.len()
    }

    /// Mask rendered as a diff-friendly 0/1 text matrix, one subcarrier
    /// per row.
    pub fn mask_to_text(&self) -> String {
        let mut out = String::with_capacity(self.mask.len() * 2);
        for row in self.mask.rows() {
            let mut first = true;
            for &v in row {
                if !first {
                    out.push(' ');
                }
                out.push(if v == 0 { '0' } else { '1' });
                first = false;
            }
            out.push('\n');
        }
        out
    }
}

/// Builds the resolved grid layout from the three configs.
pub fn build_grid(
    carrier: CarrierConfig,
    dmrs: DmrsConfig,
    prg: PrgConfig,
) -> Result<GridLayout, GridError> {
    if !(MIN_RB..=MAX_RB).contains(&carrier.n_rb) {
        return Err(GridError::InvalidNrb(carrier.n_rb));
    }
    dmrs.validate()?;
    let prg_spans = prg.prg_spans(carrier.n_rb)?;

    let n_sc = carrier.n_subcarriers();
    let mut mask = Array2::<u8>::zeros((n_sc, SYMBOLS_PER_SLOT));
    let mut pilot_subcarriers = Vec::with_capacity(carrier.n_rb * dmrs.config_type.pilots_per_rb());
    let mut occ_pairs = Vec::with_capacity(carrier.n_rb * dmrs.config_type.rb_pairs().len());

    for rb in 0..carrier.n_rb {
        let base = rb * SC_PER_RB;
        for &off in dmrs.config_type.rb_offsets() {
            pilot_subcarriers.push(base + off);
        }
        for &(a, b) in dmrs.config_type.rb_pairs() {
            occ_pairs.push((base + a, base + b));
        }
    }
    for &sc in &pilot_subcarriers {
        for &sym in &dmrs.symbol_indices {
            mask[[sc, sym]] = 1;
        }
    }

    Ok(GridLayout {
        carrier,
        dmrs,
        prg_spans,
        mask,
        pilot_subcarriers,
        occ_pairs,
    })
}

/// Pseudo-random binary sequence from two length-31 LFSRs (standard Gold
/// construction). The first register has the fixed initialisation x1(0)=1,
/// the second is loaded from `c_init`. Output starts after the usual 1600
/// step warm-up, so the sequence is a streaming function of `c_init`.
pub fn gold_sequence(c_init: u32, length: usize) -> Vec<u8> {
    const NC: usize = 1600;
    let total = NC + length + 31;
    let mut x1 = vec![0u8; total];
    let mut x2 = vec![0u8; total];
    x1[0] = 1;
    for n in 0..31 {
        x2[n] = ((c_init >> n) & 1) as u8;
    }
    for n in 0..total - 31 {
        x1[n + 31] = x1[n + 3] ^ x1[n];
        x2[n + 31] = x2[n + 3] ^ x2[n + 2] ^ x2[n + 1] ^ x2[n];
    }
    (0..length).map(|n| x1[n + NC] ^ x2[n + NC]).collect()
}

/// QPSK pilot symbol from a bit pair: (1/sqrt2)·((1-2b0) + j(1-2b1)).
fn qpsk(b0: u8, b1: u8) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    C64::new(
        s * (1.0 - 2.0 * b0 as f64),
        s * (1.0 - 2.0 * b1 as f64),
    )
}

/// Per-port complex pilot values on the masked REs, zero elsewhere.
///
/// Both ports of the CDM group share the same base QPSK sequence and tones;
/// port 1 is covered with the (+,-) OCC over each adjacent pilot pair.
pub fn dmrs_symbols(dmrs: &DmrsConfig, layout: &GridLayout) -> PilotGrid {
    let n_sc = layout.n_subcarriers();
    let n_pilot_sc = layout.pilot_subcarriers.len();
    let bits = gold_sequence(
        dmrs.c_init,
        2 * n_pilot_sc * dmrs.symbol_indices.len(),
    );
    let mut grid = Array3::<C64>::zeros((dmrs.n_layers, n_sc, SYMBOLS_PER_SLOT));
    for (sym_pos, &sym) in dmrs.symbol_indices.iter().enumerate() {
        for (i, &sc) in layout.pilot_subcarriers.iter().enumerate() {
            let b = 2 * (sym_pos * n_pilot_sc + i);
            let base = qpsk(bits[b], bits[b + 1]);
            for port in 0..dmrs.n_layers {
                grid[[port, sc, sym]] = base * layout.occ_sign(port, sc);
            }
        }
    }
    grid
}

/// Reorders the port axis of a pilot grid. `perm[new] = old`.
pub fn permute_layers(x: &PilotGrid, perm: &[usize]) -> Result<PilotGrid, GridError> {
    let n = x.shape()[0];
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(GridError::BadPermutation {
            perm: perm.to_vec(),
            n,
        });
    }
    let mut out = x.clone();
    for (new, &old) in perm.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), new)
            .assign(&x.index_axis(ndarray::Axis(0), old));
    }
    Ok(out)
}
