//! Tap and cluster tables: plain-text columnar files plus the shipped
//! defaults. Delays in the shipped tables are normalized and get scaled by
//! the requested RMS delay spread; user files may instead carry delays in
//! nanoseconds (`# delay_unit: ns`).

use super::ChansimError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub delay_s: f64,
    /// Linear power; the loader normalizes the profile to unit total power.
    pub power: f64,
    pub los: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdlProfile {
    pub name: String,
    pub taps: Vec<Tap>,
    pub max_doppler_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdlCluster {
    pub delay_s: f64,
    pub power: f64,
    pub aod_deg: f64,
    pub aoa_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdlProfile {
    pub name: String,
    pub clusters: Vec<CdlCluster>,
    pub max_doppler_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DelayUnit {
    Normalized,
    Ns,
}

struct TableRow {
    delay: f64,
    power_db: f64,
    aod_deg: Option<f64>,
    aoa_deg: Option<f64>,
    los: bool,
}

struct Table {
    unit: DelayUnit,
    rows: Vec<TableRow>,
}

fn parse_table(name: &str, text: &str) -> Result<Table, ChansimError> {
    let mut unit = DelayUnit::Ns;
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(u) = rest.trim().strip_prefix("delay_unit:") {
                unit = match u.trim() {
                    "normalized" => DelayUnit::Normalized,
                    "ns" => DelayUnit::Ns,
                    other => {
                        return Err(ChansimError::BadTable {
                            name: name.to_string(),
                            line: lineno + 1,
                            reason: format!("unknown delay_unit `{other}`"),
                        })
                    }
                };
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: String| ChansimError::BadTable {
            name: name.to_string(),
            line: lineno + 1,
            reason,
        };
        let num = |s: &str| -> Result<f64, ChansimError> {
            s.parse::<f64>()
                .map_err(|_| bad(format!("not a number: `{s}`")))
        };
        match fields.len() {
            2 => rows.push(TableRow {
                delay: num(fields[0])?,
                power_db: num(fields[1])?,
                aod_deg: None,
                aoa_deg: None,
                los: false,
            }),
            3 if fields[2] == "los" => rows.push(TableRow {
                delay: num(fields[0])?,
                power_db: num(fields[1])?,
                aod_deg: None,
                aoa_deg: None,
                los: true,
            }),
            4 => rows.push(TableRow {
                delay: num(fields[0])?,
                power_db: num(fields[1])?,
                aod_deg: Some(num(fields[2])?),
                aoa_deg: Some(num(fields[3])?),
                los: false,
            }),
            n => return Err(bad(format!("expected 2-4 columns, found {n}"))),
        }
    }
    if rows.is_empty() {
        return Err(ChansimError::BadTable {
            name: name.to_string(),
            line: 0,
            reason: "table has no rows".to_string(),
        });
    }
    Ok(Table { unit, rows })
}

fn delays_in_seconds(table: &Table, delay_spread_s: f64) -> Vec<f64> {
    table
        .rows
        .iter()
        .map(|r| match table.unit {
            DelayUnit::Normalized => r.delay * delay_spread_s,
            DelayUnit::Ns => r.delay * 1e-9,
        })
        .collect()
}

fn normalized_powers(rows: &[TableRow]) -> Vec<f64> {
    let lin: Vec<f64> = rows.iter().map(|r| crate::util::db_to_lin(r.power_db)).collect();
    let total: f64 = lin.iter().sum();
    lin.iter().map(|p| p / total).collect()
}

/// Parses a TDL tap table from text.
pub fn tdl_from_text(
    name: &str,
    text: &str,
    delay_spread_s: f64,
    max_doppler_hz: f64,
) -> Result<TdlProfile, ChansimError> {
    let table = parse_table(name, text)?;
    let delays = delays_in_seconds(&table, delay_spread_s);
    let powers = normalized_powers(&table.rows);
    let taps = table
        .rows
        .iter()
        .zip(delays.iter().zip(powers.iter()))
        .map(|(r, (&d, &p))| Tap {
            delay_s: d,
            power: p,
            los: r.los,
        })
        .collect();
    Ok(TdlProfile {
        name: name.to_string(),
        taps,
        max_doppler_hz,
    })
}

/// Parses a CDL cluster table from text.
pub fn cdl_from_text(
    name: &str,
    text: &str,
    delay_spread_s: f64,
    max_doppler_hz: f64,
) -> Result<CdlProfile, ChansimError> {
    let table = parse_table(name, text)?;
    let delays = delays_in_seconds(&table, delay_spread_s);
    let powers = normalized_powers(&table.rows);
    let mut clusters = Vec::with_capacity(table.rows.len());
    for (r, (&d, &p)) in table.rows.iter().zip(delays.iter().zip(powers.iter())) {
        let (aod, aoa) = match (r.aod_deg, r.aoa_deg) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(ChansimError::BadTable {
                    name: name.to_string(),
                    line: 0,
                    reason: "cluster tables need aod_deg and aoa_deg columns".to_string(),
                })
            }
        };
        clusters.push(CdlCluster {
            delay_s: d,
            power: p,
            aod_deg: aod,
            aoa_deg: aoa,
        });
    }
    Ok(CdlProfile {
        name: name.to_string(),
        clusters,
        max_doppler_hz,
    })
}

/// Text of a shipped table, by case-insensitive profile name.
pub fn builtin_table(name: &str) -> Option<&'static str> {
    match name.to_ascii_lowercase().as_str() {
        "tdl-a" | "tdla" => Some(include_str!("../../data/tdl_a.txt")),
        "tdl-b" | "tdlb" => Some(include_str!("../../data/tdl_b.txt")),
        "tdl-c" | "tdlc" => Some(include_str!("../../data/tdl_c.txt")),
        "tdl-d" | "tdld" => Some(include_str!("../../data/tdl_d.txt")),
        "tdl-e" | "tdle" => Some(include_str!("../../data/tdl_e.txt")),
        "cdl-a" | "cdla" => Some(include_str!("../../data/cdl_a.txt")),
        "cdl-b" | "cdlb" => Some(include_str!("../../data/cdl_b.txt")),
        "cdl-c" | "cdlc" => Some(include_str!("../../data/cdl_c.txt")),
        _ => None,
    }
}

/// Shorthand delay spreads: "TDL-A30" means TDL-A scaled to 30 ns RMS.
pub fn split_profile_shorthand(name: &str) -> (String, Option<f64>) {
    let lower = name.to_ascii_lowercase();
    for (prefix, canon) in [
        ("tdl-a", "TDL-A"),
        ("tdl-b", "TDL-B"),
        ("tdl-c", "TDL-C"),
        ("tdl-d", "TDL-D"),
        ("tdl-e", "TDL-E"),
        ("tdla", "TDL-A"),
        ("tdlb", "TDL-B"),
        ("tdlc", "TDL-C"),
        ("tdld", "TDL-D"),
        ("tdle", "TDL-E"),
        ("cdl-a", "CDL-A"),
        ("cdl-b", "CDL-B"),
        ("cdl-c", "CDL-C"),
    ] {
        if let Some(rest) = lower.strip_prefix(prefix) {
            if rest.is_empty() {
                return (canon.to_string(), None);
            }
            if let Ok(ns) = rest.parse::<f64>() {
                return (canon.to_string(), Some(ns * 1e-9));
            }
        }
    }
    (name.to_string(), None)
}

/// Loads a builtin TDL profile, e.g. `TDL-B100` (100 ns delay spread).
pub fn builtin_tdl(
    name: &str,
    delay_spread_s: Option<f64>,
    max_doppler_hz: f64,
) -> Result<TdlProfile, ChansimError> {
    let (base, inline_ds) = split_profile_shorthand(name);
    let ds = delay_spread_s
        .or(inline_ds)
        .unwrap_or(100e-9);
    let text = builtin_table(&base).ok_or_else(|| ChansimError::UnknownProfile(name.to_string()))?;
    tdl_from_text(name, text, ds, max_doppler_hz)
}

/// Loads a builtin CDL-like cluster profile, e.g. `CDL-A`.
pub fn builtin_cdl(
    name: &str,
    delay_spread_s: Option<f64>,
    max_doppler_hz: f64,
) -> Result<CdlProfile, ChansimError> {
    let (base, inline_ds) = split_profile_shorthand(name);
    let ds = delay_spread_s.or(inline_ds).unwrap_or_else(|| {
        match base.as_str() {
            "CDL-A" => 30e-9,
            "CDL-C" => 300e-9,
            _ => 100e-9,
        }
    });
    let text = builtin_table(&base).ok_or_else(|| ChansimError::UnknownProfile(name.to_string()))?;
    cdl_from_text(name, text, ds, max_doppler_hz)
}

/// Loads a tap table from a file on disk.
pub fn tdl_from_file(
    path: &std::path::Path,
    delay_spread_s: f64,
    max_doppler_hz: f64,
) -> Result<TdlProfile, ChansimError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ChansimError::MissingTable(format!("{}: {e}", path.display())))?;
    tdl_from_text(&path.display().to_string(), &text, delay_spread_s, max_doppler_hz)
}

/// Draws a randomized TDL profile: tap count, delays, and powers are all
/// sampled, giving channels outside the standard profile family.
pub fn random_tdl(
    rng: &mut rand_chacha::ChaCha8Rng,
    delay_spread_s: f64,
    max_doppler_hz: f64,
) -> TdlProfile {
    use rand::Rng;
    let n_taps = rng.random_range(3..=14usize);
    let mut delays: Vec<f64> = (0..n_taps).map(|_| rng.random_range(0.0..3.0)).collect();
    delays[0] = 0.0;
    delays.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Exponentially decaying mean power with per-tap shadowing jitter.
    let slope_db = rng.random_range(2.0..12.0);
    let mut taps: Vec<Tap> = delays
        .iter()
        .map(|&d| {
            let jitter: f64 = rng.random_range(-4.0..4.0);
            Tap {
                delay_s: d * delay_spread_s,
                power: crate::util::db_to_lin(-slope_db * d + jitter),
                los: false,
            }
        })
        .collect();
    let total: f64 = taps.iter().map(|t| t.power).sum();
    for t in &mut taps {
        t.power /= total;
    }
    TdlProfile {
        name: "TDL-random".to_string(),
        taps,
        max_doppler_hz,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_normalize_to_unit_power() {
        for name in ["TDL-A", "TDL-B", "TDL-C", "TDL-D", "TDL-E"] {
            let p = builtin_tdl(name, Some(100e-9), 10.0).unwrap();
            let total: f64 = p.taps.iter().map(|t| t.power).sum();
            assert!((total - 1.0).abs() < 1e-12, "{name}: {total}");
            assert!(p.taps.iter().all(|t| t.delay_s >= 0.0));
        }
    }

    #[test]
    fn shorthand_delay_spread() {
        let p = builtin_tdl("TDL-B100", None, 0.0).unwrap();
        let q = builtin_tdl("TDL-B", Some(100e-9), 0.0).unwrap();
        assert_eq!(p.taps.len(), q.taps.len());
        for (a, b) in p.taps.iter().zip(q.taps.iter()) {
            assert!((a.delay_s - b.delay_s).abs() < 1e-18);
        }
        // 300 ns scales delays by 3x relative to 100 ns.
        let r = builtin_tdl("TDL-B300", None, 0.0).unwrap();
        assert!((r.taps[13].delay_s / p.taps[13].delay_s - 3.0).abs() < 1e-9);
    }

    #[test]
    fn los_flag_only_on_d_and_e() {
        for (name, has_los) in [("TDL-A", false), ("TDL-D", true), ("TDL-E", true)] {
            let p = builtin_tdl(name, Some(30e-9), 0.0).unwrap();
            assert_eq!(p.taps.iter().any(|t| t.los), has_los, "{name}");
        }
    }

    #[test]
    fn unknown_profile_is_an_error() {
        let err = builtin_tdl("TDL-Z", None, 0.0).unwrap_err();
        assert!(matches!(err, ChansimError::UnknownProfile(_)));
    }

    #[test]
    fn cdl_tables_have_angles() {
        for name in ["CDL-A", "CDL-B", "CDL-C"] {
            let p = builtin_cdl(name, None, 10.0).unwrap();
            assert!(p.clusters.len() >= 8);
            let total: f64 = p.clusters.iter().map(|c| c.power).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_table_reports_line() {
        let err = tdl_from_text("x", "0.0 0.0\nbogus row here more", 1e-9, 0.0).unwrap_err();
        match err {
            ChansimError::BadTable { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn random_tdl_is_normalized_and_sorted() {
        let mut rng = crate::util::rng_for(5, "random-tdl", 0);
        for i in 0..50 {
            let p = random_tdl(&mut rng, 100e-9, 50.0);
            let total: f64 = p.taps.iter().map(|t| t.power).sum();
            assert!((total - 1.0).abs() < 1e-12, "draw {i}");
            assert!(p.taps.windows(2).all(|w| w[0].delay_s <= w[1].delay_s));
            assert_eq!(p.taps[0].delay_s, 0.0);
        }
    }
}
