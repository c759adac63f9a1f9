//! Forecast archives: JSON lines, one record per (origin, horizon).
//!
//! ```text
//! {"origin": 250, "horizon": 1, "density": {"type": "normal", "mu": 0.4, "sigma": 0.5}, "realized": 0.31}
//! ```
//!
//! Origins are integer periods, and `realized` is the outcome at period
//! `origin + horizon` (omitted or `null` when not yet observed).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use horizon_fuse::dists::Marginal;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveRecord {
    pub origin: i64,
    pub horizon: usize,
    pub density: Marginal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OriginForecasts {
    pub marginals: Vec<Marginal>,
    pub realized: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForecastArchive {
    origins: BTreeMap<i64, OriginForecasts>,
}

impl ForecastArchive {
    /// Group records by origin and check that each origin's horizons are
    /// exactly `1..=H`.
    pub fn from_records(records: Vec<ArchiveRecord>) -> CliResult<Self> {
        let mut by_origin: BTreeMap<i64, BTreeMap<usize, ArchiveRecord>> = BTreeMap::new();
        for r in records {
            if r.horizon == 0 {
                return Err(CliError::Data(format!("origin {}: horizon 0 is not allowed", r.origin)));
            }
            if let Some(v) = r.realized {
                if !v.is_finite() {
                    return Err(CliError::Data(format!(
                        "origin {}, horizon {}: non-finite realization",
                        r.origin, r.horizon
                    )));
                }
            }
            let slot = by_origin.entry(r.origin).or_default();
            if slot.contains_key(&r.horizon) {
                return Err(CliError::Data(format!("origin {}: horizon {} appears twice", r.origin, r.horizon)));
            }
            slot.insert(r.horizon, r);
        }
        let mut origins = BTreeMap::new();
        for (o, hs) in by_origin {
            let h_max = *hs.keys().last().unwrap();
            if hs.len() != h_max {
                let missing: Vec<String> = (1..=h_max).filter(|h| !hs.contains_key(h)).map(|h| h.to_string()).collect();
                return Err(CliError::Data(format!(
                    "origin {o}: horizons must be contiguous from 1, missing {}",
                    missing.join(", ")
                )));
            }
            let (marginals, realized) = hs.into_values().map(|r| (r.density, r.realized)).unzip();
            origins.insert(o, OriginForecasts { marginals, realized });
        }
        Ok(ForecastArchive { origins })
    }

    pub fn read<R: BufRead>(r: R) -> CliResult<Self> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ArchiveRecord =
                serde_json::from_str(&line).map_err(|e| CliError::Data(format!("archive line {}: {e}", i + 1)))?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn write<W: Write>(&self, mut w: W) -> CliResult<()> {
        for (&origin, f) in &self.origins {
            for (j, (m, r)) in f.marginals.iter().zip(&f.realized).enumerate() {
                let rec = ArchiveRecord { origin, horizon: j + 1, density: m.clone(), realized: *r };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn origins(&self) -> impl Iterator<Item = i64> + '_ {
        self.origins.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn get(&self, origin: i64) -> Option<&OriginForecasts> {
        self.origins.get(&origin)
    }

    pub fn insert(&mut self, origin: i64, f: OriginForecasts) {
        self.origins.insert(origin, f);
    }

    /// Realised outcomes by period, collected from every record.
    pub fn observations(&self) -> CliResult<BTreeMap<i64, f64>> {
        let mut out: BTreeMap<i64, f64> = BTreeMap::new();
        for (&o, f) in &self.origins {
            for (j, r) in f.realized.iter().enumerate() {
                if let Some(v) = *r {
                    let period = o + j as i64 + 1;
                    if let Some(prev) = out.insert(period, v) {
                        if prev != v {
                            return Err(CliError::Data(format!(
                                "period {period} has conflicting realizations {prev} and {v}"
                            )));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use horizon_fuse::dists::Normal;

    fn rec(origin: i64, horizon: usize, realized: Option<f64>) -> ArchiveRecord {
        ArchiveRecord { origin, horizon, density: Normal::new(0.0, 1.0).unwrap().into(), realized }
    }

    #[test]
    fn round_trip() {
        let a =
            ForecastArchive::from_records(vec![rec(3, 2, Some(0.5)), rec(3, 1, None), rec(4, 1, Some(0.5))]).unwrap();
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"origin":3,"horizon":1,"density":{"type":"normal","mu":0.0,"sigma":1.0}}"#));
        assert_eq!(ForecastArchive::read(&buf[..]).unwrap(), a);
        assert_eq!(a.observations().unwrap().get(&5), Some(&0.5));
    }

    #[test]
    fn rejects_gaps_and_conflicts() {
        let e = ForecastArchive::from_records(vec![rec(1, 1, None), rec(1, 3, None)]).unwrap_err();
        assert!(e.to_string().contains("missing 2"));
        let a =
            ForecastArchive::from_records(vec![rec(1, 1, None), rec(1, 2, Some(1.0)), rec(2, 1, Some(2.0))]).unwrap();
        assert!(a.observations().is_err());
        assert!(ForecastArchive::read(&b"{\"origin\":1}\n"[..]).is_err());
        let bad = br#"{"origin":1,"horizon":1,"density":{"type":"normal","mu":0,"sigma":-1}}"#;
        assert!(ForecastArchive::read(&bad[..]).is_err());
    }
}
