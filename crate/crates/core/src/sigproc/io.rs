//! CSV time records with a TOML metadata sidecar.
//!
//! The CSV header is `t,u1..u_nu,y1..y_ny,r1..r_nr` with one row per sample.
//! The sidecar shares the file stem and carries the `.toml` extension.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::TimeRecord;
use crate::{fsio, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeRecordMeta {
    pub sample_rate: f64,
    pub period_samples: usize,
    pub n_periods: usize,
    pub settle_periods: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("toml")
}

pub fn write_time_record(path: &Path, record: &TimeRecord, seed: Option<u64>) -> Result<()> {
    record.validate()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let (nu, ny) = (record.u.nrows(), record.y.nrows());
    let nr = record.r.as_ref().map_or(0, |r| r.nrows());
    let mut header = vec!["t".to_string()];
    header.extend((1..=nu).map(|i| format!("u{i}")));
    header.extend((1..=ny).map(|i| format!("y{i}")));
    header.extend((1..=nr).map(|i| format!("r{i}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for k in 0..record.len() {
        row.clear();
        row.push((k as f64 / record.sample_rate).to_string());
        row.extend(record.u.column(k).iter().map(|v| v.to_string()));
        row.extend(record.y.column(k).iter().map(|v| v.to_string()));
        if let Some(r) = &record.r {
            row.extend(r.column(k).iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    fsio::write_atomic(path, &bytes)?;
    let meta = TimeRecordMeta {
        sample_rate: record.sample_rate,
        period_samples: record.period_samples,
        n_periods: record.n_periods,
        settle_periods: record.settle_periods,
        seed,
    };
    fsio::write_atomic(&sidecar_path(path), toml::to_string(&meta)?.as_bytes())
}

pub fn read_time_record(path: &Path) -> Result<(TimeRecord, TimeRecordMeta)> {
    let meta: TimeRecordMeta = toml::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let mut idx: [Vec<usize>; 3] = Default::default();
    for (c, name) in header.iter().enumerate() {
        let slot = match name.chars().next() {
            Some('u') => 0,
            Some('y') => 1,
            Some('r') => 2,
            Some('t') if name == "t" => continue,
            _ => {
                return Err(Error::InvalidRecord(format!("unexpected column '{name}'")));
            }
        };
        idx[slot].push(c);
    }
    if idx[0].is_empty() || idx[1].is_empty() {
        return Err(Error::InvalidRecord("record needs u and y columns".into()));
    }
    let mut cols: [Vec<f64>; 3] = Default::default();
    let mut t = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        for s in 0..3 {
            for &c in &idx[s] {
                let v: f64 = rec[c]
                    .trim()
                    .parse()
                    .map_err(|_| Error::InvalidRecord(format!("bad number '{}'", &rec[c])))?;
                cols[s].push(v);
            }
        }
        t += 1;
    }
    let mat = |s: usize| DMatrix::from_column_slice(idx[s].len(), t, &cols[s]);
    let record = TimeRecord {
        u: mat(0),
        y: mat(1),
        r: (!idx[2].is_empty()).then(|| mat(2)),
        sample_rate: meta.sample_rate,
        period_samples: meta.period_samples,
        n_periods: meta.n_periods,
        settle_periods: meta.settle_periods,
    };
    record.validate()?;
    Ok((record, meta))
}
