//! Report files: metrics.csv, ranks.csv, curves/ and summary.json.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::aggregate::RankTable;
use crate::eval::sweep::{MetricRecord, SweepCurves};
use crate::output::write_atomic;

pub const METRICS_HEADER: &str = "dataset,method,attack,eps,ci,ibs,negll,ci_flag,ibs_flag,negll_flag,seed";

pub fn metrics_to_csv(records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(METRICS_HEADER.split(','))
            .map_err(|e| Error::Codec(e.to_string()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| Error::Codec(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Codec(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::format(Some(1), e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != METRICS_HEADER {
        return Err(Error::format(Some(1), format!("expected header {METRICS_HEADER}")));
    }
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::format(Some(i + 2), e.to_string())))
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    metrics_from_csv(&text)
}

/// Writes the report files under `out_dir`. `summary` is echoed verbatim to
/// summary.json; `ranks` is skipped when absent.
pub fn emit_report(
    records: &[MetricRecord],
    ranks: Option<&RankTable>,
    curves: &SweepCurves,
    summary: &impl Serialize,
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let out = out_dir.as_ref();
    if records.is_empty() {
        return Err(Error::Input("no metric records to report".into()));
    }
    write_atomic(out.join("metrics.csv"), metrics_to_csv(records)?.as_bytes())?;
    if let Some(r) = ranks {
        write_atomic(out.join("ranks.csv"), r.to_csv().as_bytes())?;
    }
    let curve_dir = out.join("curves");
    std::fs::create_dir_all(&curve_dir).map_err(|e| Error::io(&curve_dir, e))?;
    for (name, c) in &curves.curves {
        write_atomic(curve_dir.join(format!("{name}.csv")), c.to_csv().as_bytes())?;
    }
    if let Some(km) = &curves.km {
        write_atomic(curve_dir.join("km_test.csv"), km.to_csv().as_bytes())?;
    }
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Codec(e.to_string()))?;
    write_atomic(out.join("summary.json"), json.as_bytes())?;
    Ok(())
}
