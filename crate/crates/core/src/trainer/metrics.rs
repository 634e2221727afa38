use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

/// Column order of the metrics CSV.
pub const METRICS_HEADER: &str = "iteration,l_base,l_pref,dpo_term,spin_term,total,swaps";

/// One metrics row: the losses of the batch drawn at `iteration`, evaluated
/// before that iteration's update, and the swap count after it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub l_base: f64,
    pub l_pref: f64,
    pub dpo_term: f64,
    pub spin_term: f64,
    pub total: f64,
    pub swaps: u64,
}

impl MetricsRow {
    pub fn new(iteration: u64, loss: &LossBreakdown, swaps: u64) -> Self {
        MetricsRow {
            iteration,
            l_base: loss.l_base,
            l_pref: loss.l_pref,
            dpo_term: loss.dpo_term,
            spin_term: loss.spin_term,
            total: loss.total,
            swaps,
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::config(format!("metrics CSV: {other:?}")),
    }
}

/// Writes the header and rows. Floats use the shortest round-trip form.
pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER.split(',')).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.l_base.to_string(),
            r.l_pref.to_string(),
            r.dpo_term.to_string(),
            r.spin_term.to_string(),
            r.total.to_string(),
            r.swaps.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows written by [`write_metrics`]; lines starting with `#` are
/// skipped.
pub fn read_metrics(bytes: &[u8]) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes);
    let header = reader.headers().map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })?;
    if header.iter().ne(METRICS_HEADER.split(',')) {
        return Err(Error::Parse {
            offset: 0,
            message: format!("unexpected metrics header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e: csv::Error| Error::Parse {
            offset: e.position().map_or(0, |p| p.byte() as usize),
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_header() {
        let rows = vec![
            MetricsRow {
                iteration: 1,
                l_base: 0.1,
                l_pref: 0.6931471805599453,
                dpo_term: -1e-300,
                spin_term: 2.5,
                total: 1.0 / 3.0,
                swaps: 0,
            },
            MetricsRow {
                iteration: 2,
                l_base: 12.0,
                l_pref: 0.0,
                dpo_term: 0.0,
                spin_term: -0.0,
                total: 1e20,
                swaps: 3,
            },
        ];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("{METRICS_HEADER}\n")));
        assert_eq!(read_metrics(&buf).unwrap(), rows);

        let mut annotated = b"# config: {}\n".to_vec();
        annotated.extend_from_slice(&buf);
        assert_eq!(read_metrics(&annotated).unwrap(), rows);
    }

    #[test]
    fn empty_metrics_is_header_only() {
        let mut buf = Vec::new();
        write_metrics(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{METRICS_HEADER}\n"));
    }
}
