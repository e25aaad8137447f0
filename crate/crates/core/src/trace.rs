//! Per-iteration trace records and their CSV form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "k,wall_nanos,e_pnorm,e_2norm,f_gap,block,beta,blocks_fetched,rows_touched";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub k: usize,
    pub wall_nanos: u64,
    pub e_pnorm: Option<f64>,
    pub e_2norm: Option<f64>,
    pub f_gap: Option<f64>,
    pub block: Option<usize>,
    pub beta: Option<f64>,
    pub blocks_fetched: u64,
    pub rows_touched: u64,
}

pub trait TraceSink {
    fn record(&mut self, rec: TraceRecord);
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, rec: TraceRecord) {
        self.push(rec);
    }
}

/// Discards records.
impl TraceSink for () {
    fn record(&mut self, _: TraceRecord) {}
}

fn real(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        write!(out, "{v:.16e}").expect("write to string");
    }
}

/// CSV text: header, then one LF-terminated row per record with reals
/// written to 17 significant digits and absent values left empty.
pub fn to_csv(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        write!(out, "{},{},", r.k, r.wall_nanos).expect("write to string");
        real(&mut out, r.e_pnorm);
        out.push(',');
        real(&mut out, r.e_2norm);
        out.push(',');
        real(&mut out, r.f_gap);
        out.push(',');
        if let Some(b) = r.block {
            write!(out, "{b}").expect("write to string");
        }
        out.push(',');
        real(&mut out, r.beta);
        writeln!(out, ",{},{}", r.blocks_fetched, r.rows_touched).expect("write to string");
    }
    out
}

pub fn write_csv(records: &[TraceRecord], path: &Path) -> Result<()> {
    fs::write(path, to_csv(records)).map_err(|e| Error::io(path, e))
}

fn field<T: std::str::FromStr>(s: &str, line: usize) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Parse(format!("line {line}: bad field {s:?}")))
}

fn required<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    field(s, line)?.ok_or_else(|| Error::Parse(format!("line {line}: missing field")))
}

pub fn parse_csv(text: &str) -> Result<Vec<TraceRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("missing or unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(Error::Parse(format!("line {line_no}: expected 9 fields")));
            }
            Ok(TraceRecord {
                k: required(f[0], line_no)?,
                wall_nanos: required(f[1], line_no)?,
                e_pnorm: field(f[2], line_no)?,
                e_2norm: field(f[3], line_no)?,
                f_gap: field(f[4], line_no)?,
                block: field(f[5], line_no)?,
                beta: field(f[6], line_no)?,
                blocks_fetched: required(f[7], line_no)?,
                rows_touched: required(f[8], line_no)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_trace_is_header_only() {
        assert_eq!(to_csv(&[]), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn missing_fields_are_empty() {
        let rec = TraceRecord {
            k: 0,
            wall_nanos: 12,
            e_pnorm: Some(1.0),
            e_2norm: None,
            f_gap: None,
            block: None,
            beta: None,
            blocks_fetched: 0,
            rows_touched: 0,
        };
        let csv = to_csv(&[rec.clone()]);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,12,1.0000000000000000e0,,,,,0,0");
        assert!(!csv.contains('\r'));
        assert_eq!(parse_csv(&csv).unwrap(), vec![rec]);
    }

    proptest! {
        #[test]
        fn reals_round_trip_exactly(
            e in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO,
            beta in proptest::num::f64::POSITIVE,
            block in proptest::option::of(0usize..10_000),
        ) {
            let rec = TraceRecord {
                k: 3,
                wall_nanos: 99,
                e_pnorm: Some(e),
                e_2norm: Some(-e),
                f_gap: Some(e * 0.5),
                block,
                beta: Some(beta),
                blocks_fetched: 3,
                rows_touched: 24,
            };
            let back = parse_csv(&to_csv(&[rec.clone()])).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }
    }
}
