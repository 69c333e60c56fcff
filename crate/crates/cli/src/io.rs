//! Measurement files and output serialization.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use qlse_core::harness::TrialRecord;
use qlse_core::model::{ComplexMatrix, RowSet};
use qlse_core::quantizer::{Measurements, QuantizedData, QuantizerSpec};
use qlse_core::nalgebra::DMatrix;
use qlse_core::num_complex::Complex64;

use crate::CliError;

/// JSON formatter writing every float with 17 significant digits.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullPrecision;

impl Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{}", fmt_f64(value))
    }
}

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    value.serialize(&mut ser).map_err(|e| CliError::Runtime(format!("serialization: {e}")))?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| CliError::Runtime(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = to_json(value)?;
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub const TRIAL_COLUMNS: &[&str] = &[
    "snr_db",
    "bits",
    "trial",
    "seed",
    "k_hat",
    "nmse_db",
    "dnmse_db",
    "freq_mse_db",
    "doa_mse_db",
    "order_correct",
    "mean_kappa",
    "crb_trace_db",
    "outer_iters",
    "converged",
    "error",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_f(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Per-trial CSV. Wall-clock time is left out so reruns are byte-identical.
pub fn write_trials(path: &Path, records: &[TrialRecord]) -> Result<(), CliError> {
    let io_err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(TRIAL_COLUMNS).map_err(io_err)?;
    for r in records {
        w.write_record([
            fmt_f64(r.snr_db),
            r.bits.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            opt(r.k_hat),
            opt_f(r.nmse_db),
            opt_f(r.dnmse_db),
            opt_f(r.freq_mse_db),
            opt_f(r.doa_mse_db),
            r.order_correct.to_string(),
            opt_f(r.mean_kappa),
            opt_f(r.crb_trace_db),
            opt(r.outer_iters),
            opt(r.converged),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))
}

/// Sidecar description of a quantizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerFile {
    pub bits: u32,
    pub thresholds: Vec<f64>,
}

pub fn read_quantizer(path: &Path) -> Result<QuantizerSpec, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let q: QuantizerFile = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    QuantizerSpec::new(q.bits, q.thresholds).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Measurements read from CSV, with the row set they were taken on.
#[derive(Debug, Clone)]
pub struct MeasurementFile {
    pub data: Measurements,
    pub rows: RowSet,
}

enum Kind {
    Analog,
    Indices,
}

/// Reads `m,l,re,im` (analog) or `m,l,re_idx,im_idx` (cell indices, which
/// need `spec`). `n_full` defaults to one past the largest row offset.
pub fn read_measurements(path: &Path, spec: Option<&QuantizerSpec>, n_full: Option<usize>) -> Result<MeasurementFile, CliError> {
    let name = path.display().to_string();
    let parse_err = |line: u64, msg: String| CliError::Parse(format!("{name}:{line}: {msg}"));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Parse(format!("{name}: {e}")))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(1, "empty input: expected a header line".into()));
    }
    let kind = match header.join(",").as_str() {
        "m,l,re,im" => Kind::Analog,
        "m,l,re_idx,im_idx" => Kind::Indices,
        other => return Err(parse_err(1, format!("unrecognized header \"{other}\" (want m,l,re,im or m,l,re_idx,im_idx)"))),
    };
    if matches!(kind, Kind::Indices) && spec.is_none() {
        return Err(CliError::Config(format!("{name}: cell indices need a quantizer description")));
    }

    let mut entries: Vec<(u64, usize, usize, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, what: &str| -> Result<&str, CliError> {
            rec.get(i).filter(|s| !s.is_empty()).ok_or_else(|| parse_err(line, format!("missing {what}")))
        };
        let m: usize = field(0, "m")?.parse().map_err(|_| parse_err(line, format!("bad row offset {:?}", &rec[0])))?;
        let l: usize = field(1, "l")?.parse().map_err(|_| parse_err(line, format!("bad snapshot index {:?}", &rec[1])))?;
        let (a, b) = match kind {
            Kind::Analog => {
                let num = |i: usize, what: &str| -> Result<f64, CliError> {
                    let s = field(i, what)?;
                    s.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| parse_err(line, format!("bad {what} value {s:?}")))
                };
                (num(2, "re")?, num(3, "im")?)
            }
            Kind::Indices => {
                let cells = spec.map_or(0, QuantizerSpec::cells);
                let idx = |i: usize, what: &str| -> Result<f64, CliError> {
                    let s = field(i, what)?;
                    let d: usize = s.parse().map_err(|_| parse_err(line, format!("bad {what} {s:?}")))?;
                    if d >= cells {
                        return Err(CliError::Config(format!("{name}:{line}: {what} {d} outside the {cells} cells of the quantizer")));
                    }
                    Ok(d as f64)
                };
                (idx(2, "re_idx")?, idx(3, "im_idx")?)
            }
        };
        entries.push((line, m, l, a, b));
    }
    if entries.is_empty() {
        return Err(parse_err(2, "no measurements".into()));
    }

    let offsets: Vec<usize> = entries.iter().map(|e| e.1).collect::<BTreeSet<_>>().into_iter().collect();
    let snapshots = entries.iter().map(|e| e.2).max().unwrap_or(0) + 1;
    let n = n_full.unwrap_or(offsets.last().copied().unwrap_or(0) + 1);
    let rows = RowSet::new(offsets.clone(), n).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    let mut seen = DMatrix::<u64>::zeros(offsets.len(), snapshots);
    let mut re = DMatrix::<f64>::zeros(offsets.len(), snapshots);
    let mut im = DMatrix::<f64>::zeros(offsets.len(), snapshots);
    for &(line, m, l, a, b) in &entries {
        let i = offsets.binary_search(&m).expect("offset collected above");
        if seen[(i, l)] != 0 {
            return Err(parse_err(line, format!("duplicate entry m={m} l={l} (first on line {})", seen[(i, l)])));
        }
        seen[(i, l)] = line;
        re[(i, l)] = a;
        im[(i, l)] = b;
    }
    if let Some(pos) = seen.iter().position(|&s| s == 0) {
        let (i, l) = (pos % offsets.len(), pos / offsets.len());
        return Err(CliError::Parse(format!("{name}: missing entry m={} l={l}", offsets[i])));
    }

    let data = match kind {
        Kind::Analog => Measurements::Analog(ComplexMatrix::from_fn(offsets.len(), snapshots, |i, l| Complex64::new(re[(i, l)], im[(i, l)]))),
        Kind::Indices => {
            let spec = spec.expect("checked above").clone();
            let q = QuantizedData::new(re.map(|x| x as usize), im.map(|x| x as usize), spec)
                .map_err(|e| CliError::Config(format!("{name}: {e}")))?;
            Measurements::Quantized(q)
        }
    };
    Ok(MeasurementFile { data, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_keep_seventeen_digits() {
        let x = 0.1 + 0.2;
        let s = fmt_f64(x);
        assert_eq!(s.parse::<f64>().unwrap(), x);
        assert_eq!(s.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
        assert_eq!(to_json(&vec![1.5, f64::NAN]).unwrap(), "[1.5000000000000000e0,null]\n");
    }

    #[test]
    fn reads_analog_and_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csv");
        std::fs::write(&p, "m,l,re,im\n0,0,1.0,2.0\n3,0,-1,0.5\n").unwrap();
        let f = read_measurements(&p, None, Some(8)).unwrap();
        assert_eq!(f.rows.indices(), &[0, 3]);
        assert_eq!(f.rows.n_full(), 8);
        match f.data {
            Measurements::Analog(y) => assert_eq!(y[(1, 0)], Complex64::new(-1.0, 0.5)),
            _ => panic!("expected analog data"),
        }
        std::fs::write(&p, "m,l,re,im\n0,0,1.0,2.0\n1,0,abc,0\n").unwrap();
        let err = read_measurements(&p, None, None).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
    }

    #[test]
    fn missing_cell_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.csv");
        std::fs::write(&p, "m,l,re,im\n0,0,1,1\n1,1,1,1\n").unwrap();
        assert!(read_measurements(&p, None, None).unwrap_err().to_string().contains("missing entry"));
    }
}
