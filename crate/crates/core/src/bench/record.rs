use std::io::{Read, Write};
use std::path::Path;

use super::BenchError;

pub const CSV_HEADER: [&str; 13] = ["method", "problem", "d", "n", "seed", "estimate", "reference", "rel_error", "posterior_std", "gamma", "runtime_s", "final_loss", "notes"];

/// Outcome of one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub method: String,
    pub problem: String,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub estimate: f64,
    pub reference: f64,
    /// |estimate − reference| / |reference|, or the absolute error when the reference is zero.
    pub rel_error: f64,
    pub posterior_std: Option<f64>,
    pub gamma: Option<f64>,
    /// Wall-clock seconds of the method itself; sampling time is reported in the notes.
    pub runtime_s: f64,
    pub final_loss: Option<f64>,
    /// `;`-separated `key=value` items.
    pub notes: String,
}

pub fn relative_error(estimate: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        (estimate - reference).abs()
    } else {
        (estimate - reference).abs() / reference.abs()
    }
}

impl ExperimentRecord {
    /// True when the repetition produced an estimate.
    pub fn succeeded(&self) -> bool {
        self.estimate.is_finite()
    }

    pub fn note(&self, key: &str) -> Option<&str> {
        self.notes.split(';').filter_map(|item| item.split_once('=')).find(|(k, _)| k.trim() == key).map(|(_, v)| v.trim())
    }

    fn fields(&self) -> [String; 13] {
        let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
        [
            self.method.clone(),
            self.problem.clone(),
            self.d.to_string(),
            self.n.to_string(),
            self.seed.to_string(),
            fmt_float(self.estimate),
            fmt_float(self.reference),
            fmt_float(self.rel_error),
            opt(self.posterior_std),
            opt(self.gamma),
            fmt_float(self.runtime_s),
            opt(self.final_loss),
            self.notes.clone(),
        ]
    }

    fn from_fields(row: &csv::StringRecord, line: u64) -> Result<Self, BenchError> {
        if row.len() != CSV_HEADER.len() {
            return Err(BenchError::Format(format!("line {line}: expected {} fields, found {}", CSV_HEADER.len(), row.len())));
        }
        let bad = |col: &str, v: &str| BenchError::Format(format!("line {line}: cannot parse {col} from '{v}'"));
        let int = |i: usize| row[i].parse::<u64>().map_err(|_| bad(CSV_HEADER[i], &row[i]));
        let float = |i: usize| row[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i], &row[i]));
        let opt = |i: usize| if row[i].is_empty() { Ok(None) } else { float(i).map(Some) };
        Ok(Self {
            method: row[0].to_string(),
            problem: row[1].to_string(),
            d: int(2)? as usize,
            n: int(3)? as usize,
            seed: int(4)?,
            estimate: float(5)?,
            reference: float(6)?,
            rel_error: float(7)?,
            posterior_std: opt(8)?,
            gamma: opt(9)?,
            runtime_s: float(10)?,
            final_loss: opt(11)?,
            notes: row[12].to_string(),
        })
    }
}

/// Shortest decimal that parses back to the same value.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        return "NaN".into();
    }
    let s = format!("{v:?}");
    match s.strip_suffix(".0") {
        Some(int) => int.to_string(),
        None => s,
    }
}

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

pub fn write_records<W: Write>(records: &[ExperimentRecord], w: W) -> Result<(), BenchError> {
    let mut out = writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record(r.fields())?;
    }
    out.flush()?;
    Ok(())
}

pub fn records_to_csv(records: &[ExperimentRecord]) -> Result<String, BenchError> {
    let mut buf = Vec::new();
    write_records(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("fields are UTF-8"))
}

pub fn emit_csv(records: &[ExperimentRecord], path: impl AsRef<Path>) -> Result<(), BenchError> {
    let file = std::fs::File::create(path)?;
    write_records(records, std::io::BufWriter::new(file))
}

pub fn read_records<R: Read>(r: R) -> Result<Vec<ExperimentRecord>, BenchError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(BenchError::Format(format!("unexpected header '{}'", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        out.push(ExperimentRecord::from_fields(&row?, i as u64 + 2)?);
    }
    Ok(out)
}

pub fn parse_csv(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>, BenchError> {
    read_records(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sample_record() -> ExperimentRecord {
        ExperimentRecord {
            method: "bq".into(),
            problem: "custom:truncated_gaussian:x0".into(),
            d: 1,
            n: 64,
            seed: 3,
            estimate: 0.123456789,
            reference: 0.1234,
            rel_error: relative_error(0.123456789, 0.1234),
            posterior_std: None,
            gamma: None,
            runtime_s: 0.25,
            final_loss: None,
            notes: "kernel=rbf, l=0.5;sampling_time=0.001".into(),
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let s = records_to_csv(&[]).unwrap();
        assert_eq!(s, format!("{}\n", CSV_HEADER.join(",")));
    }

    #[test]
    fn absent_optional_is_empty_field() {
        let s = records_to_csv(&[sample_record()]).unwrap();
        let line = s.lines().nth(1).unwrap();
        assert!(line.contains(",0.1234,"));
        assert!(line.contains(",,,0.25,,"), "{line}");
        assert!(!s.contains('\r'));
        let back = read_records(s.as_bytes()).unwrap();
        assert_eq!(back, vec![sample_record()]);
        assert_eq!(back[0].note("sampling_time"), Some("0.001"));
    }

    #[test]
    fn float_formatting_is_short() {
        assert_eq!(fmt_float(5120.0), "5120");
        assert_eq!(fmt_float(0.1), "0.1");
        assert_eq!(fmt_float(1e-7), "1e-7");
        assert_eq!(fmt_float(f64::NAN), "NaN");
        assert_eq!(fmt_float(-0.0), "-0");
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(matches!(read_records("a,b\n1,2\n".as_bytes()), Err(BenchError::Format(_))));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -1e3..1e3f64]
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            est in finite(), refv in finite(), std in proptest::option::of(finite()),
            gamma in proptest::option::of(finite()), loss in proptest::option::of(finite()),
            n in 1usize..100_000, seed in any::<u64>(), notes in "[a-z=;, \"]{0,20}",
        ) {
            let r = ExperimentRecord {
                method: "bsn".into(), problem: "genz:continuous".into(), d: 2, n, seed,
                estimate: est, reference: refv, rel_error: relative_error(est, refv),
                posterior_std: std, gamma, runtime_s: 1.5, final_loss: loss, notes,
            };
            let s = records_to_csv(std::slice::from_ref(&r)).unwrap();
            let back = read_records(s.as_bytes()).unwrap();
            prop_assert_eq!(back.len(), 1);
            let b = &back[0];
            prop_assert_eq!(b.estimate.to_bits(), r.estimate.to_bits());
            prop_assert_eq!(b.rel_error.to_bits(), r.rel_error.to_bits());
            prop_assert_eq!(b, &r);
        }
    }
}
