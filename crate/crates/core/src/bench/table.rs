use std::io::Write;

use super::config::{ExperimentConfig, Method, ProblemConfig};
use super::record::{fmt_float, ExperimentRecord};
use super::run::run_experiment;
use super::BenchError;
use crate::integrands::GenzFamily;
use crate::numerics::{mean, std_dev};

pub const TABLE_HEADER: [&str; 7] = ["family", "method", "d", "n", "repetitions", "mean_rel_error", "std_rel_error"];

/// Mean and spread of the relative error over the successful repetitions of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub family: GenzFamily,
    pub method: Method,
    pub d: usize,
    pub n: usize,
    /// Repetitions that produced an estimate.
    pub repetitions: usize,
    pub mean_rel_error: f64,
    pub std_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GenzTable {
    pub methods: Vec<Method>,
    /// Family-major: all methods of the first family, then the next family.
    pub cells: Vec<TableCell>,
    pub records: Vec<ExperimentRecord>,
}

impl GenzTable {
    /// (families, methods).
    pub fn shape(&self) -> (usize, usize) {
        (self.cells.len() / self.methods.len().max(1), self.methods.len())
    }

    pub fn cell(&self, family: GenzFamily, method: Method) -> Option<&TableCell> {
        self.cells.iter().find(|c| c.family == family && c.method == method)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), BenchError> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(TABLE_HEADER)?;
        for c in &self.cells {
            out.write_record([
                c.family.to_string(),
                c.method.to_string(),
                c.d.to_string(),
                c.n.to_string(),
                c.repetitions.to_string(),
                fmt_float(c.mean_rel_error),
                fmt_float(c.std_rel_error),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String, BenchError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("fields are UTF-8"))
    }
}

/// Every Genz family against every method at one (d, n). Seeds, repetitions, workers and
/// the method sections come from `template`; its problem, method and n are replaced.
pub fn genz_table(d: usize, n: usize, methods: &[Method], template: &ExperimentConfig) -> Result<GenzTable, BenchError> {
    let cfgs: Vec<ExperimentConfig> = GenzFamily::ALL
        .iter()
        .flat_map(|&family| methods.iter().map(move |&method| ExperimentConfig { problem: ProblemConfig::Genz { family, dim: d }, method, n, ..template.clone() }))
        .collect();
    for c in &cfgs {
        c.validate()?;
    }
    let mut cells = Vec::with_capacity(cfgs.len());
    let mut records = Vec::new();
    for c in &cfgs {
        let recs = run_experiment(c)?;
        let errs: Vec<f64> = recs.iter().filter(|r| r.succeeded()).map(|r| r.rel_error).collect();
        let ProblemConfig::Genz { family, .. } = c.problem else { unreachable!() };
        cells.push(TableCell {
            family,
            method: c.method,
            d,
            n,
            repetitions: errs.len(),
            mean_rel_error: mean(&errs),
            std_rel_error: if errs.is_empty() { f64::NAN } else { std_dev(&errs) },
        });
        records.extend(recs);
    }
    Ok(GenzTable { methods: methods.to_vec(), cells, records })
}
