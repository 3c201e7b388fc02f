//! `metrics.csv` writer with a fixed column set.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str =
    "iter,round,clean_loss,clean_acc,backdoor_acc,rD_mean,rA_mean,residual_D,residual_A_max,wallclock_s";

/// One metrics row; `None` fields are written as empty cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub round: Option<usize>,
    pub clean_loss: Option<f64>,
    pub clean_acc: Option<f64>,
    pub backdoor_acc: Option<f64>,
    pub r_d_mean: Option<f64>,
    pub r_a_mean: Option<f64>,
    pub residual_d: Option<f64>,
    pub residual_a_max: Option<f64>,
    pub wallclock_s: Option<f64>,
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        [
            self.iter.to_string(),
            cell(self.round),
            cell(self.clean_loss),
            cell(self.clean_acc),
            cell(self.backdoor_acc),
            cell(self.r_d_mean),
            cell(self.r_a_mean),
            cell(self.residual_d),
            cell(self.residual_a_max),
            cell(self.wallclock_s),
        ]
        .join(",")
    }
}

/// Writes the header on creation and flushes after every row.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv())?;
        self.out.flush()?;
        Ok(())
    }
}
