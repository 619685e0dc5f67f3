// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment drivers and their machine-readable outputs.

mod analyses;
mod heatmap;
mod prompts;
mod sweep;

pub use analyses::{
    band_mass_fraction, hmlv_report, profile_params, swap_report, trace_bos, write_basis, write_bos_profile,
    write_profile, write_swap_report, HmlvSummary, ProfileRow, SwapRow, BOS_HEADER,
};
pub use heatmap::{render_heatmap, viridis, HeatmapAxes, XAxis, VIRIDIS_STOPS};
pub use prompts::{load_prompts, parse_prompts, PromptFormat};
pub use sweep::{sweep, CellError, SiteKind, SweepOutcome, SweepSpec};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectroError};

/// One heatmap cell: a hook site and filter with the NLL they produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Canonical site string, `none` for the baseline row.
    pub site: String,
    pub layer: Option<usize>,
    pub family: String,
    pub k: Option<usize>,
    /// Canonical filter string.
    pub filter: String,
    pub kept_fraction: f64,
    /// Absent exactly when `diverged`.
    pub nll_mean: Option<f64>,
    pub token_count: usize,
    pub diverged: bool,
}

impl RunReport {
    pub fn is_baseline(&self) -> bool {
        self.site == "none"
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.diverged == self.nll_mean.is_some() {
            return Err("diverged must be set exactly when nll_mean is empty".into());
        }
        if let Some(v) = self.nll_mean {
            if !v.is_finite() {
                return Err(format!("non-finite nll_mean {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.kept_fraction) {
            return Err(format!("kept_fraction {} outside [0, 1]", self.kept_fraction));
        }
        Ok(())
    }
}

pub fn write_reports<W: Write>(rows: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "site",
            "layer",
            "family",
            "k",
            "filter",
            "kept_fraction",
            "nll_mean",
            "token_count",
            "diverged",
        ])?;
    }
    w.flush().map_err(|e| SpectroError::io("<report csv>", e))?;
    Ok(())
}

/// Parses a report CSV; errors name the 1-based data row.
pub fn read_reports<R: Read>(input: R) -> Result<Vec<RunReport>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<RunReport>().enumerate() {
        let row = i + 1;
        let r = rec.map_err(|e| SpectroError::Report { row, reason: e.to_string() })?;
        r.check().map_err(|reason| SpectroError::Report { row, reason })?;
        out.push(r);
    }
    Ok(out)
}

pub fn read_reports_file(path: &Path) -> Result<Vec<RunReport>> {
    let f = std::fs::File::open(path).map_err(|e| SpectroError::io(path, e))?;
    read_reports(std::io::BufReader::new(f))
}

pub fn write_reports_file(rows: &[RunReport], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| SpectroError::io(path, e))?;
    write_reports(rows, std::io::BufWriter::new(f))
}
