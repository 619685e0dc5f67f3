// SPDX-License-Identifier: MIT OR Apache-2.0

//! NLL sweep of nested `phi_u` filters over the residual stream after every
//! layer, written as CSV and rendered as an SVG heatmap.
//!
//! Run: `cargo run --release --example filter_sweep [out_dir]`

use std::path::PathBuf;

use spectro::instrument::{PatchMode, Scope};
use spectro::model::{synth_model, ModelConfig, TokenSequence};
use spectro::report::{self, HeatmapAxes, SiteKind, SweepSpec};
use spectro::spectra::{FilterFamily, Spectra};

fn main() -> spectro::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("spectro-sweep"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| spectro::SpectroError::io(&out, e))?;

    let cfg = ModelConfig::tiny(4, 32, 4, 64);
    let bundle = synth_model(&cfg, 0)?;
    let n_bands = 8;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, n_bands)?;
    let prompts: Vec<TokenSequence> =
        (0..6).map(|i| TokenSequence::with_bos(1, (0..20).map(|t| 2 + (7 * t + 5 * i) % 62))).collect();

    let layers: Vec<usize> = (0..cfg.n_layers).collect();
    let spec = SweepSpec::grid(
        SiteKind::Rs,
        &layers,
        Scope::AllTokens,
        PatchMode::Suppress,
        FilterFamily::PhiU,
        1..=n_bands,
        0,
        n_bands,
    );
    let outcome = report::sweep(&bundle, &spectra, &prompts, &spec)?;

    let csv = out.join("report.csv");
    report::write_reports_file(&outcome.rows, &csv)?;
    let axes = HeatmapAxes { title: Some("phi_u on the residual stream".into()), ..HeatmapAxes::default() };
    let svg = out.join("heatmap.svg");
    std::fs::write(&svg, report::render_heatmap(&outcome.rows, &axes)?)
        .map_err(|e| spectro::SpectroError::io(&svg, e))?;

    println!("baseline nll {:.4}", outcome.rows[0].nll_mean.unwrap_or(f64::NAN));
    for l in &layers {
        let line: Vec<String> = outcome
            .rows
            .iter()
            .filter(|r| r.layer == Some(*l))
            .map(|r| r.nll_mean.map_or("  div ".into(), |v| format!("{v:6.3}")))
            .collect();
        println!("rs:{l}  {}", line.join(" "));
    }
    println!("wrote {} and {}", csv.display(), svg.display());
    Ok(())
}
