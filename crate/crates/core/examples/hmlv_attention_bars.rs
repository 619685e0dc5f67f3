// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tokens that receive high-mean, low-variance attention from every later
//! token, with their U-dark ratio and cosine to the BoS stream.
//!
//! Run: `cargo run --example hmlv_attention_bars`

use spectro::metrics::{write_hmlv_csv, HmlvParams};
use spectro::model::{synth_model, ModelConfig, TokenSequence};
use spectro::report;
use spectro::spectra::Spectra;

fn main() -> spectro::Result<()> {
    let bundle = synth_model(&ModelConfig::tiny(8, 32, 4, 64), 2)?;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, 8)?;
    let prompts: Vec<TokenSequence> =
        (0..4).map(|i| TokenSequence::with_bos(1, (0..120).map(|t| 2 + (13 * t + 7 * i) % 61))).collect();

    let params = HmlvParams::default();
    let (rows, summary) = report::hmlv_report(&bundle, &spectra, &prompts, &params)?;
    write_hmlv_csv(&rows, std::io::stdout().lock())?;
    println!(
        "{} of {} eligible (layer, token) pairs flagged at tau_mu = {}, tau_sigma = {}",
        summary.flagged, summary.pairs_considered, params.tau_mu, params.tau_sigma
    );
    Ok(())
}
