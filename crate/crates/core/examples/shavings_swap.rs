// SPDX-License-Identifier: MIT OR Apache-2.0

//! Swap the component a filter removes between paired prompts. BoS is
//! shared, so its stream is untouched while every other token is perturbed.
//!
//! Run: `cargo run --example shavings_swap`

use spectro::instrument::HookSite;
use spectro::model::{synth_model, ModelConfig, TokenSequence};
use spectro::report;
use spectro::spectra::Spectra;

fn main() -> spectro::Result<()> {
    let bundle = synth_model(&ModelConfig::tiny(3, 32, 4, 64), 1)?;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, 8)?;
    let prompts: Vec<TokenSequence> =
        (0..5).map(|i| TokenSequence::with_bos(1, (0..10).map(|t| 2 + (11 * t + 3 * i + i * i) % 60))).collect();

    let filter = spectra.parse_filter("phi_u:1..6")?;
    let rows = report::swap_report(&bundle, &prompts, HookSite::residual(1), &filter)?;
    report::write_swap_report(&rows, std::io::stdout().lock())?;
    Ok(())
}
