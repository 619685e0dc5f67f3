// SPDX-License-Identifier: MIT OR Apache-2.0

//! Composition of the BoS residual stream layer by layer. Two different
//! prompts give the same profile because token 0 only sees itself.
//!
//! Run: `cargo run --example bos_trace`

use spectro::model::{synth_model, ModelConfig, TokenSequence};
use spectro::report;
use spectro::spectra::Spectra;

fn main() -> spectro::Result<()> {
    let bundle = synth_model(&ModelConfig::tiny(6, 32, 4, 64), 3)?;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, 8)?;

    let a = report::trace_bos(&bundle, &spectra, &TokenSequence::with_bos(1, [5, 6, 7, 8]))?;
    let b = report::trace_bos(&bundle, &spectra, &TokenSequence::with_bos(1, [40, 2, 33]))?;

    report::write_bos_profile(&a, std::io::stdout().lock())?;
    println!("identical across prompts: {}", a == b);
    Ok(())
}
