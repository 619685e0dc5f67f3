// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy and nucleus generation on the planted model, with and without
//! the U-dark band removed from the writer MLP.
//!
//! Run: `cargo run --example filtered_generation`

use spectro::instrument::{HookPlan, HookSite};
use spectro::model::{generate, PlantedDarkWriter, SamplingParams, TokenSequence};
use spectro::spectra::Spectra;

fn main() -> spectro::Result<()> {
    let planted = PlantedDarkWriter::build(0)?;
    let bundle = &planted.bundle;
    let n = planted.n_bands;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, n)?;
    let plan =
        HookPlan::single(HookSite::mlp(planted.writer_layer), spectra.parse_filter(&format!("phi_u:1..{}", n - 1))?);

    for cue in [20, 37, 50] {
        let prompt = TokenSequence::with_bos(planted.bos, [cue]);
        let clean = generate(bundle, &prompt, &SamplingParams::greedy(), 0, 1, None)?;
        let cut = generate(bundle, &prompt, &SamplingParams::greedy(), 0, 1, Some(&plan))?;
        println!(
            "cue {cue:>2}: expected {:>2}, clean {:?}, dark band removed {:?}",
            planted.answer_for(cue),
            clean.continuation(),
            cut.continuation()
        );
    }

    let prompt = TokenSequence::with_bos(planted.bos, [20, planted.answer_for(20), 45]);
    let g = generate(bundle, &prompt, &SamplingParams::default(), 7, 8, None)?;
    println!("nucleus (top_p 0.9, T 0.6, seed 7): {:?}", g.continuation());
    Ok(())
}
