// SPDX-License-Identifier: MIT OR Apache-2.0

//! A two-layer model whose writer MLP talks to its reader MLP only through
//! the darkest band of the unembedding spectrum.
//!
//! Run: `cargo run --example planted_dark_writer`

use spectro::instrument::{PatchMode, Scope};
use spectro::model::PlantedDarkWriter;
use spectro::report::{self, band_mass_fraction, SiteKind, SweepSpec};
use spectro::spectra::{BasisLabel, FilterFamily, Spectra};

fn main() -> spectro::Result<()> {
    let planted = PlantedDarkWriter::build(0)?;
    let n = planted.n_bands;
    let bundle = &planted.bundle;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, n)?;

    let selector = format!("layer.{}.w2", planted.writer_layer);
    let profile = report::profile_params(bundle, &spectra, &selector, BasisLabel::Unembedding)?;
    println!("{selector}: {:.4} of profile mass in band {n}", band_mass_fraction(&profile, n));

    let prompts = planted.prompts(16, 12, 1);
    let spec = SweepSpec::grid(
        SiteKind::Mlp,
        &[planted.writer_layer],
        Scope::AllTokens,
        PatchMode::Suppress,
        FilterFamily::PhiU,
        1..=n,
        0,
        n,
    );
    let outcome = report::sweep(bundle, &spectra, &prompts, &spec)?;
    for row in &outcome.rows {
        println!("{:>8} {:>12}  kept {:.3}  nll {:?}", row.site, row.filter, row.kept_fraction, row.nll_mean);
    }
    Ok(())
}
