// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral bases of a synthetic model, its band partition, and the
//! algebra of every filter family.
//!
//! Run: `cargo run --example spectral_bands`

use spectro::model::{synth_model, ModelConfig};
use spectro::spectra::{BandPartition, FilterSpec, Spectra};

fn main() -> spectro::Result<()> {
    let bundle = synth_model(&ModelConfig::tiny(2, 64, 4, 256), 0)?;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, 8)?;
    let sigma = spectra.unembedding.sigma();

    println!("band  columns  sigma range");
    for (b, r) in spectra.partition.ranges().iter().enumerate() {
        println!("{:>4}  {:>7}  {:.4} .. {:.4}", b + 1, r.len(), sigma[r.start], sigma[r.end - 1]);
    }

    let n = spectra.n_bands();
    for s in ["phi_u:1..4", "phi_e:1..4", &format!("psi:{}", n - 1), "omega_u:4", "rnd:4:seed=7", "id"] {
        let f = spectra.parse_filter(s)?;
        let m = f.materialize();
        let idem = m.matmul(&m)?.max_abs_diff(&m);
        let sym = m.max_abs_diff(&m.transpose());
        let kept = f.spec().kept_fraction(&spectra.partition);
        println!("{s:>14}: kept {kept:.3}  trace {:7.3}  |F^2-F| {idem:.1e}  |F-F^T| {sym:.1e}", m.trace());
    }

    // 13B-sized partition: 5120 dims in 20 bands
    let p = BandPartition::new(5120, 20)?;
    let omega = FilterSpec::omega_u(14, 20);
    println!(
        "d=5120: band 20 has {} columns, omega_u:14 keeps {} ({:.0}%)",
        p.band(20)?.len(),
        omega.kept_dims(&p),
        100.0 * omega.kept_fraction(&p)
    );
    Ok(())
}
