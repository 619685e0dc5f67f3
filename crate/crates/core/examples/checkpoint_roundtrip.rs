// SPDX-License-Identifier: MIT OR Apache-2.0

//! Write a synthetic model into an LSPC container, inspect its header,
//! and load it back with norm absorption.
//!
//! Run: `cargo run --example checkpoint_roundtrip`

use spectro::model::{load_checkpoint, read_container, save_container, synth_model, ModelConfig};

fn main() -> spectro::Result<()> {
    let bundle = synth_model(&ModelConfig::tiny(2, 16, 2, 32), 0)?;
    let path = std::env::temp_dir().join("spectro-roundtrip.lspc");
    save_container(&bundle.to_container(), &path)?;

    let container = read_container(&path)?;
    for (name, t) in container.tensors.iter().take(6) {
        println!("{name:<16} {:?}", t.shape);
    }
    println!("... {} tensors", container.tensors.len());

    let loaded = load_checkpoint(&path)?;
    println!(
        "unembed checksum {:016x} -> {:016x}, absorbed {}",
        bundle.unembed.checksum(),
        loaded.unembed.checksum(),
        loaded.absorption_done()
    );
    Ok(())
}
