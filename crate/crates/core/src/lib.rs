// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit spectroscopy for LLaMa-style decoders.
//!
//! The right singular vectors of the unembedding (and embedding) matrix
//! are split into spectral bands ordered by singular value. Filters built
//! from those bands are injected into the residual stream or MLP outputs
//! of a running model, and the effect is read off as next-token NLL,
//! attention statistics, and residual-stream composition.
//!
//! | module | contents |
//! |---|---|
//! | [`linalg`] | dense `f64` matrices, Jacobi SVD, seeded orthonormal bases |
//! | [`spectra`] | spectral bases, band partitions, filter families |
//! | [`model`] | decoder, LSPC checkpoints, NLL, nucleus sampling |
//! | [`instrument`] | hook sites, suppression and shavings-swap runs |
//! | [`metrics`] | U-dark ratio, received attention, HMLV tokens |
//! | [`report`] | sweeps, CSV reports, SVG heatmaps |
//!
//! Runnable examples, one per capability:
//!
//! * `spectral_bands`: bases, bands, and filter algebra
//! * `filter_sweep`: an NLL sweep rendered as a heatmap
//! * `bos_trace`: the BoS residual stream across layers
//! * `shavings_swap`: swapping filtered-away components between prompts
//! * `hmlv_attention_bars`: high-mean low-variance attention tokens
//! * `planted_dark_writer`: a circuit that talks through the dark band
//! * `filtered_generation`: sampling under a filter
//! * `checkpoint_roundtrip`: writing and loading LSPC containers
//!
//! ```
//! use spectro::model::{synth_model, ModelConfig, TokenSequence, forward, mean_nll};
//! use spectro::instrument::{HookSite, run_with_suppression};
//! use spectro::spectra::Spectra;
//!
//! let bundle = synth_model(&ModelConfig::tiny(2, 32, 4, 64), 0)?;
//! let spectra = Spectra::new(&bundle.embed, &bundle.unembed, 4)?;
//! let tokens = TokenSequence::with_bos(1, [5, 9, 12, 3]);
//!
//! let base = mean_nll(&forward(&bundle, &tokens, None, None)?.logits, &tokens)?;
//! let filter = spectra.parse_filter("phi_u:1..3")?;
//! let (cut, _) = run_with_suppression(&bundle, &tokens, HookSite::residual(0), &filter, None)?;
//! assert!(base.mean().is_some() && cut.mean().is_some());
//! # Ok::<(), spectro::SpectroError>(())
//! ```

pub mod error;
pub mod instrument;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod report;
pub mod spectra;

pub use error::{Result, SpectroError};
