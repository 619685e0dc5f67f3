// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::RangeInclusive;
use std::sync::Arc;

use rayon::prelude::*;

use super::RunReport;
use crate::error::{Result, SpectroError};
use crate::instrument::{parse_site, run_with_suppression, run_with_swap, swap_pairs, HookSite, PatchMode, Scope};
use crate::model::{forward, mean_nll, ModelBundle, NllSummary, TokenSequence};
use crate::spectra::{FilterFamily, FilterSpec, LinearFilter, Spectra};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    Mlp,
    Rs,
}

impl SiteKind {
    fn prefix(self) -> &'static str {
        match self {
            Self::Mlp => "mlp",
            Self::Rs => "rs",
        }
    }
}

impl std::str::FromStr for SiteKind {
    type Err = SpectroError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "rs" => Ok(Self::Rs),
            _ => Err(SpectroError::parse("site kind", s, "expected `mlp` or `rs`")),
        }
    }
}

/// Grid of hook sites times filters, both as canonical strings.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub sites: Vec<String>,
    pub filters: Vec<String>,
    pub n_bands: usize,
}

impl SweepSpec {
    /// Sites `kind:l[@suffix]` for every layer crossed with the family's
    /// filters at every `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn grid(
        kind: SiteKind,
        layers: &[usize],
        scope: Scope,
        mode: PatchMode,
        family: FilterFamily,
        ks: RangeInclusive<usize>,
        seed: u64,
        n_bands: usize,
    ) -> Self {
        let suffix = match (mode, scope) {
            (PatchMode::Swap, _) => "@swap",
            (_, Scope::AllTokens) => "",
            (_, Scope::BosOnly) => "@bos",
            (_, Scope::AllExceptBos) => "@nobos",
        };
        Self {
            sites: layers.iter().map(|l| format!("{}:{l}{suffix}", kind.prefix())).collect(),
            filters: ks.map(|k| FilterSpec::of_family(family, k, seed, n_bands).to_string()).collect(),
            n_bands,
        }
    }

    /// `(site, filter)` pairs in report order: site-major, then filter.
    pub fn cells(&self) -> Vec<(&str, &str)> {
        self.sites.iter().flat_map(|s| self.filters.iter().map(move |f| (s.as_str(), f.as_str()))).collect()
    }
}

/// A cell that could not be run; the sweep continues without it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellError {
    pub site: String,
    pub filter: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Baseline row first, then one row per runnable cell.
    pub rows: Vec<RunReport>,
    pub errors: Vec<CellError>,
}

impl SweepOutcome {
    /// Every non-baseline cell diverged (and there was at least one).
    pub fn all_diverged(&self) -> bool {
        let mut cells = self.rows.iter().filter(|r| !r.is_baseline()).peekable();
        cells.peek().is_some() && cells.all(|r| r.diverged)
    }
}

fn run_cell(
    bundle: &ModelBundle,
    prompts: &[TokenSequence],
    site: HookSite,
    mode: PatchMode,
    filter: &LinearFilter,
) -> Result<NllSummary> {
    let mut total = NllSummary::empty();
    match mode {
        PatchMode::Suppress => {
            for p in prompts {
                total.merge(&run_with_suppression(bundle, p, site, filter, None)?.0);
            }
        }
        PatchMode::Swap => {
            let n = prompts.len();
            if n < 2 {
                return Err(SpectroError::InvalidArgument("swap cells need at least two prompts".into()));
            }
            for (a, b) in swap_pairs(n) {
                let out = run_with_swap(bundle, &prompts[a], &prompts[b], site, filter, None)?;
                total.merge(&out.nll_a);
                // the wrap-around pair only scores its first member
                if !(n % 2 == 1 && a == n - 1) {
                    total.merge(&out.nll_b);
                }
            }
        }
    }
    Ok(total)
}

fn baseline(bundle: &ModelBundle, prompts: &[TokenSequence]) -> Result<NllSummary> {
    let mut total = NllSummary::empty();
    for p in prompts {
        let out = forward(bundle, p, None, None)?;
        total.merge(&mean_nll(&out.logits, p)?);
    }
    Ok(total)
}

fn row(site: String, layer: Option<usize>, spec: &FilterSpec, kept: f64, nll: &NllSummary) -> RunReport {
    RunReport {
        site,
        layer,
        family: spec.family.name().to_owned(),
        k: Some(spec.k),
        filter: spec.to_string(),
        kept_fraction: kept,
        nll_mean: nll.mean(),
        token_count: nll.token_count,
        diverged: nll.mean().is_none(),
    }
}

/// Runs every cell of `spec` over all prompts.
///
/// Cells run in parallel; rows come back in [`SweepSpec::cells`] order, so
/// the output is independent of scheduling. Each prompt contributes its
/// summed NLL to the cell, and the cell mean is per token.
pub fn sweep(
    bundle: &ModelBundle,
    spectra: &Spectra,
    prompts: &[TokenSequence],
    spec: &SweepSpec,
) -> Result<SweepOutcome> {
    if prompts.is_empty() {
        return Err(SpectroError::InvalidArgument("sweep needs at least one prompt".into()));
    }
    if spec.n_bands != spectra.n_bands() {
        return Err(SpectroError::InvalidArgument(format!(
            "sweep uses {} bands, spectra were built with {}",
            spec.n_bands,
            spectra.n_bands()
        )));
    }
    for p in prompts {
        p.validate(&bundle.config)?;
    }

    let base = baseline(bundle, prompts)?;
    let id = FilterSpec::identity(spec.n_bands);
    let mut rows = vec![row("none".into(), None, &id, 1.0, &base)];
    let mut errors = Vec::new();

    let filters: Vec<std::result::Result<Arc<LinearFilter>, String>> =
        spec.filters.iter().map(|f| spectra.parse_filter(f).map(Arc::new).map_err(|e| e.to_string())).collect();
    let sites: Vec<std::result::Result<(HookSite, PatchMode), String>> = spec
        .sites
        .iter()
        .map(|s| {
            let parsed = parse_site(s).map_err(|e| e.to_string())?;
            parsed.0.validate(&bundle.config).map_err(|e| e.to_string())?;
            Ok(parsed)
        })
        .collect();

    let mut jobs = Vec::new();
    for (si, s) in spec.sites.iter().enumerate() {
        for (fi, f) in spec.filters.iter().enumerate() {
            match (&sites[si], &filters[fi]) {
                (Ok(site), Ok(filter)) => jobs.push((s, *site, Arc::clone(filter))),
                (Err(reason), _) | (_, Err(reason)) => {
                    errors.push(CellError { site: s.clone(), filter: f.clone(), reason: reason.clone() })
                }
            }
        }
    }

    let results: Vec<_> = jobs
        .par_iter()
        .map(|(label, (site, mode), filter)| {
            run_cell(bundle, prompts, *site, *mode, filter).map_err(|e| CellError {
                site: (*label).clone(),
                filter: filter.spec().to_string(),
                reason: e.to_string(),
            })
        })
        .collect();

    for ((label, (site, _), filter), res) in jobs.iter().zip(results) {
        match res {
            Ok(nll) => {
                let fs = filter.spec();
                rows.push(row(
                    (*label).clone(),
                    Some(site.placement.layer()),
                    fs,
                    fs.kept_fraction(&spectra.partition),
                    &nll,
                ));
            }
            Err(e) => errors.push(e),
        }
    }
    for e in &errors {
        log::warn!("skipped cell {} / {}: {}", e.site, e.filter, e.reason);
    }
    Ok(SweepOutcome { rows, errors })
}
