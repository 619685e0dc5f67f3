// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hook sites, patch plans, and the paired-run drivers built on them.
//!
//! A hook site is either the output of one layer's MLP (before it is added
//! to the residual stream) or the residual stream right after a complete
//! layer (after both the attention and the MLP contributions were added,
//! before the next layer's pre-norm).
//!
//! Canonical site strings: `mlp:3`, `rs:12`, `rs:12@bos`, `rs:12@nobos`,
//! `rs:12@swap`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Result, SpectroError};
use crate::linalg::{norm, Matrix};
use crate::model::{
    forward, mean_nll, ForwardTrace, HookRecord, ModelBundle, ModelConfig, NllSummary, TokenSequence, TraceSpec,
};
use crate::spectra::LinearFilter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placement {
    MlpOutput(usize),
    ResidualAfterLayer(usize),
}

impl Placement {
    pub fn layer(self) -> usize {
        match self {
            Self::MlpOutput(l) | Self::ResidualAfterLayer(l) => l,
        }
    }

    /// `mlp` or `rs`.
    pub fn kind(self) -> &'static str {
        match self {
            Self::MlpOutput(_) => "mlp",
            Self::ResidualAfterLayer(_) => "rs",
        }
    }
}

/// Which token positions a hook touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Scope {
    #[default]
    AllTokens,
    BosOnly,
    /// Everything but the BoS token (the converse of `BosOnly`).
    AllExceptBos,
}

impl Scope {
    pub fn covers(self, tokens: &TokenSequence, t: usize) -> bool {
        match self {
            Self::AllTokens => true,
            Self::BosOnly => tokens.is_bos(t),
            Self::AllExceptBos => !tokens.is_bos(t),
        }
    }

    fn covers_flag(self, is_bos: bool) -> bool {
        match self {
            Self::AllTokens => true,
            Self::BosOnly => is_bos,
            Self::AllExceptBos => !is_bos,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HookSite {
    pub placement: Placement,
    pub scope: Scope,
}

impl HookSite {
    pub fn mlp(layer: usize) -> Self {
        Self { placement: Placement::MlpOutput(layer), scope: Scope::AllTokens }
    }

    pub fn residual(layer: usize) -> Self {
        Self { placement: Placement::ResidualAfterLayer(layer), scope: Scope::AllTokens }
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let l = self.placement.layer();
        if l >= config.n_layers {
            return Err(SpectroError::InvalidArgument(format!(
                "hook site {self} outside layers 0..{}",
                config.n_layers
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.placement.kind(), self.placement.layer())?;
        match self.scope {
            Scope::AllTokens => Ok(()),
            Scope::BosOnly => f.write_str("@bos"),
            Scope::AllExceptBos => f.write_str("@nobos"),
        }
    }
}

/// What happens to the component a filter removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PatchMode {
    /// Drop it: `v <- F v`.
    #[default]
    Suppress,
    /// Replace it with the partner sample's: `v <- F v + (I - F) v_partner`.
    Swap,
}

/// Parses a canonical site string into the site and its patch mode.
pub fn parse_site(s: &str) -> Result<(HookSite, PatchMode)> {
    let err = |reason: &str| SpectroError::parse("site", s, reason);
    let (base, suffix) = match s.trim().split_once('@') {
        Some((b, suf)) => (b, Some(suf)),
        None => (s.trim(), None),
    };
    let (kind, layer) = base.split_once(':').ok_or_else(|| err("expected `<mlp|rs>:<layer>`"))?;
    let layer: usize = layer.parse().map_err(|_| err("layer must be an integer"))?;
    let placement = match kind {
        "mlp" => Placement::MlpOutput(layer),
        "rs" => Placement::ResidualAfterLayer(layer),
        _ => return Err(err("site kind must be `mlp` or `rs`")),
    };
    let (scope, mode) = match suffix {
        None | Some("all") => (Scope::AllTokens, PatchMode::Suppress),
        Some("bos") => (Scope::BosOnly, PatchMode::Suppress),
        Some("nobos") => (Scope::AllExceptBos, PatchMode::Suppress),
        Some("swap") => (Scope::AllTokens, PatchMode::Swap),
        Some(_) => return Err(err("suffix must be @bos, @nobos, or @swap")),
    };
    Ok((HookSite { placement, scope }, mode))
}

impl FromStr for HookSite {
    type Err = SpectroError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(parse_site(s)?.0)
    }
}

/// The partner sample's unpatched site vectors, one per token position.
///
/// The filtered-away component `(I - F) v_partner` is derived from these
/// at patch time.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapBuffer {
    pub placement: Placement,
    pub vectors: Vec<Vec<f64>>,
}

impl SwapBuffer {
    /// Extracts the site vectors of `placement` from an unhooked run.
    pub fn from_trace(trace: &ForwardTrace, placement: Placement) -> Result<Self> {
        let vectors = match placement {
            Placement::MlpOutput(l) => {
                trace.mlp_out.as_ref().ok_or(SpectroError::MissingCapture("mlp_out"))?.get(l).cloned()
            }
            Placement::ResidualAfterLayer(l) => {
                trace.residuals.as_ref().ok_or(SpectroError::MissingCapture("residuals"))?.get(l + 1).cloned()
            }
        }
        .ok_or_else(|| SpectroError::InvalidArgument(format!("layer {} not traced", placement.layer())))?;
        Ok(Self { placement, vectors })
    }

    /// Shaving of the partner at `t`, or `None` past the partner's end.
    pub fn shaving(&self, filter: &LinearFilter, t: usize) -> Option<Vec<f64>> {
        self.vectors.get(t).map(|v| {
            let kept = filter.apply_unchecked(v);
            v.iter().zip(kept).map(|(a, b)| a - b).collect()
        })
    }
}

#[derive(Debug, Clone)]
pub struct HookEntry {
    pub site: HookSite,
    pub filter: Arc<LinearFilter>,
    pub mode: PatchMode,
    swap: Option<Arc<SwapBuffer>>,
}

impl HookEntry {
    fn patch(&self, is_bos: bool, t: usize, v: &mut Vec<f64>) {
        if !self.site.scope.covers_flag(is_bos) {
            return;
        }
        let partner = match self.mode {
            PatchMode::Suppress => None,
            PatchMode::Swap => self.swap.as_ref().and_then(|b| b.vectors.get(t)),
        };
        match partner {
            // v + (I - F)(p - v): equal to F v + (I - F) p, and exactly v when p == v
            Some(p) => {
                let diff: Vec<f64> = p.iter().zip(v.iter()).map(|(a, b)| a - b).collect();
                let kept = self.filter.apply_unchecked(&diff);
                for ((x, dd), kk) in v.iter_mut().zip(&diff).zip(&kept) {
                    *x += dd - kk;
                }
            }
            None => {
                if !self.filter.is_identity() {
                    *v = self.filter.apply_unchecked(v);
                }
            }
        }
    }
}

/// Where and how to patch a forward pass.
#[derive(Debug, Clone, Default)]
pub struct HookPlan {
    entries: Vec<HookEntry>,
}

impl HookPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// A plan with one suppression entry.
    pub fn single(site: HookSite, filter: LinearFilter) -> Self {
        let mut plan = Self::new();
        plan.push(site, Arc::new(filter), PatchMode::Suppress).expect("empty plan has no duplicates");
        plan
    }

    pub fn entries(&self) -> &[HookEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds an entry; at most one entry per (placement, scope).
    pub fn push(&mut self, site: HookSite, filter: Arc<LinearFilter>, mode: PatchMode) -> Result<&mut Self> {
        if self.entries.iter().any(|e| e.site == site) {
            return Err(SpectroError::InvalidArgument(format!("hook plan already has an entry at {site}")));
        }
        self.entries.push(HookEntry { site, filter, mode, swap: None });
        Ok(self)
    }

    /// Gives every swap entry at `placement` its partner's site vectors.
    pub fn attach_swap_buffer(&mut self, buffer: Arc<SwapBuffer>) -> Result<()> {
        let mut attached = false;
        for e in &mut self.entries {
            if e.mode == PatchMode::Swap && e.site.placement == buffer.placement {
                e.swap = Some(Arc::clone(&buffer));
                attached = true;
            }
        }
        if attached {
            Ok(())
        } else {
            Err(SpectroError::InvalidArgument(format!(
                "no swap entry at {}:{}",
                buffer.placement.kind(),
                buffer.placement.layer()
            )))
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for e in &self.entries {
            e.site.validate(config)?;
            if e.filter.d() != config.d_model {
                return Err(SpectroError::Shape(format!(
                    "filter at {} acts on {} dims, model has d = {}",
                    e.site,
                    e.filter.d(),
                    config.d_model
                )));
            }
            if e.mode == PatchMode::Swap && e.swap.is_none() {
                return Err(SpectroError::InvalidArgument(format!(
                    "swap entry at {} has no partner buffer; use run_with_swap",
                    e.site
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn has_swap(&self) -> bool {
        self.entries.iter().any(|e| e.mode == PatchMode::Swap)
    }

    /// Patches the site vector of token `t` in place (capture-pre, filter,
    /// capture-post).
    pub(crate) fn patch(
        &self,
        placement: Placement,
        t: usize,
        is_bos: bool,
        v: &mut Vec<f64>,
        records: Option<&mut Vec<HookRecord>>,
    ) {
        let mut records = records;
        for e in self.entries.iter().filter(|e| e.site.placement == placement) {
            if !e.site.scope.covers_flag(is_bos) {
                continue;
            }
            let pre = records.is_some().then(|| v.clone());
            e.patch(is_bos, t, v);
            if let (Some(recs), Some(pre)) = (records.as_deref_mut(), pre) {
                recs.push(HookRecord { site: e.site, position: t, pre, post: v.clone() });
            }
        }
    }
}

/// Runs `tokens` with `filter` at `site` and measures mean NLL.
pub fn run_with_suppression(
    bundle: &ModelBundle,
    tokens: &TokenSequence,
    site: HookSite,
    filter: &LinearFilter,
    trace: Option<&TraceSpec>,
) -> Result<(NllSummary, ForwardTrace)> {
    let plan = HookPlan::single(site, filter.clone());
    let out = forward(bundle, tokens, Some(&plan), trace)?;
    let nll = mean_nll(&out.logits, tokens)?;
    Ok((nll, out.trace))
}

/// Result of one paired swap run.
#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub nll_a: NllSummary,
    pub nll_b: NllSummary,
    pub trace_a: ForwardTrace,
    pub trace_b: ForwardTrace,
}

impl SwapOutcome {
    /// Token-weighted NLL over both samples.
    pub fn combined(&self) -> NllSummary {
        let mut all = self.nll_a.clone();
        all.merge(&self.nll_b);
        all
    }
}

fn site_trace_spec(placement: Placement) -> TraceSpec {
    match placement {
        Placement::MlpOutput(_) => TraceSpec { contributions: true, ..TraceSpec::default() },
        Placement::ResidualAfterLayer(_) => TraceSpec { residuals: true, ..TraceSpec::default() },
    }
}

/// Shavings swap: at `site`, each sample keeps `F v` of its own vector and
/// receives `(I - F) v` of the partner's vector at the same position.
/// Positions past the shorter sample fall back to suppression.
///
/// Pass one records both samples' unpatched site vectors; pass two runs
/// each sample with the partner's buffer.
pub fn run_with_swap(
    bundle: &ModelBundle,
    tokens_a: &TokenSequence,
    tokens_b: &TokenSequence,
    site: HookSite,
    filter: &LinearFilter,
    trace: Option<&TraceSpec>,
) -> Result<SwapOutcome> {
    if !(tokens_a.bos_prepended && tokens_b.bos_prepended) || tokens_a.ids[0] != tokens_b.ids[0] {
        return Err(SpectroError::InvalidArgument("swap partners must both start with the same BoS token".into()));
    }
    site.validate(&bundle.config)?;
    let capture = site_trace_spec(site.placement);
    let clean_a = forward(bundle, tokens_a, None, Some(&capture))?;
    let clean_b = forward(bundle, tokens_b, None, Some(&capture))?;
    let buf_a = Arc::new(SwapBuffer::from_trace(&clean_a.trace, site.placement)?);
    let buf_b = Arc::new(SwapBuffer::from_trace(&clean_b.trace, site.placement)?);

    let filter = Arc::new(filter.clone());
    let run = |tokens: &TokenSequence, partner: Arc<SwapBuffer>| -> Result<(NllSummary, ForwardTrace)> {
        let mut plan = HookPlan::new();
        plan.push(site, Arc::clone(&filter), PatchMode::Swap)?;
        plan.attach_swap_buffer(partner)?;
        let out = forward(bundle, tokens, Some(&plan), trace)?;
        Ok((mean_nll(&out.logits, tokens)?, out.trace))
    };
    let (nll_a, trace_a) = run(tokens_a, buf_b)?;
    let (nll_b, trace_b) = run(tokens_b, buf_a)?;
    Ok(SwapOutcome { nll_a, nll_b, trace_a, trace_b })
}

/// Pairs `(0,1), (2,3), ...`; with an odd count the last sample pairs with
/// the first.
pub fn swap_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = (0..n / 2).map(|i| (2 * i, 2 * i + 1)).collect();
    if n % 2 == 1 && n > 1 {
        pairs.push((n - 1, 0));
    }
    pairs
}

/// Composition of the BoS residual stream after one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BosLayerRecord {
    pub layer: usize,
    pub rs_norm: f64,
    pub dark_norm: f64,
    pub light_norm: f64,
    pub mlp_norm: f64,
    pub attn_norm: f64,
}

/// Per-layer norms of token 0's residual stream after each layer, split
/// into its projection on the dark subspace and the orthogonal complement,
/// plus the norms of that layer's MLP and attention contributions.
pub fn capture_bos_profile(trace: &ForwardTrace, dark_projector: &LinearFilter) -> Result<Vec<BosLayerRecord>> {
    let residuals = trace.residuals.as_ref().ok_or(SpectroError::MissingCapture("residuals"))?;
    let mlp = trace.mlp_out.as_ref().ok_or(SpectroError::MissingCapture("mlp_out"))?;
    let attn = trace.attn_out.as_ref().ok_or(SpectroError::MissingCapture("attn_out"))?;
    if trace.n_tokens == 0 {
        return Err(SpectroError::InvalidArgument("empty trace".into()));
    }
    (0..trace.n_layers)
        .map(|l| {
            let rs = &residuals[l + 1][0];
            let dark = dark_projector.apply(rs)?;
            let light: Vec<f64> = rs.iter().zip(&dark).map(|(a, b)| a - b).collect();
            Ok(BosLayerRecord {
                layer: l,
                rs_norm: norm(rs),
                dark_norm: norm(&dark),
                light_norm: norm(&light),
                mlp_norm: norm(&mlp[l][0]),
                attn_norm: norm(&attn[l][0]),
            })
        })
        .collect()
}

/// `(site, filter)` labels for every entry of a plan.
pub fn describe_plan(plan: &HookPlan) -> Vec<(String, String)> {
    plan.entries().iter().map(|e| (e.site.to_string(), e.filter.spec().to_string())).collect()
}

#[allow(dead_code)]
fn _assert_send_sync() {
    fn check<T: Send + Sync>() {}
    check::<HookPlan>();
    check::<Matrix>();
}
