// SPDX-License-Identifier: MIT OR Apache-2.0

use super::ops::{log_softmax, rmsnorm, rope_in_place, swiglu};
use super::{ModelBundle, TokenSequence};
use crate::error::{Result, SpectroError};
use crate::instrument::{HookPlan, HookSite, Placement};
use crate::linalg::Matrix;

/// Which intermediate quantities a forward pass records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceSpec {
    /// Residual stream entering each layer plus the final stream.
    pub residuals: bool,
    /// Per-layer attention and MLP contributions.
    pub contributions: bool,
    /// Per-head attention-output contributions.
    pub per_head: bool,
    /// Attention weights per layer and head.
    pub attention: bool,
    /// Pre/post vectors at every hook application.
    pub hooks: bool,
}

impl TraceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self { residuals: true, contributions: true, per_head: true, attention: true, hooks: true }
    }
}

/// One hook application at one token.
#[derive(Debug, Clone, PartialEq)]
pub struct HookRecord {
    pub site: HookSite,
    pub position: usize,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

/// Captured activations of one forward pass.
///
/// `residuals[l][t]` is the stream of token `t` entering layer `l`;
/// `residuals[n_layers]` is the final stream. `mlp_out` holds the MLP
/// contribution after any hook at its output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    pub n_tokens: usize,
    pub n_layers: usize,
    pub residuals: Option<Vec<Vec<Vec<f64>>>>,
    pub attn_out: Option<Vec<Vec<Vec<f64>>>>,
    pub mlp_out: Option<Vec<Vec<Vec<f64>>>>,
    /// `[layer][head][token]`
    pub head_out: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `[layer][head]`, each `n_tokens x n_tokens`, zero above the diagonal.
    pub attention: Option<Vec<Vec<Matrix>>>,
    pub hooks: Vec<HookRecord>,
    /// First `(layer, token)` whose residual went non-finite.
    pub divergence: Option<(usize, usize)>,
}

impl ForwardTrace {
    pub fn empty(n_tokens: usize, n_layers: usize) -> Self {
        Self { n_tokens, n_layers, ..Self::default() }
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn residual(&self, layer: usize, t: usize) -> Result<&[f64]> {
        self.residuals
            .as_ref()
            .ok_or(SpectroError::MissingCapture("residuals"))?
            .get(layer)
            .and_then(|r| r.get(t))
            .map(Vec::as_slice)
            .ok_or_else(|| SpectroError::InvalidArgument(format!("no residual at layer {layer}, token {t}")))
    }

    pub fn attention_layer(&self, layer: usize) -> Result<&[Matrix]> {
        self.attention
            .as_ref()
            .ok_or(SpectroError::MissingCapture("attention"))?
            .get(layer)
            .map(Vec::as_slice)
            .ok_or_else(|| SpectroError::InvalidArgument(format!("layer {layer} not traced")))
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `n_tokens x vocab_size`
    pub logits: Matrix,
    pub trace: ForwardTrace,
}

#[derive(Debug, Default)]
pub(crate) struct StepRecord {
    pub residuals: Vec<Vec<f64>>,
    pub attn: Vec<Vec<f64>>,
    pub mlp: Vec<Vec<f64>>,
    pub heads: Vec<Vec<Vec<f64>>>,
    pub attn_rows: Vec<Vec<Vec<f64>>>,
    pub hooks: Vec<HookRecord>,
    pub diverged_at: Option<usize>,
}

/// Per-sequence key/value cache; one token is processed per `step`.
#[derive(Debug, Clone)]
pub(crate) struct DecodeState<'a> {
    bundle: &'a ModelBundle,
    /// `[layer][position]`, rotated keys of width `kv_width`.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl<'a> DecodeState<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Self {
        let n = bundle.config.n_layers;
        Self { bundle, keys: vec![Vec::new(); n], values: vec![Vec::new(); n] }
    }

    pub fn position(&self) -> usize {
        self.keys[0].len()
    }

    /// Runs one token through every layer and returns its logits row.
    pub fn step(
        &mut self,
        id: usize,
        is_bos: bool,
        plan: Option<&HookPlan>,
        spec: &TraceSpec,
        rec: &mut StepRecord,
    ) -> Result<Vec<f64>> {
        let cfg = &self.bundle.config;
        if id >= cfg.vocab_size {
            return Err(SpectroError::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let t = self.position();
        if t >= cfg.max_seq_len {
            return Err(SpectroError::InvalidArgument(format!("position {t} exceeds max_seq_len {}", cfg.max_seq_len)));
        }
        let (dh, group) = (cfg.d_head, cfg.group_size());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut h = self.bundle.embed.row(id).to_vec();

        for (l, w) in self.bundle.layers.iter().enumerate() {
            if spec.residuals {
                rec.residuals.push(h.clone());
            }
            let x = rmsnorm(&h, cfg.rmsnorm_eps);
            let mut q = w.wq.vecmat(&x)?;
            let mut k = w.wk.vecmat(&x)?;
            let v = w.wv.vecmat(&x)?;
            for head in q.chunks_exact_mut(dh).chain(k.chunks_exact_mut(dh)) {
                rope_in_place(head, t, cfg.rope_base);
            }
            self.keys[l].push(k);
            self.values[l].push(v);

            let mut attn = vec![0.0; cfg.d_model];
            let mut heads = Vec::new();
            let mut rows = Vec::new();
            for hq in 0..cfg.n_heads {
                let kv = hq / group;
                let qh = &q[hq * dh..(hq + 1) * dh];
                let scores: Vec<f64> = self.keys[l]
                    .iter()
                    .map(|key| scale * crate::linalg::dot(qh, &key[kv * dh..(kv + 1) * dh]))
                    .collect();
                let p = super::ops::softmax(&scores);
                let mut z = vec![0.0; dh];
                for (pj, val) in p.iter().zip(&self.values[l]) {
                    crate::linalg::axpy(*pj, &val[kv * dh..(kv + 1) * dh], &mut z);
                }
                let mut contrib = vec![0.0; cfg.d_model];
                for (i, zi) in z.iter().enumerate() {
                    crate::linalg::axpy(*zi, w.wo.row(hq * dh + i), &mut contrib);
                }
                crate::linalg::axpy(1.0, &contrib, &mut attn);
                if spec.per_head {
                    heads.push(contrib);
                }
                if spec.attention {
                    rows.push(p);
                }
            }
            for (hi, a) in h.iter_mut().zip(&attn) {
                *hi += a;
            }

            let mut m = swiglu(&rmsnorm(&h, cfg.rmsnorm_eps), &w.w1, &w.w2, &w.w3)?;
            if let Some(plan) = plan {
                plan.patch(Placement::MlpOutput(l), t, is_bos, &mut m, spec.hooks.then_some(&mut rec.hooks));
            }
            for (hi, mi) in h.iter_mut().zip(&m) {
                *hi += mi;
            }
            if let Some(plan) = plan {
                plan.patch(Placement::ResidualAfterLayer(l), t, is_bos, &mut h, spec.hooks.then_some(&mut rec.hooks));
            }
            if rec.diverged_at.is_none() && !h.iter().all(|x| x.is_finite()) {
                rec.diverged_at = Some(l);
            }
            if spec.contributions {
                rec.attn.push(attn);
                rec.mlp.push(m);
            }
            if spec.per_head {
                rec.heads.push(heads);
            }
            if spec.attention {
                rec.attn_rows.push(rows);
            }
        }
        if spec.residuals {
            rec.residuals.push(h.clone());
        }
        self.bundle.unembed.matvec(&rmsnorm(&h, cfg.rmsnorm_eps))
    }
}

/// Full causal forward pass with optional hooks and capture.
///
/// Non-finite activations do not abort the pass: the first offending
/// `(layer, token)` is stored in [`ForwardTrace::divergence`].
pub fn forward(
    bundle: &ModelBundle,
    tokens: &TokenSequence,
    plan: Option<&HookPlan>,
    spec: Option<&TraceSpec>,
) -> Result<ForwardOutput> {
    let cfg = &bundle.config;
    tokens.validate(cfg)?;
    if let Some(plan) = plan {
        plan.validate(cfg)?;
    }
    let spec = spec.copied().unwrap_or_default();
    let (n, nl) = (tokens.len(), cfg.n_layers);

    let mut state = DecodeState::new(bundle);
    let mut logits = Vec::with_capacity(n * cfg.vocab_size);
    let mut trace = ForwardTrace::empty(n, nl);
    let mut residuals = vec![Vec::with_capacity(n); nl + 1];
    let mut attn_out = vec![Vec::with_capacity(n); nl];
    let mut mlp_out = vec![Vec::with_capacity(n); nl];
    let mut head_out = vec![vec![Vec::with_capacity(n); cfg.n_heads]; nl];
    let mut attention = vec![vec![vec![0.0; n * n]; cfg.n_heads]; nl];

    for (t, &id) in tokens.ids.iter().enumerate() {
        let mut rec = StepRecord::default();
        logits.extend(state.step(id, tokens.is_bos(t), plan, &spec, &mut rec)?);
        if let (Some(l), None) = (rec.diverged_at, trace.divergence) {
            trace.divergence = Some((l, t));
        }
        for (l, r) in rec.residuals.into_iter().enumerate() {
            residuals[l].push(r);
        }
        for (l, (a, m)) in rec.attn.into_iter().zip(rec.mlp).enumerate() {
            attn_out[l].push(a);
            mlp_out[l].push(m);
        }
        for (l, heads) in rec.heads.into_iter().enumerate() {
            for (h, v) in heads.into_iter().enumerate() {
                head_out[l][h].push(v);
            }
        }
        for (l, rows) in rec.attn_rows.into_iter().enumerate() {
            for (h, row) in rows.into_iter().enumerate() {
                attention[l][h][t * n..t * n + row.len()].copy_from_slice(&row);
            }
        }
        trace.hooks.extend(rec.hooks);
    }

    if spec.residuals {
        trace.residuals = Some(residuals);
    }
    if spec.contributions {
        trace.attn_out = Some(attn_out);
        trace.mlp_out = Some(mlp_out);
    }
    if spec.per_head {
        trace.head_out = Some(head_out);
    }
    if spec.attention {
        trace.attention = Some(
            attention.into_iter().map(|heads| heads.into_iter().map(|a| Matrix::from_raw(n, n, a)).collect()).collect(),
        );
    }
    Ok(ForwardOutput { logits: Matrix::from_raw(n, cfg.vocab_size, logits), trace })
}

/// Summed next-token NLL over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct NllSummary {
    pub total: f64,
    pub token_count: usize,
    /// Some target received a non-finite log-probability.
    pub diverged: bool,
}

impl NllSummary {
    /// Mean NLL, or `None` when diverged.
    pub fn mean(&self) -> Option<f64> {
        (!self.diverged && self.token_count > 0).then(|| self.total / self.token_count as f64)
    }

    pub fn merge(&mut self, other: &NllSummary) {
        self.total += other.total;
        self.token_count += other.token_count;
        self.diverged |= other.diverged;
    }

    pub fn empty() -> Self {
        Self { total: 0.0, token_count: 0, diverged: false }
    }
}

/// Next-token NLL where position `t` predicts `tokens[t + 1]`.
pub fn mean_nll(logits: &Matrix, tokens: &TokenSequence) -> Result<NllSummary> {
    let n = tokens.len();
    if n < 2 {
        return Err(SpectroError::InvalidArgument("need at least two tokens to score a prediction".into()));
    }
    if logits.rows() < n - 1 {
        return Err(SpectroError::Shape(format!("{} logit rows for {} tokens", logits.rows(), n)));
    }
    let mut total = 0.0;
    for t in 0..n - 1 {
        let target = tokens.ids[t + 1];
        if target >= logits.cols() {
            return Err(SpectroError::InvalidArgument(format!("target id {target} outside {} logits", logits.cols())));
        }
        total -= log_softmax(logits.row(t))[target];
    }
    Ok(NllSummary { total, token_count: n - 1, diverged: !total.is_finite() })
}
