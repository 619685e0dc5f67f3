// SPDX-License-Identifier: MIT OR Apache-2.0

//! Derived quantities over traces: U-dark ratio, head-averaged attention,
//! received-attention statistics, HMLV detection, and cosine with BoS.

use std::io::Write;

use crate::error::{Result, SpectroError};
use crate::linalg::{dot, norm, Matrix};
use crate::model::ForwardTrace;
use crate::spectra::LinearFilter;

const RATIO_FLOOR: f64 = 1e-12;

/// `||dark|| / ||light||` of a residual vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UdarkRatio {
    Finite(f64),
    /// The light component vanished and the dark one did not.
    Infinite,
    /// Zero vector.
    Undefined,
}

impl UdarkRatio {
    pub fn value(self) -> Option<f64> {
        match self {
            Self::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// CSV cell: a number, `inf`, or empty.
    pub fn to_cell(self) -> String {
        match self {
            Self::Finite(v) => v.to_string(),
            Self::Infinite => "inf".into(),
            Self::Undefined => String::new(),
        }
    }
}

pub fn udark_ratio(h: &[f64], dark_filter: &LinearFilter) -> Result<UdarkRatio> {
    let dark = dark_filter.apply(h)?;
    let light: Vec<f64> = h.iter().zip(&dark).map(|(a, b)| a - b).collect();
    let (nd, nl) = (norm(&dark), norm(&light));
    Ok(if nl < RATIO_FLOOR {
        if nd < RATIO_FLOOR {
            UdarkRatio::Undefined
        } else {
            UdarkRatio::Infinite
        }
    } else {
        UdarkRatio::Finite(nd / nl)
    })
}

/// Elementwise mean over the heads of one layer.
pub fn mean_attention_matrix(trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    let heads = trace.attention_layer(layer)?;
    let first = heads.first().ok_or_else(|| SpectroError::InvalidArgument("layer has no heads".into()))?;
    let mut acc = first.clone();
    for h in &heads[1..] {
        acc = acc.add(h)?;
    }
    Ok(acc.scale(1.0 / heads.len() as f64))
}

/// Population mean and variance of column `t` over rows `t+1..n`, or `None`
/// when no token follows `t`.
pub fn received_attention_stats(mean_attention: &Matrix, t: usize) -> Option<(f64, f64)> {
    let n = mean_attention.rows();
    if t + 1 >= n || t >= mean_attention.cols() {
        return None;
    }
    let col: Vec<f64> = (t + 1..n).map(|r| mean_attention.get(r, t)).collect();
    let k = col.len() as f64;
    let mean = col.iter().sum::<f64>() / k;
    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
    Some((mean, var))
}

/// Received-attention statistics of every (layer, token) of one sequence,
/// from the head-averaged attention matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub n_layers: usize,
    pub n_tokens: usize,
    /// `[layer][token]`, `None` for the last token.
    pub entries: Vec<Vec<Option<(f64, f64)>>>,
}

impl AttentionStats {
    pub fn from_trace(trace: &ForwardTrace) -> Result<Self> {
        let entries = (0..trace.n_layers)
            .map(|l| {
                let m = mean_attention_matrix(trace, l)?;
                Ok((0..trace.n_tokens).map(|t| received_attention_stats(&m, t)).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_layers: trace.n_layers, n_tokens: trace.n_tokens, entries })
    }

    pub fn get(&self, layer: usize, t: usize) -> Option<(f64, f64)> {
        self.entries.get(layer)?.get(t).copied().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmlvParams {
    pub tau_mu: f64,
    pub tau_sigma: f64,
    /// Layers below this index are ignored.
    pub skip_layers: usize,
    /// The last this many tokens are ignored.
    pub skip_last: usize,
    pub skip_bos: bool,
}

impl Default for HmlvParams {
    fn default() -> Self {
        Self { tau_mu: 0.018, tau_sigma: 0.01, skip_layers: 4, skip_last: 4, skip_bos: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmlvRecord {
    pub token: usize,
    pub layer: usize,
    pub mean_attn: f64,
    pub var_attn: f64,
}

/// Token-layer pairs with mean received attention above `tau_mu` and
/// variance below `tau_sigma`, sorted by `(layer, token)`.
pub fn detect_hmlv(stats: &AttentionStats, params: &HmlvParams) -> Vec<HmlvRecord> {
    let n = stats.n_tokens;
    if n < params.skip_last + 2 {
        log::warn!("sequence of {n} tokens is too short for HMLV detection (need {})", params.skip_last + 2);
        return Vec::new();
    }
    let first = usize::from(params.skip_bos);
    let mut out = Vec::new();
    for layer in params.skip_layers..stats.n_layers {
        for token in first..n - params.skip_last {
            if let Some((mean_attn, var_attn)) = stats.get(layer, token) {
                if mean_attn > params.tau_mu && var_attn < params.tau_sigma {
                    out.push(HmlvRecord { token, layer, mean_attn, var_attn });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// False when either vector is zero; `value` is then 0.
    pub defined: bool,
}

/// Cosine between the residual of `token` and that of token 0, both
/// entering `layer`.
pub fn cosine_with_bos(trace: &ForwardTrace, layer: usize, token: usize) -> Result<Cosine> {
    let h = trace.residual(layer, token)?;
    let b = trace.residual(layer, 0)?;
    Ok(cosine(h, b))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Cosine {
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Cosine { value: 0.0, defined: false };
    }
    Cosine { value: (dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0), defined: true }
}

/// One HMLV CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct HmlvRow {
    pub seq_id: usize,
    pub record: HmlvRecord,
    pub udr: UdarkRatio,
    pub cos_bos: Cosine,
}

/// Detects HMLV pairs of one traced sequence and annotates each with the
/// U-dark ratio and cosine with BoS of its residual entering that layer.
pub fn hmlv_rows(
    seq_id: usize,
    trace: &ForwardTrace,
    dark_filter: &LinearFilter,
    params: &HmlvParams,
) -> Result<Vec<HmlvRow>> {
    let stats = AttentionStats::from_trace(trace)?;
    detect_hmlv(&stats, params)
        .into_iter()
        .map(|record| {
            let h = trace.residual(record.layer, record.token)?;
            Ok(HmlvRow {
                seq_id,
                record,
                udr: udark_ratio(h, dark_filter)?,
                cos_bos: cosine_with_bos(trace, record.layer, record.token)?,
            })
        })
        .collect()
}

pub const HMLV_HEADER: [&str; 7] = ["seq_id", "layer", "token", "mean_attn", "var_attn", "udr", "cos_bos"];

pub fn write_hmlv_csv<W: Write>(rows: &[HmlvRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HMLV_HEADER)?;
    for r in rows {
        w.write_record([
            r.seq_id.to_string(),
            r.record.layer.to_string(),
            r.record.token.to_string(),
            r.record.mean_attn.to_string(),
            r.record.var_attn.to_string(),
            r.udr.to_cell(),
            if r.cos_bos.defined { r.cos_bos.value.to_string() } else { String::new() },
        ])?;
    }
    w.flush().map_err(|e| SpectroError::io("<hmlv csv>", e))?;
    Ok(())
}
