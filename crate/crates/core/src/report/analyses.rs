// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::Path;

use crate::error::{Result, SpectroError};
use crate::instrument::{capture_bos_profile, run_with_swap, swap_pairs, BosLayerRecord, HookSite};
use crate::linalg::{max_abs_diff, Matrix};
use crate::metrics::{hmlv_rows, HmlvParams, HmlvRow};
use crate::model::{forward, ModelBundle, TokenSequence, TraceSpec};
use crate::spectra::{param_projection_profile, BasisLabel, Direction, LinearFilter, Spectra};

fn flush<W: Write>(mut w: csv::Writer<W>, what: &str) -> Result<()> {
    w.flush().map_err(|e| SpectroError::io(what, e))
}

pub const BOS_HEADER: [&str; 6] = ["layer", "rs_norm", "dark_norm", "light_norm", "mlp_norm", "attn_norm"];

/// Per-layer composition of the BoS residual stream of one prompt.
pub fn trace_bos(bundle: &ModelBundle, spectra: &Spectra, tokens: &TokenSequence) -> Result<Vec<BosLayerRecord>> {
    if !tokens.bos_prepended {
        return Err(SpectroError::InvalidArgument("trace-bos needs a prompt that starts with BoS".into()));
    }
    let spec = TraceSpec { residuals: true, contributions: true, ..TraceSpec::none() };
    let out = forward(bundle, tokens, None, Some(&spec))?;
    capture_bos_profile(&out.trace, &spectra.u_dark())
}

pub fn write_bos_profile<W: Write>(records: &[BosLayerRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BOS_HEADER)?;
    for r in records {
        w.write_record([
            r.layer.to_string(),
            r.rs_norm.to_string(),
            r.dark_norm.to_string(),
            r.light_norm.to_string(),
            r.mlp_norm.to_string(),
            r.attn_norm.to_string(),
        ])?;
    }
    flush(w, "<bos csv>")
}

/// Projection norm of one parameter matrix on one right singular vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub tensor: String,
    pub basis: BasisLabel,
    /// 0-based spectral index.
    pub index: usize,
    /// 1-based band of `index`.
    pub band: usize,
    pub norm: f64,
}

fn select(bundle: &ModelBundle, selector: &str) -> Result<Vec<(String, Matrix, Direction)>> {
    let bad = |reason: &str| SpectroError::parse("selector", selector, reason);
    let parts: Vec<&str> = selector.split('.').collect();
    if !(parts.len() == 3 || parts.len() == 4) || parts[0] != "layer" {
        return Err(bad("expected `layer.<N|*>.<w>[.h<K>]`"));
    }
    let layers: Vec<usize> = if parts[1] == "*" {
        (0..bundle.config.n_layers).collect()
    } else {
        let l: usize = parts[1].parse().map_err(|_| bad("layer must be an integer or `*`"))?;
        if l >= bundle.config.n_layers {
            return Err(bad("layer out of range"));
        }
        vec![l]
    };
    let field = parts[2];
    let direction = match field {
        "wq" | "wk" | "wv" | "w1" | "w3" => Direction::Read,
        "wo" | "w2" => Direction::Write,
        _ => return Err(bad("unknown weight; use wq, wk, wv, wo, w1, w2, or w3")),
    };
    let head = match parts.get(3) {
        None => None,
        Some(h) => {
            let k: usize =
                h.strip_prefix('h').and_then(|k| k.parse().ok()).ok_or_else(|| bad("head must look like `h3`"))?;
            let limit = match field {
                "wq" | "wo" => bundle.config.n_heads,
                "wk" | "wv" => bundle.config.n_kv_heads,
                _ => return Err(bad("MLP weights have no heads")),
            };
            if k >= limit {
                return Err(bad("head out of range"));
            }
            Some(k)
        }
    };
    let dh = bundle.config.d_head;
    layers
        .into_iter()
        .map(|l| {
            let name = format!("layer.{l}.{field}");
            let m = bundle.tensor(&name).ok_or_else(|| bad("unknown tensor"))?;
            Ok(match head {
                None => (name, m.clone(), direction),
                Some(h) => {
                    let block =
                        if field == "wo" { m.row_block(h * dh..(h + 1) * dh) } else { m.columns(h * dh..(h + 1) * dh) };
                    (format!("{name}.h{h}"), block, direction)
                }
            })
        })
        .collect()
}

/// Projection profiles of the selected weights on one basis.
///
/// Selector: `layer.<N>.<w>`, `layer.*.<w>`, or `layer.<N>.<w>.h<K>` for a
/// single attention head. Readers (`wq wk wv w1 w3`) are projected along
/// their rows, writers (`wo w2`) along their columns.
pub fn profile_params(
    bundle: &ModelBundle,
    spectra: &Spectra,
    selector: &str,
    basis: BasisLabel,
) -> Result<Vec<ProfileRow>> {
    let b = spectra.basis(basis);
    let band_of: Vec<usize> =
        spectra.partition.ranges().iter().enumerate().flat_map(|(i, r)| r.clone().map(move |_| i + 1)).collect();
    let mut rows = Vec::new();
    for (name, m, dir) in select(bundle, selector)? {
        for (index, norm) in param_projection_profile(b, &m, dir)?.into_iter().enumerate() {
            rows.push(ProfileRow { tensor: name.clone(), basis, index, band: band_of[index], norm });
        }
    }
    Ok(rows)
}

/// Share of squared profile mass that falls in `band`.
pub fn band_mass_fraction(rows: &[ProfileRow], band: usize) -> f64 {
    let total: f64 = rows.iter().map(|r| r.norm * r.norm).sum();
    if total == 0.0 {
        return 0.0;
    }
    rows.iter().filter(|r| r.band == band).map(|r| r.norm * r.norm).sum::<f64>() / total
}

pub fn write_profile<W: Write>(rows: &[ProfileRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tensor", "basis", "index", "band", "norm"])?;
    for r in rows {
        w.write_record([
            r.tensor.clone(),
            r.basis.short().to_owned(),
            r.index.to_string(),
            r.band.to_string(),
            r.norm.to_string(),
        ])?;
    }
    flush(w, "<profile csv>")
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| SpectroError::io(path, e))
}

/// Writes `singular_values.csv`, `rsv_u.csv`, and `rsv_e.csv` into `dir`.
///
/// RSV files hold one right singular vector per row:
/// `index,band,sigma,c0..c{d-1}`.
pub fn write_basis(spectra: &Spectra, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| SpectroError::io(dir, e))?;
    let band_of = |i: usize| spectra.partition.ranges().iter().position(|r| r.contains(&i)).map_or(0, |b| b + 1);

    let mut sv = csv::Writer::from_writer(create(&dir.join("singular_values.csv"))?);
    sv.write_record(["basis", "index", "band", "sigma"])?;
    for label in [BasisLabel::Unembedding, BasisLabel::Embedding] {
        for (i, s) in spectra.basis(label).sigma().iter().enumerate() {
            sv.write_record([label.short().to_owned(), i.to_string(), band_of(i).to_string(), s.to_string()])?;
        }
    }
    flush(sv, "singular_values.csv")?;

    for label in [BasisLabel::Unembedding, BasisLabel::Embedding] {
        let name = format!("rsv_{}.csv", label.short());
        let b = spectra.basis(label);
        let d = b.d();
        let mut w = csv::Writer::from_writer(create(&dir.join(&name))?);
        let mut header = vec!["index".to_owned(), "band".to_owned(), "sigma".to_owned()];
        header.extend((0..d).map(|c| format!("c{c}")));
        w.write_record(&header)?;
        for j in 0..d {
            let mut rec = vec![j.to_string(), band_of(j).to_string(), b.sigma()[j].to_string()];
            rec.extend(b.rsv().column(j).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        flush(w, &name)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HmlvSummary {
    pub sequences: usize,
    /// Eligible (layer, token) pairs after the exclusions.
    pub pairs_considered: usize,
    pub flagged: usize,
}

/// HMLV rows over every prompt, annotated with udr and cosine with BoS.
pub fn hmlv_report(
    bundle: &ModelBundle,
    spectra: &Spectra,
    prompts: &[TokenSequence],
    params: &HmlvParams,
) -> Result<(Vec<HmlvRow>, HmlvSummary)> {
    let spec = TraceSpec { residuals: true, attention: true, ..TraceSpec::none() };
    let dark = spectra.u_dark();
    let mut rows = Vec::new();
    let mut summary = HmlvSummary::default();
    let nl = bundle.config.n_layers;
    for (seq_id, p) in prompts.iter().enumerate() {
        let out = forward(bundle, p, None, Some(&spec))?;
        let found = hmlv_rows(seq_id, &out.trace, &dark, params)?;
        let n = p.len();
        if n >= params.skip_last + 2 {
            let tokens = n - params.skip_last - usize::from(params.skip_bos);
            summary.pairs_considered += nl.saturating_sub(params.skip_layers) * tokens;
        }
        summary.sequences += 1;
        summary.flagged += found.len();
        rows.extend(found);
    }
    Ok((rows, summary))
}

/// One paired swap run.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapRow {
    pub a: usize,
    pub b: usize,
    pub nll_a: Option<f64>,
    pub nll_b: Option<f64>,
    /// Largest BoS residual change against the unpatched runs.
    pub bos_max_abs_diff: f64,
    /// Largest non-BoS residual change against the unpatched runs.
    pub perturbation: f64,
}

/// Shavings swap over the deterministic pairing of `prompts`.
pub fn swap_report(
    bundle: &ModelBundle,
    prompts: &[TokenSequence],
    site: HookSite,
    filter: &LinearFilter,
) -> Result<Vec<SwapRow>> {
    let spec = TraceSpec { residuals: true, ..TraceSpec::none() };
    let clean: Vec<_> =
        prompts.iter().map(|p| forward(bundle, p, None, Some(&spec)).map(|o| o.trace)).collect::<Result<_>>()?;
    let diffs = |patched: &crate::model::ForwardTrace, base: &crate::model::ForwardTrace| -> Result<(f64, f64)> {
        let (mut bos, mut rest) = (0.0f64, 0.0f64);
        for l in 0..=patched.n_layers {
            for t in 0..patched.n_tokens {
                let d = max_abs_diff(patched.residual(l, t)?, base.residual(l, t)?);
                if t == 0 {
                    bos = bos.max(d);
                } else {
                    rest = rest.max(d);
                }
            }
        }
        Ok((bos, rest))
    };
    swap_pairs(prompts.len())
        .into_iter()
        .map(|(a, b)| {
            let out = run_with_swap(bundle, &prompts[a], &prompts[b], site, filter, Some(&spec))?;
            let (bos_a, rest_a) = diffs(&out.trace_a, &clean[a])?;
            let (bos_b, rest_b) = diffs(&out.trace_b, &clean[b])?;
            Ok(SwapRow {
                a,
                b,
                nll_a: out.nll_a.mean(),
                nll_b: out.nll_b.mean(),
                bos_max_abs_diff: bos_a.max(bos_b),
                perturbation: rest_a.max(rest_b),
            })
        })
        .collect()
}

pub fn write_swap_report<W: Write>(rows: &[SwapRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["a", "b", "nll_a", "nll_b", "bos_max_abs_diff", "perturbation"])?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in rows {
        w.write_record([
            r.a.to_string(),
            r.b.to_string(),
            cell(r.nll_a),
            cell(r.nll_b),
            r.bos_max_abs_diff.to_string(),
            r.perturbation.to_string(),
        ])?;
    }
    flush(w, "<swap csv>")
}
