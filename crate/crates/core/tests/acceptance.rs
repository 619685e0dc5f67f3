// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::time::{Duration, Instant};

use common::{max_logit_diff, no_patch, overflow_bundle, prompts, reference_forward};
use spectro::instrument::{run_with_suppression, HookSite, PatchMode, Scope};
use spectro::linalg::{self, max_abs_diff, svd, Matrix};
use spectro::metrics::{detect_hmlv, udark_ratio, AttentionStats, HmlvParams, HmlvRecord};
use spectro::model::{
    forward, mean_nll, synth_model, Decoder, ForwardTrace, ModelConfig, PlantedDarkWriter, TraceSpec,
};
use spectro::report::{self, band_mass_fraction, render_heatmap, write_reports, HeatmapAxes, SiteKind, SweepSpec};
use spectro::spectra::{
    compute_spectral_basis, make_filter, BandPartition, BasisLabel, FilterFamily, FilterSpec, LinearFilter, Spectra,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Option<u64>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn filter_algebra() -> Check {
    let mut worst = 0.0f64;
    let mut count = 0usize;
    for d in [32, 64, 128] {
        for n in [4, 20] {
            let bu = compute_spectral_basis(
                &Matrix::random_gaussian(2 * d, d, 1.0, d as u64 + n as u64),
                BasisLabel::Unembedding,
            )
            .map_err(e2s)?;
            let be = compute_spectral_basis(
                &Matrix::random_gaussian(2 * d, d, 1.0, 7 * d as u64 + n as u64),
                BasisLabel::Embedding,
            )
            .map_err(e2s)?;
            let part = BandPartition::new(d, n).map_err(e2s)?;
            let eye = Matrix::identity(d);
            let mut specs = vec![FilterSpec::identity(n)];
            for j in 1..=n {
                for k in j..=n {
                    specs.push(FilterSpec::phi_u(j, k, n));
                }
            }
            for k in 1..n {
                specs.push(FilterSpec::omega_u(k, n));
            }
            for k in 1..=n {
                specs.push(FilterSpec::random(k, 11, n));
            }
            for spec in &specs {
                let f = make_filter(spec, &bu, None).map_err(e2s)?.materialize();
                let idem = f.matmul(&f).map_err(e2s)?.max_abs_diff(&f);
                let sym = f.max_abs_diff(&f.transpose());
                let tr: f64 = (0..d).map(|i| f.get(i, i)).sum();
                let rank = (tr - spec.kept_dims(&part) as f64).abs();
                worst = worst.max(idem).max(sym);
                ensure(idem <= 1e-8 && sym <= 1e-8, || format!("{spec} at d={d}: idem {idem:e} sym {sym:e}"))?;
                ensure(rank <= 1e-8, || format!("{spec} at d={d}: trace {tr}"))?;
                count += 1;
            }
            for k in 1..n {
                let a = make_filter(&FilterSpec::phi_u(1, k, n), &bu, None).map_err(e2s)?.materialize();
                let b = make_filter(&FilterSpec::phi_u(k + 1, n, n), &bu, None).map_err(e2s)?.materialize();
                let c = a.add(&b).map_err(e2s)?.max_abs_diff(&eye);
                worst = worst.max(c);
                ensure(c <= 1e-8, || format!("complement k={k} d={d}: {c:e}"))?;
            }
            let psi = make_filter(&FilterSpec::psi(n, n), &bu, Some(&be)).map_err(e2s)?;
            ensure(psi.materialize() == eye, || format!("psi:{n} is not the identity at d={d}"))?;

            // planted: U and E share their darkest right singular vector
            let q = linalg::random_orthonormal(d, d, 3 + d as u64).map_err(e2s)?;
            let r = linalg::random_orthonormal(d - 1, d - 1, 4 + d as u64).map_err(e2s)?;
            let head = q.columns(0..d - 1).matmul(&r).map_err(e2s)?;
            let mut cols: Vec<Vec<f64>> = (0..d - 1).map(|j| head.column(j)).collect();
            cols.push(q.column(d - 1));
            let qe = Matrix::from_columns(&cols).map_err(e2s)?;
            let build = |basis: &Matrix, seed: u64, label| -> Result<_, String> {
                let left = linalg::random_orthonormal(2 * d, d, seed).map_err(e2s)?;
                let s: Vec<f64> = (0..d).map(|i| 4.0 - 3.0 * i as f64 / d as f64).collect();
                let w = left.scale_columns(&s).map_err(e2s)?.matmul(&basis.transpose()).map_err(e2s)?;
                compute_spectral_basis(&w, label).map_err(e2s)
            };
            let pu = build(&q, 5, BasisLabel::Unembedding)?;
            let pe = build(&qe, 6, BasisLabel::Embedding)?;
            let psi = make_filter(&FilterSpec::psi(n - 1, n), &pu, Some(&pe)).map_err(e2s)?;
            let left = linalg::norm(&psi.apply(&q.column(d - 1)).map_err(e2s)?);
            ensure(left <= 1e-8, || format!("psi:{} leaves {left:e} of the shared dark vector at d={d}", n - 1))?;
        }
    }
    Ok(format!("{count} filters, worst deviation {worst:.1e}"))
}

fn svd_suite() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let m = 1 + (seed as usize * 37) % 64;
        let n = 1 + (seed as usize * 101) % 256;
        let (r, c) = if seed % 2 == 0 { (m, n) } else { (n, m) };
        let a = Matrix::random_gaussian(r, c, 1.0, seed);
        let s = svd(&a).map_err(e2s)?;
        let rec = s.reconstruct();
        let diff = Matrix::from_fn(r, c, |i, j| a.get(i, j) - rec.get(i, j));
        let rel = diff.frobenius_norm() / a.frobenius_norm();
        worst = worst.max(rel);
        ensure(rel <= 1e-8, || format!("seed {seed} ({r}x{c}): relative error {rel:e}"))?;
        let again = svd(&a).map_err(e2s)?;
        ensure(again.v == s.v && again.sigma == s.sigma, || format!("seed {seed}: signs not deterministic"))?;
        for j in 0..s.v.cols() {
            let col = s.v.column(j);
            let top = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            ensure(top > 0.0, || format!("seed {seed}: column {j} sign convention"))?;
        }
    }
    Ok(format!("200 matrices, worst relative error {worst:.1e}"))
}

fn forward_oracle() -> Check {
    let mut worst_ref = 0.0f64;
    let mut worst_kv = 0.0f64;
    let configs = [(1, 16, 2, 2), (2, 32, 4, 4), (3, 32, 4, 2), (4, 32, 4, 1), (4, 24, 6, 3)];
    for (seed, &(layers, d, heads, kv)) in configs.iter().enumerate() {
        let mut cfg = ModelConfig::tiny(layers, d, heads, 48);
        cfg.n_kv_heads = kv;
        let b = synth_model(&cfg, seed as u64).map_err(e2s)?;
        for toks in prompts(3, 9, 48, seed as u64) {
            let out = forward(&b, &toks, None, None).map_err(e2s)?;
            let r = reference_forward(&b, &toks.ids, &no_patch);
            let diff = max_logit_diff(&out.logits, &r.logits);
            worst_ref = worst_ref.max(diff);
            let limit = if kv == heads { 1e-6 } else { 1e-5 };
            ensure(diff <= limit, || format!("config {layers}/{d}/{heads}/{kv}: reference diff {diff:e}"))?;
            let mut dec = Decoder::new(&b, None, true).map_err(e2s)?;
            for (t, &id) in toks.ids.iter().enumerate() {
                let (row, _) = dec.step(id).map_err(e2s)?;
                worst_kv = worst_kv.max(max_abs_diff(&row, out.logits.row(t)));
            }
            ensure(worst_kv <= 1e-5, || format!("config {layers}/{d}/{heads}/{kv}: kv-cache diff {worst_kv:e}"))?;
        }
    }
    Ok(format!("reference {worst_ref:.1e}, kv-cache {worst_kv:.1e}"))
}

fn identity_patch() -> Check {
    let b = synth_model(&ModelConfig::tiny(3, 40, 4, 64), 21).map_err(e2s)?;
    let s = Spectra::new(&b.embed, &b.unembed, 20).map_err(e2s)?;
    let full = s.parse_filter("phi_u:1..20").map_err(e2s)?;
    let id = LinearFilter::identity(40, 20);
    let mut worst = 0.0f64;
    let mut runs = 0;
    for toks in prompts(4, 12, 64, 21) {
        let base = mean_nll(&forward(&b, &toks, None, None).map_err(e2s)?.logits, &toks).map_err(e2s)?;
        for l in 0..3 {
            for site in [HookSite::mlp(l), HookSite::residual(l)] {
                for scope in [Scope::AllTokens, Scope::BosOnly, Scope::AllExceptBos] {
                    let site = site.with_scope(scope);
                    let (nll, _) = run_with_suppression(&b, &toks, site, &id, None).map_err(e2s)?;
                    ensure(nll == base, || format!("identity at {site} changed NLL"))?;
                    let (nll, _) = run_with_suppression(&b, &toks, site, &full, None).map_err(e2s)?;
                    let d = (nll.mean().unwrap_or(f64::NAN) - base.mean().unwrap_or(f64::NAN)).abs();
                    worst = worst.max(d);
                    ensure(d <= 1e-6, || format!("phi_u:1..20 at {site}: {d:e}"))?;
                    runs += 2;
                }
            }
        }
    }
    Ok(format!("{runs} runs, full projector within {worst:.1e}"))
}

fn bos_invariance() -> Check {
    let b = synth_model(&ModelConfig::tiny(4, 32, 4, 64), 31).map_err(e2s)?;
    let s = Spectra::new(&b.embed, &b.unembed, 8).map_err(e2s)?;
    let ps = prompts(20, 10, 64, 31);
    let spec = TraceSpec { residuals: true, ..TraceSpec::none() };
    let traces: Vec<ForwardTrace> =
        ps.iter().map(|p| forward(&b, p, None, Some(&spec)).map(|o| o.trace)).collect::<Result<_, _>>().map_err(e2s)?;
    for (i, t) in traces.iter().enumerate().skip(1) {
        for l in 0..=4 {
            let d = max_abs_diff(t.residual(l, 0).map_err(e2s)?, traces[0].residual(l, 0).map_err(e2s)?);
            ensure(d == 0.0, || format!("prompt {i} layer {l}: BoS differs by {d:e}"))?;
        }
    }
    let f = s.parse_filter("phi_u:1..5").map_err(e2s)?;
    let mut min_moved = f64::INFINITY;
    for site in [HookSite::residual(1), HookSite::mlp(2)] {
        let rows = report::swap_report(&b, &ps, site, &f).map_err(e2s)?;
        for r in &rows {
            ensure(r.bos_max_abs_diff == 0.0, || format!("swap {}/{} at {site} moved BoS", r.a, r.b))?;
            min_moved = min_moved.min(r.perturbation);
        }
    }
    ensure(min_moved > 0.0, || "a swap left every non-BoS residual unchanged".into())?;
    Ok(format!("20 prompts, 20 swaps, smallest perturbation {min_moved:.2e}"))
}

fn planted_dark_writer() -> Check {
    let planted = PlantedDarkWriter::build(0).map_err(e2s)?;
    let n = planted.n_bands;
    let b = &planted.bundle;
    let s = Spectra::new(&b.embed, &b.unembed, n).map_err(e2s)?;
    let sel = format!("layer.{}.w2", planted.writer_layer);
    let rows = report::profile_params(b, &s, &sel, BasisLabel::Unembedding).map_err(e2s)?;
    let mass = band_mass_fraction(&rows, n);
    ensure(mass >= 0.95, || format!("{sel}: {mass:.4} of mass in band {n}"))?;
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
    let out = report::sweep(b, &s, &planted.prompts(32, 12, 5), &spec).map_err(e2s)?;
    let nll = |k: usize| out.rows.iter().find(|r| r.k == Some(k) && !r.is_baseline()).and_then(|r| r.nll_mean);
    let (full, cut) = (nll(n).ok_or("missing k = n")?, nll(n - 1).ok_or("missing k = n-1")?);
    ensure(full < cut, || format!("NLL(k={n}) = {full:.3} is not below NLL(k={}) = {cut:.3}", n - 1))?;
    Ok(format!("band-{n} mass {mass:.4}; NLL {cut:.3} -> {full:.3} when band {n} is kept"))
}

fn hand_fixture() -> (ForwardTrace, Vec<(usize, usize, f64)>) {
    // 10 tokens, 6 layers, two heads whose mean gives token 2 a constant
    // 0.3 share and token 1 an alternating one
    let n = 10;
    let head = |c2: f64, c1_hi: f64| {
        Matrix::from_fn(n, n, |s, t| {
            let c1 = if s % 2 == 0 { c1_hi } else { 0.0 };
            let c7 = if s >= 7 { 0.25 } else { 0.0 };
            match t {
                _ if t > s => 0.0,
                0 if s == 0 => 1.0,
                0 if s == 1 => 1.0 - c1,
                0 => 1.0 - c1 - if s >= 2 { c2 } else { 0.0 } - c7,
                1 => c1,
                2 if s >= 2 => c2,
                7 => c7,
                _ => 0.0,
            }
        })
    };
    let layer = vec![head(0.5, 0.4), head(0.1, 0.4)];
    let trace = ForwardTrace { attention: Some(vec![layer; 6]), ..ForwardTrace::empty(n, 6) };
    (trace, vec![(2, 4, 0.3), (2, 5, 0.3)])
}

fn metrics_suite() -> Check {
    let b = Matrix::random_gaussian(80, 40, 1.0, 41);
    let s = Spectra::new(&b, &b, 20).map_err(e2s)?;
    let dark = s.u_dark();
    for i in 0..100u64 {
        let h = Matrix::random_gaussian(1, 40, 1.0, 1000 + i).row(0).to_vec();
        let c = [-7.5, 1e-3, 2.0, 1e4][i as usize % 4];
        let scaled: Vec<f64> = h.iter().map(|x| c * x).collect();
        let (x, y) = (udark_ratio(&h, &dark).map_err(e2s)?.value(), udark_ratio(&scaled, &dark).map_err(e2s)?.value());
        let (x, y) = (x.ok_or("undefined ratio")?, y.ok_or("undefined ratio")?);
        ensure((x - y).abs() <= 1e-12 * x.max(1.0), || format!("vector {i}: udr {x} vs {y}"))?;
    }

    let (trace, want) = hand_fixture();
    let stats = AttentionStats::from_trace(&trace).map_err(e2s)?;
    let got = detect_hmlv(&stats, &HmlvParams::default());
    let summary: Vec<(usize, usize)> = got.iter().map(|r| (r.token, r.layer)).collect();
    let expect: Vec<(usize, usize)> = want.iter().map(|&(t, l, _)| (t, l)).collect();
    ensure(summary == expect, || format!("hand fixture: got {summary:?}, want {expect:?}"))?;
    for (r, &(_, _, mu)) in got.iter().zip(&want) {
        ensure((r.mean_attn - mu).abs() < 1e-12 && r.var_attn < 1e-20, || format!("hand fixture record {r:?}"))?;
    }
    // loosening every exclusion exposes the planted distractors
    let loose =
        detect_hmlv(&stats, &HmlvParams { skip_layers: 0, skip_last: 0, skip_bos: false, ..HmlvParams::default() });
    ensure(loose.iter().any(|r| r.token == 7) && loose.iter().any(|r| r.layer < 4), || "exclusions untested".into())?;
    ensure(!loose.iter().any(|r| r.token == 1), || "high-variance token flagged".into())?;

    let model = synth_model(&ModelConfig::tiny(6, 24, 3, 48), 42).map_err(e2s)?;
    let spec = TraceSpec { attention: true, ..TraceSpec::none() };
    let mut checked = 0;
    for toks in prompts(5, 16, 48, 42) {
        let st =
            AttentionStats::from_trace(&forward(&model, &toks, None, Some(&spec)).map_err(e2s)?.trace).map_err(e2s)?;
        for (mu, sigma) in [(0.0, 1.0), (0.018, 0.01), (0.05, 0.005)] {
            let base: Vec<HmlvRecord> =
                detect_hmlv(&st, &HmlvParams { tau_mu: mu, tau_sigma: sigma, ..HmlvParams::default() });
            for (dm, ds) in [(0.01, 0.0), (0.0, 0.002), (0.03, 0.004)] {
                let p = HmlvParams { tau_mu: mu + dm, tau_sigma: sigma - ds, ..HmlvParams::default() };
                let fewer = detect_hmlv(&st, &p);
                ensure(fewer.iter().all(|r| base.contains(r)), || "raising thresholds added records".into())?;
                checked += 1;
            }
        }
    }
    Ok(format!("100 scaled vectors, hand fixture exact, {checked} threshold pairs monotone"))
}

fn report_reproducibility() -> Check {
    let b = synth_model(&ModelConfig::tiny(3, 40, 4, 64), 51).map_err(e2s)?;
    let s = Spectra::new(&b.embed, &b.unembed, 20).map_err(e2s)?;
    let ps = prompts(6, 12, 64, 51);
    let spec = SweepSpec::grid(
        SiteKind::Rs,
        &[0, 1, 2],
        Scope::AllTokens,
        PatchMode::Suppress,
        FilterFamily::Random,
        1..=20,
        9,
        20,
    );
    let csv = |rows: &[report::RunReport]| -> Result<Vec<u8>, String> {
        let mut buf = Vec::new();
        write_reports(rows, &mut buf).map_err(e2s)?;
        Ok(buf)
    };
    let a = csv(&report::sweep(&b, &s, &ps, &spec).map_err(e2s)?.rows)?;
    let again = csv(&report::sweep(&b, &s, &ps, &spec).map_err(e2s)?.rows)?;
    ensure(a == again, || "two sweeps produced different CSV bytes".into())?;

    let ob = overflow_bundle();
    let os = Spectra::new(&ob.embed, &ob.unembed, 4).map_err(e2s)?;
    let ospec = SweepSpec {
        sites: vec!["rs:0".into(), "mlp:0".into()],
        filters: vec!["phi_u:1..3".into(), "rnd:2:seed=1".into(), "rnd:3:seed=1".into()],
        n_bands: 4,
    };
    let out = report::sweep(&ob, &os, &prompts(3, 5, 16, 2), &ospec).map_err(e2s)?;
    let diverged: Vec<_> = out.rows.iter().filter(|r| r.diverged).collect();
    ensure(!diverged.is_empty(), || "no divergent cell in the overflow fixture".into())?;
    ensure(diverged.iter().all(|r| r.nll_mean.is_none()), || "divergent cell carries a number".into())?;
    let text = String::from_utf8(csv(&out.rows)?).map_err(e2s)?;
    for line in text.lines().filter(|l| l.ends_with(",true")) {
        let nll = line.rsplit(',').nth(2).unwrap_or("?");
        ensure(nll.is_empty(), || format!("divergent row has nll `{nll}`: {line}"))?;
    }
    let svg =
        render_heatmap(&out.rows, &HeatmapAxes { family: Some("rnd".into()), ..Default::default() }).map_err(e2s)?;
    let marked = svg.matches(r#"data-state="diverged""#).count();
    let expected = diverged.iter().filter(|r| r.family == "rnd").count();
    ensure(marked == expected, || format!("heatmap marks {marked} of {expected} divergent cells"))?;
    Ok(format!("{} bytes identical; {} divergent cells blank", a.len(), diverged.len()))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("filter algebra", filter_algebra, Some(10)),
        ("svd", svd_suite, Some(30)),
        ("forward oracle", forward_oracle, Some(10)),
        ("identity patch invariance", identity_patch, None),
        ("bos invariance", bos_invariance, None),
        ("planted dark writer", planted_dark_writer, None),
        ("metrics", metrics_suite, None),
        ("report reproducibility", report_reproducibility, None),
    ];
    let mut failed = 0;
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let mut res = check();
        let took = start.elapsed();
        if let (Ok(_), Some(secs)) = (&res, limit) {
            if took > Duration::from_secs(secs) {
                res = Err(format!("took {:.2} s, limit {secs} s", took.as_secs_f64()));
            }
        }
        let timing = match limit {
            Some(secs) => format!("{:.2} s / {secs} s", took.as_secs_f64()),
            None => format!("{:.2} s", took.as_secs_f64()),
        };
        match res {
            Ok(detail) => println!("[PASS] {name:<28} {detail} ({timing})"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {name:<28} {why} ({timing})");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
