// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use proptest::prelude::*;
use spectro::instrument::{run_with_swap, HookSite};
use spectro::linalg::{self, max_abs_diff, svd, Matrix};
use spectro::metrics::{detect_hmlv, udark_ratio, AttentionStats, HmlvParams, UdarkRatio};
use spectro::model::{forward, synth_model, ModelConfig, TokenSequence, TraceSpec};
use spectro::spectra::{
    compute_spectral_basis, make_filter, param_projection_profile, BandPartition, BasisLabel, Direction, FilterSpec,
    Spectra,
};

fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) - b.get(i, j));
    diff.frobenius_norm() / a.frobenius_norm().max(f64::MIN_POSITIVE)
}

fn gram_error(m: &Matrix) -> f64 {
    m.transpose().matmul(m).unwrap().max_abs_diff(&Matrix::identity(m.cols()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_reconstructs(rows in 1usize..=64, cols in 1usize..=64, tall in any::<bool>(), seed in any::<u64>()) {
        let (r, c) = if tall { (rows * 4, cols) } else { (rows, cols * 4) };
        let a = Matrix::random_gaussian(r.min(256), c.min(256), 1.0, seed);
        let s = svd(&a).unwrap();
        prop_assert!(relative_error(&a, &s.reconstruct()) <= 1e-8);
        prop_assert!(gram_error(&s.u) <= 1e-8);
        prop_assert!(gram_error(&s.v) <= 1e-8);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]) && s.sigma.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(s.sigma.len(), a.rows().min(a.cols()));
        prop_assert_eq!(svd(&a).unwrap().v, s.v);
    }

    #[test]
    fn orthonormal_prefix(d in 1usize..48, a in 0usize..48, b in 0usize..48, seed in any::<u64>()) {
        let (n1, n2) = (1 + a % d, 1 + b % d);
        let (n1, n2) = (n1.min(n2), n1.max(n2));
        let big = linalg::random_orthonormal(d, n2, seed).unwrap();
        let small = linalg::random_orthonormal(d, n1, seed).unwrap();
        prop_assert_eq!(big.columns(0..n1), small);
        prop_assert!(gram_error(&big) <= 1e-10);
    }

    #[test]
    fn band_partition_covers(d in 1usize..600, n in 1usize..40) {
        prop_assume!(n <= d);
        let p = BandPartition::new(d, n).unwrap();
        let mut next = 0;
        for (i, r) in p.ranges().iter().enumerate() {
            prop_assert_eq!(r.start, next);
            let want = if i + 1 == n { d - (n - 1) * (d / n) } else { d / n };
            prop_assert_eq!(r.len(), want);
            next = r.end;
        }
        prop_assert_eq!(next, d);
    }
}

fn filter_strategy() -> impl Strategy<Value = (u64, usize, usize, usize, u8)> {
    (any::<u64>(), prop_oneof![Just(4usize), Just(8), Just(20)], 1usize..=20, 1usize..=20, 0u8..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn projector_filters((seed, n, a, b, family) in filter_strategy()) {
        let d = 40;
        let (j, k) = ((a.min(b) - 1) % n + 1, (a.max(b) - 1) % n + 1);
        let (j, k) = (j.min(k), j.max(k));
        let bu = compute_spectral_basis(&Matrix::random_gaussian(64, d, 1.0, seed), BasisLabel::Unembedding).unwrap();
        let spec = match family {
            0 => FilterSpec::phi_u(j, k, n),
            1 => FilterSpec::omega_u(k.min(n - 1), n),
            2 => FilterSpec::random(k, seed, n),
            _ => FilterSpec::identity(n),
        };
        prop_assume!(spec.validate().is_ok());
        let f = make_filter(&spec, &bu, None).unwrap().materialize();
        prop_assert!(f.matmul(&f).unwrap().max_abs_diff(&f) <= 1e-8);
        prop_assert!(f.max_abs_diff(&f.transpose()) <= 1e-8);
        let p = BandPartition::new(d, n).unwrap();
        let trace: f64 = (0..d).map(|i| f.get(i, i)).sum();
        prop_assert!((trace - spec.kept_dims(&p) as f64).abs() <= 1e-6);
    }

    #[test]
    fn complement_and_decomposition(seed in any::<u64>(), k in 1usize..20) {
        let d = 40;
        let n = 20;
        let bu = compute_spectral_basis(&Matrix::random_gaussian(64, d, 1.0, seed), BasisLabel::Unembedding).unwrap();
        let m = |s: FilterSpec| make_filter(&s, &bu, None).unwrap().materialize();
        let head = m(FilterSpec::phi_u(1, k, n));
        let tail = m(FilterSpec::phi_u(k + 1, n, n));
        prop_assert!(head.add(&tail).unwrap().max_abs_diff(&Matrix::identity(d)) <= 1e-8);
        if k < n {
            let omega = m(FilterSpec::omega_u(k, n));
            let parts = head.add(&m(FilterSpec::phi_u(n, n, n))).unwrap();
            prop_assert!(omega.max_abs_diff(&parts) <= 1e-8);
        }
    }

    #[test]
    fn psi_fixes_vectors_off_the_tail(seed in any::<u64>(), k in 1usize..20, coeffs in prop::collection::vec(-3.0f64..3.0, 40)) {
        let d = 40;
        let n = 20;
        let bu = compute_spectral_basis(&Matrix::random_gaussian(64, d, 1.0, seed), BasisLabel::Unembedding).unwrap();
        let be = compute_spectral_basis(&Matrix::random_gaussian(64, d, 1.0, seed ^ 1), BasisLabel::Embedding).unwrap();
        let psi = make_filter(&FilterSpec::psi(k, n), &bu, Some(&be)).unwrap();
        let keep = BandPartition::new(d, n).unwrap().prefix_len(k);
        let v: Vec<f64> = (0..d).map(|i| (0..keep).map(|c| coeffs[c] * bu.rsv().get(i, c)).sum()).collect();
        prop_assert!(max_abs_diff(&psi.apply(&v).unwrap(), &v) <= 1e-8);
    }

    #[test]
    fn profile_parseval(seed in any::<u64>(), cols in 1usize..24, write in any::<bool>()) {
        let bu = compute_spectral_basis(&Matrix::random_gaussian(48, 24, 1.0, seed), BasisLabel::Unembedding).unwrap();
        let w = Matrix::random_gaussian(24, cols, 1.0, seed.wrapping_add(7));
        let (w, dir) = if write { (w.transpose(), Direction::Write) } else { (w, Direction::Read) };
        let p = param_projection_profile(&bu, &w, dir).unwrap();
        let sq: f64 = p.iter().map(|x| x * x).sum();
        prop_assert!((sq - w.frobenius_norm().powi(2)).abs() <= 1e-8 * sq.max(1.0));
    }

    #[test]
    fn udr_scale_invariant(seed in any::<u64>(), c in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3]) {
        let b = Matrix::random_gaussian(48, 24, 1.0, seed);
        let s = Spectra::new(&b, &b, 4).unwrap();
        let dark = s.u_dark();
        let h = Matrix::random_gaussian(1, 24, 1.0, seed ^ 9).row(0).to_vec();
        let scaled: Vec<f64> = h.iter().map(|x| c * x).collect();
        let (a, b2) = (udark_ratio(&h, &dark).unwrap(), udark_ratio(&scaled, &dark).unwrap());
        match (a, b2) {
            (UdarkRatio::Finite(x), UdarkRatio::Finite(y)) => prop_assert!((x - y).abs() <= 1e-10 * x.max(1.0)),
            _ => prop_assert!(false),
        }
        let dv = dark.apply(&h).unwrap();
        let light: Vec<f64> = h.iter().zip(&dv).map(|(a, b)| a - b).collect();
        let r = a.value().unwrap();
        prop_assert!((r * r * linalg::dot(&light, &light) - linalg::dot(&dv, &dv)).abs() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hmlv_monotone_in_thresholds(seed in 0u64..1000, mu in 0.0f64..0.2, sigma in 0.0f64..0.05, dmu in 0.0f64..0.1, dsigma in 0.0f64..0.02) {
        let b = synth_model(&ModelConfig::tiny(6, 16, 2, 32), seed).unwrap();
        let toks = common::prompts(1, 14, 32, seed).remove(0);
        let spec = TraceSpec { attention: true, ..TraceSpec::none() };
        let stats = AttentionStats::from_trace(&forward(&b, &toks, None, Some(&spec)).unwrap().trace).unwrap();
        let base = HmlvParams { tau_mu: mu, tau_sigma: sigma, ..HmlvParams::default() };
        let all = detect_hmlv(&stats, &base);
        for r in &all {
            prop_assert!(r.layer >= 4 && r.layer < 6 && r.token >= 1 && r.token + 4 < toks.len());
        }
        let stricter = HmlvParams { tau_mu: mu + dmu, tau_sigma: (sigma - dsigma).max(0.0), ..base };
        let fewer = detect_hmlv(&stats, &stricter);
        prop_assert!(fewer.iter().all(|r| all.contains(r)));
    }

    #[test]
    fn swap_preserves_bos_and_sums(seed in 0u64..1000, k in 1usize..10) {
        let b = synth_model(&ModelConfig::tiny(2, 20, 2, 40), seed).unwrap();
        let s = Spectra::new(&b.embed, &b.unembed, 10).unwrap();
        let ps = common::prompts(2, 7, 40, seed);
        let f = s.filter(&FilterSpec::phi_u(1, k, 10)).unwrap();
        let spec = TraceSpec { residuals: true, hooks: true, ..TraceSpec::none() };
        let out = run_with_swap(&b, &ps[0], &ps[1], HookSite::residual(0), &f, Some(&spec)).unwrap();
        let clean = forward(&b, &ps[0], None, Some(&spec)).unwrap().trace;
        for l in 0..=2 {
            prop_assert_eq!(out.trace_a.residual(l, 0).unwrap(), clean.residual(l, 0).unwrap());
        }
        for (ra, rb) in out.trace_a.hooks.iter().zip(&out.trace_b.hooks) {
            let before: Vec<f64> = ra.pre.iter().zip(&rb.pre).map(|(x, y)| x + y).collect();
            let after: Vec<f64> = ra.post.iter().zip(&rb.post).map(|(x, y)| x + y).collect();
            prop_assert!(max_abs_diff(&before, &after) <= 1e-8);
        }
    }

    #[test]
    fn bos_stream_independent_of_suffix(seed in 0u64..1000, len in 1usize..12) {
        let b = synth_model(&ModelConfig::tiny(2, 16, 2, 32), 3).unwrap();
        let spec = TraceSpec { residuals: true, ..TraceSpec::none() };
        let p = common::prompts(1, len, 32, seed).remove(0);
        let q = TokenSequence::with_bos(1, [2]);
        let (tp, tq) = (forward(&b, &p, None, Some(&spec)).unwrap().trace, forward(&b, &q, None, Some(&spec)).unwrap().trace);
        for l in 0..=2 {
            prop_assert_eq!(tp.residual(l, 0).unwrap(), tq.residual(l, 0).unwrap());
        }
    }
}
