// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spectro::model::{load_checkpoint, PlantedDarkWriter};
use spectro::report::read_reports_file;

fn spectro(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectro")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = spectro(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    prompts: PathBuf,
}

impl Fixture {
    fn planted() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let ckpt = root.join("planted.lspc");
        ok(&["synth", "--planted", "--out", s(&ckpt)]);
        let planted = PlantedDarkWriter::build(0).unwrap();
        let lines: Vec<String> = planted
            .prompts(3, 6, 2)
            .iter()
            .map(|p| p.ids[1..].iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect();
        let prompts = root.join("prompts.txt");
        std::fs::write(&prompts, lines.join("\n")).unwrap();
        Self { _dir: dir, root, ckpt, prompts }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn synth_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"n_layers":2,"d_model":16,"d_mlp":32,"n_heads":2,"n_kv_heads":1,"d_head":8,
            "vocab_size":40,"rope_base":10000.0,"rmsnorm_eps":1e-5,"max_seq_len":64}"#,
    )
    .unwrap();
    let out = dir.path().join("m.lspc");
    ok(&["synth", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    let b = load_checkpoint(&out).unwrap();
    assert_eq!(b.config.n_kv_heads, 1);
    assert_eq!(b.config.vocab_size, 40);
}

#[test]
fn basis_writes_three_tables() {
    let f = Fixture::planted();
    let out = f.path("basis");
    ok(&["basis", s(&f.ckpt), "--out", s(&out), "--bands", "4"]);
    let sv = std::fs::read_to_string(out.join("singular_values.csv")).unwrap();
    assert_eq!(sv.lines().count(), 1 + 2 * 32);
    for name in ["rsv_u.csv", "rsv_e.csv"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(text.lines().count(), 33, "{name}");
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("31,4,"));
        assert_eq!(last.split(',').count(), 3 + 32);
    }
}

#[test]
fn sweep_then_render() {
    let f = Fixture::planted();
    let report = f.path("sweep.csv");
    ok(&[
        "sweep",
        "--ckpt",
        s(&f.ckpt),
        "--prompts",
        s(&f.prompts),
        "--bos",
        "63",
        "--site",
        "mlp",
        "--layers",
        "0",
        "--family",
        "phi_u",
        "--k",
        "1..4",
        "--bands",
        "4",
        "--filter",
        "psi:3",
        "--out",
        s(&report),
    ]);
    let rows = read_reports_file(&report).unwrap();
    assert_eq!(rows.len(), 1 + 5);
    let base = rows[0].nll_mean.unwrap();
    // the writer only reaches the reader through band 4
    for r in &rows[1..4] {
        assert!(r.nll_mean.unwrap() > base + 1.0, "{}", r.filter);
    }
    assert!((rows[4].nll_mean.unwrap() - base).abs() < 1e-6);

    let svg = f.path("sweep.svg");
    ok(&["render", s(&report), "--out", s(&svg), "--family", "phi_u", "--x", "kept"]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches(r#"class="cell""#).count(), 4);
}

#[test]
fn analyses_to_stdout() {
    let f = Fixture::planted();
    let base = ["--ckpt", s(&f.ckpt), "--prompts", s(&f.prompts), "--bos", "63", "--bands", "4"];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&base);
        args.extend_from_slice(extra);
        String::from_utf8(ok(&args).stdout).unwrap()
    };
    let bos = with("trace-bos", &["--index", "1"]);
    assert_eq!(bos.lines().count(), 1 + 2);
    let swap = with("swap", &["--site", "mlp:0", "--filter", "phi_u:1..3"]);
    // three prompts: (0,1) and the wrap-around (2,0)
    assert_eq!(swap.lines().count(), 3);
    let hmlv = with("hmlv", &["--skip-layers", "0", "--skip-last", "1"]);
    assert!(hmlv.starts_with("seq_id,layer,token"));

    let profile = ok(&[
        "profile-params",
        "--ckpt",
        s(&f.ckpt),
        "--selector",
        "layer.0.w2",
        "--selector",
        "layer.1.wq.h0",
        "--bands",
        "4",
    ]);
    assert_eq!(String::from_utf8(profile.stdout).unwrap().lines().count(), 1 + 2 * 32);
}

#[test]
fn generate_is_seeded() {
    let f = Fixture::planted();
    let run = |seed: &str, hook: Option<&str>| {
        let mut args = vec!["generate", "--ckpt", s(&f.ckpt), "--ids", "20 4 21", "--bos", "63", "--max-new", "6"];
        args.extend(["--seed", seed, "--bands", "4"]);
        if let Some(h) = hook {
            args.extend(["--hook", h]);
        }
        String::from_utf8(ok(&args).stdout).unwrap()
    };
    assert_eq!(run("5", None), run("5", None));
    assert_eq!(run("5", None).split_whitespace().count(), 6);
    assert_eq!(run("5", Some("mlp:0=phi_u:1..4")), run("5", None));
}

#[test]
fn invalid_input_exits_with_one() {
    let f = Fixture::planted();
    let code = |args: &[&str]| spectro(args).status.code();
    let missing = f.path("missing.lspc");
    assert_eq!(code(&["basis", s(&missing), "--out", s(&f.root)]), Some(1));
    assert_eq!(
        code(&[
            "swap",
            "--ckpt",
            s(&f.ckpt),
            "--prompts",
            s(&f.prompts),
            "--bos",
            "63",
            "--site",
            "mlp:7",
            "--filter",
            "id",
            "--bands",
            "4"
        ]),
        Some(1)
    );
    assert_eq!(code(&["generate", "--ckpt", s(&f.ckpt), "--hook", "mlp:0=phi_u:9..1", "--bands", "4"]), Some(1));
    // byte text needs a byte-vocabulary model
    assert_eq!(code(&["generate", "--ckpt", s(&f.ckpt), "--text", "hi", "--bands", "4"]), Some(1));
    let garbage = f.path("bad.csv");
    std::fs::write(&garbage, "site,layer\nmlp:0,zz\n").unwrap();
    assert_eq!(code(&["render", s(&garbage), "--out", s(&f.path("x.svg"))]), Some(1));
    let broken = f.path("broken.lspc");
    std::fs::write(&broken, b"LSPC\x01\x00\x00\x00garbage").unwrap();
    assert_eq!(code(&["basis", s(&broken), "--out", s(&f.root)]), Some(1));
}
