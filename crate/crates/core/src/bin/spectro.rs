// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spectro::instrument::{parse_site, HookPlan, PatchMode, Scope};
use spectro::metrics::{write_hmlv_csv, HmlvParams};
use spectro::model::{
    generate, load_checkpoint, save_container, synth_model, ModelBundle, ModelConfig, PlantedDarkWriter,
    SamplingParams, TokenSequence,
};
use spectro::report::{self, HeatmapAxes, PromptFormat, SiteKind, SweepSpec, XAxis};
use spectro::spectra::{BasisLabel, FilterFamily, Spectra, DEFAULT_BANDS};
use spectro::{Result, SpectroError};

#[derive(Parser)]
#[command(name = "spectro", version, about = "Spectral filtering and dark-signal analysis for LLaMa-style decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct PromptArgs {
    /// Prompt file, one prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    /// Treat lines as raw text for the byte tokenizer.
    #[arg(long, conflicts_with_all = ["bos", "no_bos"])]
    bytes: bool,
    /// BoS id prepended to id lines.
    #[arg(long, default_value_t = 1)]
    bos: usize,
    /// Use id lines as they are.
    #[arg(long)]
    no_bos: bool,
}

impl PromptArgs {
    fn load(&self) -> Result<Vec<TokenSequence>> {
        let format = if self.bytes {
            PromptFormat::Bytes
        } else if self.no_bos {
            PromptFormat::Ids { bos: None }
        } else {
            PromptFormat::Ids { bos: Some(self.bos) }
        };
        report::load_prompts(&self.prompts, format)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    All,
    Bos,
    Nobos,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisArg {
    U,
    E,
}

#[derive(Clone, Copy, ValueEnum)]
enum XArg {
    K,
    Kept,
}

#[derive(Subcommand)]
enum Command {
    /// Export singular values and right singular vectors of both bases.
    Basis {
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
    },
    /// NLL over a grid of hook sites and filters.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        /// `mlp` or `rs`.
        #[arg(long, default_value = "rs")]
        site: String,
        /// phi_u, phi_e, psi, omega_u, or rnd.
        #[arg(long, default_value = "phi_u")]
        family: String,
        /// `a..b` or a single k.
        #[arg(long, default_value = "1..20")]
        k: String,
        /// `all` or a comma-separated list.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
        #[arg(long, value_enum, default_value = "all")]
        scope: ScopeArg,
        /// Swap shavings between paired prompts instead of suppressing.
        #[arg(long)]
        swap: bool,
        /// Seed of the random basis (rnd family).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra canonical filter strings appended to the grid.
        #[arg(long = "filter")]
        extra_filters: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer composition of the BoS residual stream.
    TraceBos {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        /// Which prompt of the file to trace.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shavings swap between paired prompts at one site.
    Swap {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long)]
        site: String,
        #[arg(long)]
        filter: String,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// High-mean low-variance attention tokens.
    Hmlv {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        prompts: PromptArgs,
        #[arg(long, default_value_t = 0.018)]
        tau_mu: f64,
        #[arg(long, default_value_t = 0.01)]
        tau_sigma: f64,
        #[arg(long, default_value_t = 4)]
        skip_layers: usize,
        #[arg(long, default_value_t = 4)]
        skip_last: usize,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Projection of weight matrices onto the right singular vectors.
    ProfileParams {
        #[arg(long)]
        ckpt: PathBuf,
        /// e.g. `layer.3.w2`, `layer.*.wo`, `layer.0.wq.h1`.
        #[arg(long, required = true)]
        selector: Vec<String>,
        #[arg(long, value_enum, default_value = "u")]
        basis: BasisArg,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Nucleus-sampled continuation, optionally under filters.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Whitespace-separated prompt ids.
        #[arg(long, conflicts_with = "text")]
        ids: Option<String>,
        /// Raw text for the byte tokenizer.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 1)]
        bos: usize,
        #[arg(long, default_value_t = 0.9)]
        top_p: f64,
        #[arg(long, default_value_t = 0.6)]
        temp: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// `<site>=<filter>`, repeatable.
        #[arg(long)]
        hook: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_BANDS)]
        bands: usize,
    },
    /// Render a sweep report as an SVG heatmap.
    Render {
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "k")]
        x: XArg,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        title: Option<String>,
    },
    /// Write a deterministic synthetic checkpoint.
    Synth {
        /// JSON model config; omit with --planted.
        #[arg(long, required_unless_present = "planted")]
        config: Option<PathBuf>,
        /// The planted dark-writer model instead of a Gaussian one.
        #[arg(long)]
        planted: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure exit: validation errors are 1, all-diverged sweeps are 2.
enum Failure {
    Error(SpectroError),
    AllDiverged,
}

impl From<SpectroError> for Failure {
    fn from(e: SpectroError) -> Self {
        Self::Error(e)
    }
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).map_err(|e| SpectroError::io(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load(ckpt: &Path, bands: usize) -> Result<(ModelBundle, Spectra)> {
    let bundle = load_checkpoint(ckpt)?;
    let spectra = Spectra::new(&bundle.embed, &bundle.unembed, bands)?;
    Ok((bundle, spectra))
}

fn parse_ks(s: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || SpectroError::parse("k range", s, "expected `a..b` or `k`");
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?),
        None => {
            let k = s.trim().parse().map_err(|_| bad())?;
            (k, k)
        }
    };
    if a > b {
        return Err(bad());
    }
    Ok(a..=b)
}

fn parse_layers(s: &str, n_layers: usize) -> Result<Vec<usize>> {
    if s == "all" {
        return Ok((0..n_layers).collect());
    }
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| SpectroError::parse("layers", s, "expected `all` or `0,3,7`")))
        .collect()
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::Basis { ckpt, out, bands } => {
            let (_, spectra) = load(&ckpt, bands)?;
            report::write_basis(&spectra, &out)?;
        }
        Command::Sweep { ckpt, prompts, site, family, k, layers, bands, scope, swap, seed, extra_filters, out } => {
            let (bundle, spectra) = load(&ckpt, bands)?;
            let prompts = prompts.load()?;
            let kind: SiteKind = site.parse()?;
            let family: FilterFamily =
                family.parse().map_err(|_| SpectroError::parse("family", &family, "unknown filter family"))?;
            let scope = match scope {
                ScopeArg::All => Scope::AllTokens,
                ScopeArg::Bos => Scope::BosOnly,
                ScopeArg::Nobos => Scope::AllExceptBos,
            };
            let mode = if swap { PatchMode::Swap } else { PatchMode::Suppress };
            let mut spec = SweepSpec::grid(
                kind,
                &parse_layers(&layers, bundle.config.n_layers)?,
                scope,
                mode,
                family,
                parse_ks(&k)?,
                seed,
                bands,
            );
            spec.filters.extend(extra_filters);
            let outcome = report::sweep(&bundle, &spectra, &prompts, &spec)?;
            for e in &outcome.errors {
                eprintln!("cell {} / {}: {}", e.site, e.filter, e.reason);
            }
            report::write_reports(&outcome.rows, sink(&out)?)?;
            if outcome.all_diverged() {
                return Err(Failure::AllDiverged);
            }
        }
        Command::TraceBos { ckpt, prompts, index, bands, out } => {
            let (bundle, spectra) = load(&ckpt, bands)?;
            let prompts = prompts.load()?;
            let p = prompts
                .get(index)
                .ok_or_else(|| SpectroError::InvalidArgument(format!("prompt {index} of {}", prompts.len())))?;
            let records = report::trace_bos(&bundle, &spectra, p)?;
            report::write_bos_profile(&records, sink(&out)?)?;
        }
        Command::Swap { ckpt, prompts, site, filter, bands, out } => {
            let (bundle, spectra) = load(&ckpt, bands)?;
            let prompts = prompts.load()?;
            let (site, _) = parse_site(&site)?;
            let filter = spectra.parse_filter(&filter)?;
            let rows = report::swap_report(&bundle, &prompts, site, &filter)?;
            report::write_swap_report(&rows, sink(&out)?)?;
        }
        Command::Hmlv { ckpt, prompts, tau_mu, tau_sigma, skip_layers, skip_last, bands, out } => {
            let (bundle, spectra) = load(&ckpt, bands)?;
            let prompts = prompts.load()?;
            let params = HmlvParams { tau_mu, tau_sigma, skip_layers, skip_last, skip_bos: true };
            let (rows, summary) = report::hmlv_report(&bundle, &spectra, &prompts, &params)?;
            write_hmlv_csv(&rows, sink(&out)?)?;
            eprintln!(
                "{} HMLV pairs of {} considered over {} sequences",
                summary.flagged, summary.pairs_considered, summary.sequences
            );
        }
        Command::ProfileParams { ckpt, selector, basis, bands, out } => {
            let (bundle, spectra) = load(&ckpt, bands)?;
            let label = match basis {
                BasisArg::U => BasisLabel::Unembedding,
                BasisArg::E => BasisLabel::Embedding,
            };
            let mut rows = Vec::new();
            for s in &selector {
                rows.extend(report::profile_params(&bundle, &spectra, s, label)?);
            }
            report::write_profile(&rows, sink(&out)?)?;
        }
        Command::Generate { ckpt, ids, text, bos, top_p, temp, seed, max_new, hook, bands } => {
            let (bundle, spectra) = load(&ckpt, bands)?;
            let byte_mode = text.is_some();
            let prompt = match (ids, text) {
                (_, Some(t)) => spectro::model::ByteTokenizer.encode(&t),
                (Some(ids), None) => report::parse_prompts(&ids, PromptFormat::Ids { bos: Some(bos) })?.remove(0),
                (None, None) => TokenSequence::with_bos(bos, []),
            };
            let mut plan = HookPlan::new();
            for h in &hook {
                let (site, filter) =
                    h.split_once('=').ok_or_else(|| SpectroError::parse("hook", h, "expected `<site>=<filter>`"))?;
                let (site, mode) = parse_site(site)?;
                plan.push(site, Arc::new(spectra.parse_filter(filter)?), mode)?;
            }
            let params = SamplingParams { top_p, temperature: temp };
            let g = generate(&bundle, &prompt, &params, seed, max_new, (!plan.is_empty()).then_some(&plan))?;
            let cont = g.continuation();
            let mut o = std::io::stdout().lock();
            let line = cont.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            let _ = writeln!(o, "{line}");
            if byte_mode {
                let _ = writeln!(o, "{}", spectro::model::ByteTokenizer.decode(cont));
            }
            if g.diverged {
                eprintln!("generation stopped early: activations diverged");
            }
        }
        Command::Render { report: path, out, x, family, title } => {
            let rows = report::read_reports_file(&path)?;
            let axes = HeatmapAxes {
                x: match x {
                    XArg::K => XAxis::K,
                    XArg::Kept => XAxis::KeptFraction,
                },
                family,
                title,
            };
            let svg = report::render_heatmap(&rows, &axes)?;
            std::fs::write(&out, svg).map_err(|e| SpectroError::io(&out, e))?;
        }
        Command::Synth { config, planted, seed, out } => {
            let bundle = if planted {
                PlantedDarkWriter::build(seed)?.bundle
            } else {
                let path = config.expect("clap enforces --config");
                let text = std::fs::read_to_string(&path).map_err(|e| SpectroError::io(&path, e))?;
                let cfg: ModelConfig = serde_json::from_str(&text).map_err(SpectroError::from)?;
                synth_model(&cfg, seed)?
            };
            save_container(&bundle.to_container(), &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::AllDiverged) => {
            eprintln!("every sweep cell diverged");
            ExitCode::from(2)
        }
    }
}
