//! `sigattn` — synthesize corpora, train and evaluate enablement-attention
//! domain classifiers, run the ablation grid, check gradients and dump
//! attention weights.
//!
//! Exit codes: 0 success, 1 validation error, 2 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sigattn::ablation::{ablate, AblationPlan, Regime};
use sigattn::checkpoint::Checkpoint;
use sigattn::datagen::{build_catalog, generate_corpus, read_corpus_dir, read_dataset, write_corpus_dir, DomainCatalog, GenerationReport, RegimeSpec};
use sigattn::dump::dump_attention;
use sigattn::gradient::{FullModelCheck, DEFAULT_STEP};
use sigattn::metrics::percent;
use sigattn::trainer::{encode_examples, evaluate, train, EnablementRandomizer, TrainConfig};

#[derive(Parser)]
#[command(name = "sigattn", version, about = "Domain classification with enablement attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a domain catalog and train/dev/test splits.
    Synth {
        #[arg(long, default_value_t = 100)]
        domains: usize,
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        #[arg(long, default_value_t = 5_000)]
        dev: usize,
        #[arg(long, default_value_t = 5_000)]
        test: usize,
        /// Fraction of examples whose enabled set contains the ground truth.
        #[arg(long, default_value_t = 0.9)]
        inclusion_ratio: f64,
        /// Target mean size of the enabled sets.
        #[arg(long, default_value_t = 8.47)]
        mean_enabled: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Seed of the domain catalog; regimes meant to be compared must
        /// share it. Defaults to `--seed`.
        #[arg(long)]
        catalog_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the best-dev checkpoint.
    Train {
        /// TOML training configuration; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's model number (1–6).
        #[arg(long)]
        model: Option<u8>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.jsonl` split file, or a corpus directory (its test split).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Train the model variants over several seeds on both regimes.
    Ablate {
        #[arg(long)]
        data_biased: PathBuf,
        #[arg(long)]
        data_unbiased: PathBuf,
        /// Comma-separated seeds, or a count `N` meaning seeds 1..=N.
        #[arg(long, default_value = "5")]
        seeds: String,
        /// Comma-separated model numbers; all six by default.
        #[arg(long)]
        models: Option<String>,
        /// Run only the cells needed for the expected orderings.
        #[arg(long)]
        ordering_cells: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; JSON is written here and a text table next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        /// `vocab,d_emb,d_hidden,domains`
        #[arg(long, default_value = "50,8,8,6")]
        dims: String,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 2)]
        enabled: usize,
        #[arg(long, default_value_t = 4)]
        model: u8,
        #[arg(long, default_value_t = 1)]
        epoch: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Attention weights of several checkpoints on examples only the last gets right.
    DumpAttn {
        /// Comma-separated checkpoint paths; the last one is the reference.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        /// Corpus directory (test split is used) or a `.jsonl` file next to `catalog.json`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        json: bool,
    },
}

/// A failure tagged with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let numerical = error
            .chain()
            .any(|e| e.downcast_ref::<sigattn::Error>().is_some_and(sigattn::Error::is_numerical));
        Self {
            code: if numerical { 2 } else { 1 },
            error,
        }
    }
}

impl From<sigattn::Error> for Failure {
    fn from(e: sigattn::Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth {
            domains,
            train,
            dev,
            test,
            inclusion_ratio,
            mean_enabled,
            seed,
            catalog_seed,
            out,
        } => {
            let catalog = build_catalog(domains, catalog_seed.unwrap_or(seed))?;
            let regime = RegimeSpec {
                inclusion_ratio,
                mean_enabled,
                train,
                dev,
                test,
                seed,
            };
            let corpus = generate_corpus(&catalog, &regime)?;
            let report = GenerationReport::measure(&catalog, &regime, &corpus);
            write_corpus_dir(&out, &catalog, &corpus, &report)?;
            println!(
                "wrote {} ({} domains, {}/{}/{} examples): inclusion {:.4}, mean enabled {:.3}",
                out.display(),
                domains,
                train,
                dev,
                test,
                report.overall.inclusion_ratio,
                report.overall.mean_enabled
            );
            if !report.inclusion_within_1pct || !report.mean_enabled_within_5pct {
                log::warn!("measured statistics are outside the regime tolerance; see report.json");
            }
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            model,
            seed,
            epochs,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = model {
                cfg.model = m;
                cfg.variant = None;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            log::info!("resolved config:\n{}", cfg.to_toml());
            let (catalog, corpus) = read_corpus_dir(&data)?;
            let outcome = train(&cfg, &catalog, &corpus)?;
            outcome.checkpoint.save(&out)?;
            write_text(&sibling(&out, "config.toml"), &cfg.to_toml())?;
            write_text(&sibling(&out, "report.json"), &to_json(&outcome.report)?)?;
            let d = outcome.report.best_dev;
            println!(
                "best epoch {:?}: dev top1 {} mrr {} top3 {} -> {}",
                outcome.report.best_epoch,
                percent(d.top1),
                percent(d.mrr),
                percent(d.top3),
                out.display()
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, json } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let (catalog, examples) = load_split(&data)?;
            check_catalog(&ckpt, &catalog, &checkpoint)?;
            let encoded = encode_examples(&examples, &ckpt.vocab)?;
            let (metrics, _) = evaluate(&ckpt.model(), &encoded, &mut EnablementRandomizer::new(0.0))?;
            if json {
                println!("{}", to_json(&metrics)?);
            } else {
                println!(
                    "{} examples  Top1 {}  MRR {}  Top3 {}",
                    metrics.count,
                    percent(metrics.top1),
                    percent(metrics.mrr),
                    percent(metrics.top3)
                );
            }
            Ok(())
        }
        Command::Ablate {
            data_biased,
            data_unbiased,
            seeds,
            models,
            ordering_cells,
            config,
            out,
        } => {
            let base = load_config(config.as_deref())?;
            let seeds = parse_seeds(&seeds)?;
            let (cat_b, corpus_b) = read_corpus_dir(&data_biased)?;
            let (cat_u, corpus_u) = read_corpus_dir(&data_unbiased)?;
            let mut plan = AblationPlan::full_grid(&["unbiased", "biased"], seeds, base);
            if ordering_cells {
                plan.cells = sigattn::ablation::ordering_cells();
            }
            if let Some(models) = models {
                let keep = parse_list::<u8>(&models)?;
                plan.cells.retain(|(_, m)| keep.contains(m));
            }
            let regimes = [
                Regime {
                    name: "unbiased".into(),
                    catalog: &cat_u,
                    corpus: &corpus_u,
                },
                Regime {
                    name: "biased".into(),
                    catalog: &cat_b,
                    corpus: &corpus_b,
                },
            ];
            let report = ablate(&regimes, &plan, |r| match &r.test {
                Some(m) => log::info!(
                    "{} model ({}) seed {}: test top1 {} ({:.0}s)",
                    r.regime,
                    r.model,
                    r.seed,
                    percent(m.top1),
                    r.seconds
                ),
                None => log::warn!("{} model ({}) seed {} failed: {}", r.regime, r.model, r.seed, r.failure.as_deref().unwrap_or("")),
            })?;
            write_text(&out, &to_json(&report)?)?;
            let table = report.render();
            write_text(&out.with_extension("txt"), &table)?;
            print!("{table}");
            for inv in report.inversions() {
                log::warn!("inversion on {}: ({}) < ({})", inv.regime, inv.better, inv.worse);
            }
            Ok(())
        }
        Command::Gradcheck {
            dims,
            tolerance,
            enabled,
            model,
            epoch,
            seed,
        } => {
            let d = parse_list::<usize>(&dims)?;
            let [vocab, d_emb, d_hidden, domains] = d[..] else {
                bail_validation("--dims needs four values: vocab,d_emb,d_hidden,domains")?
            };
            let check = FullModelCheck {
                vocab,
                d_emb,
                d_hidden,
                d_ff: d_hidden,
                domains,
                enabled,
                model,
                epoch,
                seed,
                ..FullModelCheck::default()
            };
            let started = std::time::Instant::now();
            let report = check.run(tolerance, DEFAULT_STEP)?;
            println!(
                "max relative error {:.3e} over {} parameter arrays (tolerance {:.0e}) in {:.2}s: {}",
                report.max_rel_error(),
                report.params.len(),
                tolerance,
                started.elapsed().as_secs_f64(),
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if let Some(f) = &report.failure {
                println!("{f}");
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure {
                    code: 2,
                    error: anyhow::anyhow!("gradient check failed"),
                })
            }
        }
        Command::DumpAttn { checkpoints, data, k, json } => {
            let (catalog, examples) = load_split(&data)?;
            let mut loaded = Vec::new();
            for path in &checkpoints {
                let c = Checkpoint::load(path)?;
                check_catalog(&c, &catalog, path)?;
                let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                loaded.push((label, c));
            }
            let dump = dump_attention(&loaded, &catalog, &examples, k)?;
            if json {
                println!("{}", to_json(&dump)?);
            } else {
                print!("{}", dump.render());
            }
            Ok(())
        }
    }
}

fn bail_validation<T>(message: &str) -> Result<T, Failure> {
    Err(Failure {
        code: 1,
        error: anyhow::anyhow!("{message}"),
    })
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    match path {
        Some(p) => Ok(TrainConfig::load(p)?),
        None => Ok(TrainConfig::default()),
    }
}

/// A corpus directory (test split) or a single split file beside `catalog.json`.
fn load_split(path: &Path) -> anyhow::Result<(DomainCatalog, Vec<sigattn::datagen::Example>)> {
    if path.is_dir() {
        let catalog = DomainCatalog::load(&path.join("catalog.json"))?;
        let examples = read_dataset(&path.join("test.jsonl"), &catalog)?;
        Ok((catalog, examples))
    } else {
        let dir = path.parent().unwrap_or(Path::new("."));
        let catalog = DomainCatalog::load(&dir.join("catalog.json"))
            .with_context(|| format!("no catalog.json next to {}", path.display()))?;
        let examples = read_dataset(path, &catalog)?;
        Ok((catalog, examples))
    }
}

fn check_catalog(c: &Checkpoint, catalog: &DomainCatalog, path: &Path) -> anyhow::Result<()> {
    if c.domains != catalog.names() {
        bail!("{} was trained on a different domain catalog", path.display());
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| anyhow::anyhow!("cannot parse `{s}` in `{text}`")))
        .collect()
}

fn parse_seeds(text: &str) -> anyhow::Result<Vec<u64>> {
    let list = parse_list::<u64>(text)?;
    match list[..] {
        [n] if !text.contains(',') => {
            if n == 0 {
                bail!("--seeds needs at least one seed");
            }
            Ok((1..=n).collect())
        }
        _ => Ok(list),
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn to_json<T: serde::Serialize>(value: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
