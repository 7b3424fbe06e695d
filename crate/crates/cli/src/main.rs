use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rtgen::dataset::{read_pairs, write_pairs_to, CorpusManifest, PairRecord, Provenance, ReadMode};
use rtgen::filters::{phrase_filter, HierarchyLexicon};
use rtgen::pipeline::{self, synthbench::synthbench, PipelineConfig, ProviderConfig, RunOutput, Runtime};
use rtgen::saig::SaigModel;

/// Region-text pair generation for open-vocabulary detection.
#[derive(Parser)]
#[command(name = "rtgen", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML); the bundled synthetic config when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Process at most this many images.
    #[arg(long, global = true)]
    limit: Option<usize>,
    /// Fail on the first malformed record or skipped image.
    #[arg(long, global = true)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Text-to-region pairs: allocate caption phrases to boxes and inpaint them.
    GenerateT2r,
    /// Region-to-text pairs: caption proposals under a prompt ensemble.
    GenerateR2t,
    /// Re-apply record validation and the phrase lexicon to a pairs file.
    Filter {
        /// Pairs JSONL to filter.
        input: PathBuf,
    },
    /// Train the allocation guider on the synthetic world and save a checkpoint.
    TrainSaig {
        /// Training steps; the config value when omitted.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference check of the contrastive and guider losses.
    LossCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Synthetic ablation benchmark.
    Synthbench,
    /// Parse and validate the config, then print its hash.
    ValidateConfig,
}

/// Provider failures left more images skipped than the config allows.
#[derive(Debug, thiserror::Error)]
#[error("{failed} of {images} images skipped, above the allowed rate {allowed}")]
struct SkipRateExceeded {
    failed: usize,
    images: usize,
    allowed: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<SkipRateExceeded>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => PipelineConfig::default_synthetic(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.strict {
        cfg.parallelism.max_skip_rate = 0.0;
    }
    Ok(cfg)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn limited(rt: &Runtime, limit: Option<usize>) -> Result<CorpusManifest> {
    let mut corpus = rt.corpus()?;
    corpus.records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(n) = limit {
        corpus.records.truncate(n);
    }
    Ok(corpus)
}

fn check_skips<S>(out: &RunOutput<S>, allowed: f64) -> Result<()> {
    if out.skip_rate() > allowed {
        return Err(SkipRateExceeded { failed: out.failed_images, images: out.images, allowed }.into());
    }
    Ok(())
}

fn guider(rt: &Runtime) -> Result<SaigModel> {
    let path = &rt.config.saig.checkpoint;
    if path.exists() {
        return SaigModel::load(path).with_context(|| format!("loading {}", path.display()));
    }
    if !matches!(rt.config.providers, ProviderConfig::Synthetic(_)) {
        bail!("no guider checkpoint at {}; run `rtgen train-saig` first", path.display());
    }
    log::info!("no checkpoint at {}, training one", path.display());
    let (model, report) = pipeline::train_saig(rt, rt.config.saig.steps, rt.config.seed)?;
    log::info!("guider eval accuracy {:.3}", report.eval_accuracy);
    model.save(path)?;
    Ok(model)
}

fn write_records(records: &[PairRecord], out: Option<&Path>) -> Result<()> {
    let mut w = output(out)?;
    write_pairs_to(records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let out = common.out.as_deref();
    match &cli.command {
        Command::ValidateConfig => {
            let cfg = load_config(common)?;
            println!("config ok, hash {}", cfg.hash());
        }
        Command::LossCheck { instances } => {
            let report = pipeline::loss_check(*instances, common.seed.unwrap_or(0))?;
            println!(
                "lart: {} scalars, max rel. error {:.3e}; saig: {} scalars, max rel. error {:.3e}",
                report.lart_checked, report.lart_max_rel_error, report.saig_checked, report.saig_max_rel_error
            );
            if !report.passed() {
                bail!("gradient check failed: max rel. error {:.3e}", report.max_rel_error());
            }
        }
        Command::GenerateR2t => {
            let rt = Runtime::new(load_config(common)?)?;
            let corpus = limited(&rt, common.limit)?;
            let result = pipeline::run_r2t(&rt, &corpus)?;
            write_records(&result.records, out)?;
            log::info!("r2t: {} pairs from {} images, {:?}", result.records.len(), result.images, result.stats);
            check_skips(&result, rt.config.parallelism.max_skip_rate)?;
        }
        Command::GenerateT2r => {
            let rt = Runtime::new(load_config(common)?)?;
            let model = guider(&rt)?;
            let corpus = limited(&rt, common.limit)?;
            let result = pipeline::run_t2r(&rt, &corpus, &model)?;
            write_records(&result.records, out)?;
            log::info!("t2r: {} pairs from {} images, {:?}", result.records.len(), result.images, result.stats);
            check_skips(&result, rt.config.parallelism.max_skip_rate)?;
        }
        Command::Filter { input } => {
            let cfg = load_config(common)?;
            let lexicon = match &cfg.filters.lexicon {
                Some(p) => HierarchyLexicon::load(p)?,
                None => HierarchyLexicon::default(),
            };
            let mode = if common.strict { ReadMode::Strict } else { ReadMode::Lenient };
            let read = read_pairs(input, mode)?;
            let total = read.records.len();
            let kept: Vec<PairRecord> = read
                .records
                .into_iter()
                .filter(|r| r.validate().is_ok())
                .filter(|r| r.provenance != Provenance::T2r || !phrase_filter(&[&r.text], &lexicon).is_empty())
                .take(common.limit.unwrap_or(usize::MAX))
                .collect();
            write_records(&kept, out)?;
            log::info!("filter: kept {} of {total} records, {} malformed lines skipped", kept.len(), read.skipped.len());
        }
        Command::TrainSaig { steps } => {
            let mut cfg = load_config(common)?;
            if let Some(p) = out {
                cfg.saig.checkpoint = p.to_path_buf();
            }
            let rt = Runtime::new(cfg)?;
            let (model, report) = pipeline::train_saig(&rt, steps.unwrap_or(rt.config.saig.steps), rt.config.seed)?;
            model.save(&rt.config.saig.checkpoint)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Synthbench => {
            let cfg = load_config(common)?;
            let report = synthbench(&cfg)?;
            let mut w = output(out)?;
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
            w.flush()?;
        }
    }
    Ok(())
}
