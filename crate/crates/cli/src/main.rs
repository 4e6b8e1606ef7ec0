use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use emoctx::analysis;
use emoctx::annotation::AggregationPolicy;
use emoctx::dataset::{load_corpus, Corpus, Split};
use emoctx::engine::{self, BenchConfig, Grid, RunConfig, SplitData};
use emoctx::model::{self, ModelConfig};
use emoctx::synthgen::{self, SynthSpec};
use emoctx::{CategoryId, Error, Result};

#[derive(Parser)]
#[command(name = "emoctx", version, about = "Context-based apparent emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct CorpusArgs {
    /// Corpus directory or manifest file.
    corpus: PathBuf,
    /// Restrict to one split.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value = "union")]
    policy: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 600)]
        n: usize,
        /// WIDTHxHEIGHT
        #[arg(long, default_value = "48x48")]
        image_size: String,
        #[arg(long, default_value_t = 0.3)]
        body_fraction: f64,
        /// Comma-separated category ids drawn inside the box.
        #[arg(long)]
        body_categories: Option<String>,
        /// Comma-separated category ids drawn outside the box; "none" for none.
        #[arg(long)]
        context_categories: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        prevalence: f64,
        #[arg(long, default_value_t = 0.05)]
        noise_level: f64,
        #[arg(long, default_value_t = 1)]
        annotators: usize,
        #[arg(long, default_value_t = 0.0)]
        annotator_noise: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Category, dimension and demographic counts.
    Stats {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Annotator agreement per person and category.
    Agreement {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Category co-occurrence matrix and per-category dimension profiles.
    Cooccur {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        common: Common,
    },
    /// K-means over category annotations.
    Cluster {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Emotion statistics per external image tag.
    Crosstab {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// CSV with image_id,tag rows after a header.
        #[arg(long)]
        tags: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint; thresholds are calibrated on the validation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Train B and B+I with the same schedule and compare them on test.
    CompareContext {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Linear baselines over feature files (concatenated in order).
    FeatureBench {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        l2: f64,
        #[arg(long, default_value_t = 500)]
        iterations: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Search loss parameters by validation mean AP minus AAE.
    GridSearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "1")]
        lambda_cont: String,
        #[arg(long, default_value = "0.1")]
        theta: String,
        #[arg(long, default_value = "1.2")]
        c: String,
        #[command(flatten)]
        common: Common,
    },
}

fn user(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn out_dir(common: &Common) -> Result<&Path> {
    let Format::Csv = common.format;
    let dir = common.out.as_deref().ok_or_else(|| user("--out is required"))?;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    Ok(dir)
}

fn parse_ids(s: &str) -> Result<BTreeSet<CategoryId>> {
    if s.trim() == "none" {
        return Ok(BTreeSet::new());
    }
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            let id: u8 = t.parse().map_err(|_| user(format!("bad category id {t:?}")))?;
            CategoryId::new(id)
        })
        .collect()
}

fn parse_reals(flag: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',').map(str::trim).map(|t| t.parse().map_err(|_| user(format!("--{flag}: bad number {t:?}")))).collect()
}

fn load(args: &CorpusArgs) -> Result<(Corpus, Option<Split>, AggregationPolicy)> {
    let corpus = load_corpus(&args.corpus)?;
    let split = args.split.as_deref().map(str::parse).transpose()?;
    Ok((corpus, split, args.policy.parse()?))
}

fn run_config(path: &Path, common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.workers != 1 {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

fn split_data(cfg: &RunConfig) -> Result<(Corpus, SplitData)> {
    let path = cfg.corpus.as_deref().ok_or_else(|| Error::Config("run config has no corpus".into()))?;
    SplitData::load(path, &cfg.model, cfg.aggregation)
}

/// Names the first fields on which two model configurations differ.
fn config_difference(a: &ModelConfig, b: &ModelConfig) -> String {
    let mut diffs = Vec::new();
    for (branch, x, y) in [("body", &a.body, &b.body), ("context", &a.context, &b.context)] {
        if x.input_size != y.input_size {
            diffs.push(format!("{branch}.input_size {:?} vs {:?}", x.input_size, y.input_size));
        }
        if x.n_conv_layers != y.n_conv_layers {
            diffs.push(format!("{branch}.n_conv_layers {} vs {}", x.n_conv_layers, y.n_conv_layers));
        }
        if x.kernel_length != y.kernel_length {
            diffs.push(format!("{branch}.kernel_length {} vs {}", x.kernel_length, y.kernel_length));
        }
        if x.channel_schedule != y.channel_schedule {
            diffs.push(format!("{branch}.channel_schedule {:?} vs {:?}", x.channel_schedule, y.channel_schedule));
        }
        if x.downsample_layers != y.downsample_layers {
            diffs.push(format!("{branch}.downsample_layers {:?} vs {:?}", x.downsample_layers, y.downsample_layers));
        }
    }
    diffs.join(", ")
}

fn read_tags(path: &Path) -> Result<BTreeMap<String, BTreeSet<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(user(format!("{}: expected image_id,tag rows", path.display())));
        }
        out.entry(rec[0].to_string()).or_default().insert(rec[1].to_string());
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            image_size,
            body_fraction,
            body_categories,
            context_categories,
            prevalence,
            noise_level,
            annotators,
            annotator_noise,
            common,
        } => {
            let out = out_dir(&common)?;
            let (w, h) = image_size
                .split_once('x')
                .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                .ok_or_else(|| user(format!("--image-size: expected WIDTHxHEIGHT, got {image_size:?}")))?;
            let defaults = SynthSpec::default();
            let spec = SynthSpec {
                n_images: n,
                image_size: (w, h),
                body_fraction,
                body_categories: body_categories.as_deref().map(parse_ids).transpose()?.unwrap_or(defaults.body_categories),
                context_categories: context_categories.as_deref().map(parse_ids).transpose()?.unwrap_or(defaults.context_categories),
                prevalence,
                noise_level,
                n_annotators: annotators,
                annotator_noise,
                seed: common.seed.unwrap_or(0),
            };
            let output = engine::with_workers(common.workers, || synthgen::generate(&spec, out))??;
            println!("wrote {} persons to {}", output.corpus.persons.len(), out.display());
        }
        Command::Stats { corpus, common } => {
            let (c, split, policy) = load(&corpus)?;
            let c = match split {
                Some(s) => subset(&c, s),
                None => c,
            };
            let stats = analysis::corpus_statistics(&c, policy)?;
            let mut text = format!("persons,{}\nimages,{}\n", stats.persons, stats.images);
            for id in CategoryId::all() {
                text += &format!("{},{}\n", id.name(), stats.category_counts[id.index()]);
            }
            // A closed pipe (e.g. `| head`) is not an error.
            let _ = std::io::stdout().write_all(text.as_bytes());
            if common.out.is_some() {
                stats.write_csv(out_dir(&common)?)?;
            }
        }
        Command::Agreement { corpus, common } => {
            let out = out_dir(&common)?;
            let (c, split, _) = load(&corpus)?;
            let report = analysis::agreement_report(&c.select(split))?;
            analysis::write_agreement_report(&report, out)?;
            println!("mean kappa {:.4} over {} persons ({} skipped)", report.mean_kappa, report.per_person_kappa.len(), report.skipped);
        }
        Command::Cooccur { corpus, common } => {
            let out = out_dir(&common)?;
            let (c, split, policy) = load(&corpus)?;
            let labels = c.labels(split, policy)?;
            analysis::cooccurrence(&labels).write_csv(&out.join("cooccurrence.csv"))?;
            analysis::write_dimension_profiles(&analysis::dimension_by_category(&labels), &out.join("dimension_profiles.csv"))?;
        }
        Command::Cluster { corpus, k, common } => {
            let out = out_dir(&common)?;
            let (c, split, policy) = load(&corpus)?;
            let clusters = analysis::cluster_category_patterns(&c.labels(split, policy)?, k, common.seed.unwrap_or(0))?;
            analysis::write_clusters(&clusters, &out.join("clusters.csv"))?;
            for (i, cl) in clusters.iter().enumerate() {
                let names: Vec<&str> = cl.categories.iter().map(|c| c.name()).collect();
                println!("{} ({}): {}", i + 1, cl.size, names.join(", "));
            }
        }
        Command::Crosstab { corpus, tags, common } => {
            let out = out_dir(&common)?;
            let (c, split, policy) = load(&corpus)?;
            let c = match split {
                Some(s) => subset(&c, s),
                None => c,
            };
            let tab = analysis::cross_tabulate(&c, &read_tags(&tags)?, policy)?;
            analysis::write_cross_tab(&tab, &out.join("crosstab.csv"))?;
        }
        Command::Train { config, common } => {
            let mut cfg = run_config(&config, &common)?;
            if let Some(out) = &common.out {
                cfg.checkpoint_dir = Some(out.clone());
            }
            if cfg.checkpoint_dir.is_none() {
                return Err(user("no output: set checkpoint_dir in the config or pass --out"));
            }
            let outcome = engine::with_workers(cfg.workers, || -> Result<_> {
                let (_, data) = split_data(&cfg)?;
                engine::train(&cfg, &data, None)
            })??;
            let last = outcome.log.last();
            println!(
                "trained {} epochs; best epoch {}; final loss {}",
                outcome.log.len(),
                outcome.best_epoch,
                last.map_or("n/a".into(), |l| format!("{:.6}", l.train_loss.total))
            );
        }
        Command::Eval { config, checkpoint, split, common } => {
            let out = out_dir(&common)?;
            let cfg = run_config(&config, &common)?;
            let (params, _) = model::load_checkpoint(&checkpoint)?;
            if params.config != cfg.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model config: {}",
                    checkpoint.display(),
                    config_difference(&params.config, &cfg.model)
                )));
            }
            let split: Split = split.parse()?;
            let report = engine::with_workers(cfg.workers, || -> Result<_> {
                let (_, data) = split_data(&cfg)?;
                let thresholds = engine::calibrate_thresholds(&params, &data.val, cfg.mode)?;
                engine::evaluate(&params, data.get(split), cfg.mode, &thresholds)
            })??;
            report.write(out, &cfg.mode.to_string())?;
            println!("mean AP {:.4}, mean AAE {:.4}, median JC {:.4}", report.ap.mean, report.aae.mean, report.median_jaccard);
        }
        Command::CompareContext { config, common } => {
            let out = out_dir(&common)?;
            let mut cfg = run_config(&config, &common)?;
            cfg.checkpoint_dir = Some(out.join("checkpoints"));
            let cmp = engine::with_workers(cfg.workers, || -> Result<_> {
                let (_, data) = split_data(&cfg)?;
                engine::compare_context_modes(&cfg, &data)
            })??;
            cmp.write(out)?;
            println!("mean AP: B {:.4}, B+I {:.4}", cmp.body.ap.mean, cmp.body_image.ap.mean);
            println!("mean AAE: B {:.4}, B+I {:.4}", cmp.body.aae.mean, cmp.body_image.aae.mean);
        }
        Command::FeatureBench { corpus, features, l2, iterations, common } => {
            let out = out_dir(&common)?;
            let (c, split, policy) = load(&corpus)?;
            let sets = features.iter().map(|p| engine::read_features(p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&engine::Features> = sets.iter().collect();
            let f = engine::concat_features(&refs)?;
            let cfg = BenchConfig { l2, iterations, ..Default::default() };
            let report = engine::feature_bench(&f, &c, policy, split.unwrap_or(Split::Test), &cfg)?;
            emoctx::metrics::write_ap_table(&out.join("ap.csv"), &[("features", &report.ap)])?;
            emoctx::metrics::write_aae_table(&out.join("aae.csv"), &[("features", &report.aae)])?;
            println!("{} features: mean AP {:.4}, mean AAE {:.4}", report.dim, report.ap.mean, report.aae.mean);
        }
        Command::GridSearch { config, lambda_cont, theta, c, common } => {
            let out = out_dir(&common)?;
            let cfg = run_config(&config, &common)?;
            let grid = Grid {
                lambda_cont: parse_reals("lambda-cont", &lambda_cont)?,
                theta: parse_reals("theta", &theta)?,
                c: parse_reals("c", &c)?,
            };
            let (results, best) = engine::with_workers(cfg.workers, || -> Result<_> {
                let (_, data) = split_data(&cfg)?;
                engine::grid_search(&cfg, &grid, &data)
            })??;
            engine::write_grid(&results, &out.join("grid.csv"))?;
            let b = results[best];
            println!("best: lambda_cont {} theta {} c {} (val mAP {:.4}, AAE {:.4})", b.lambda_cont, b.theta, b.c, b.val_map, b.val_aae);
        }
    }
    Ok(())
}

fn subset(c: &Corpus, split: Split) -> Corpus {
    let mut out = c.clone();
    out.persons.retain(|id, _| c.splits.get(id) == Some(&split));
    let used: BTreeSet<&String> = out.persons.values().map(|p| &p.image_id).collect();
    out.images.retain(|id, _| used.contains(id));
    out.splits.retain(|_, s| *s == split);
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
