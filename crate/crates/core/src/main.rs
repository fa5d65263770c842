use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vicha::data::FilterMode;
use vicha::pipeline;
use vicha::train::RunConfig;

#[derive(Parser)]
#[command(
    name = "vicha",
    version,
    about = "Desk-scale vision-language pretraining with visual concepts"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; its `preset` key picks the base preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override as dotted.key=value, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Embedding provider: mock, shapes, cache or remote.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// Remote embedding endpoint URL.
    #[arg(long, global = true)]
    remote_endpoint: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Write a synthetic shapes dataset to paths.manifest.
    Generate {
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Extract the concept corpus from the manifest captions.
    BuildCorpus,
    /// Embed the concept corpus into the cache.
    Embed,
    /// Select the top-k concepts of every manifest image.
    SelectConcepts {
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fill in pair similarities with the embedding provider.
    ScorePairs {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long = "out")]
        output: Option<PathBuf>,
    },
    /// Keep the top fraction of scored pairs.
    FilterPairs {
        #[arg(long)]
        p: Option<f64>,
        #[arg(long)]
        mode: Option<FilterMode>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Pretrain on the manifest and concept files.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        p_vc: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Two-stage image-text retrieval with recall at 1, 5 and 10.
    EvalRetrieval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        concepts: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        m: usize,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rank box proposals for a text query by cross-attention relevance.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, default_value_t = 2)]
        layer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve_config(common: &Common, extra: Vec<String>) -> vicha::Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(p) = &common.provider {
        overrides.push(format!("provider.kind=\"{p}\""));
    }
    if let Some(e) = &common.remote_endpoint {
        overrides.push(format!("provider.endpoint=\"{e}\""));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(extra);
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn opt<T: std::fmt::Display>(key: &str, value: Option<T>) -> Option<String> {
    value.map(|v| format!("{key}={v}"))
}

fn run(cli: Cli) -> vicha::Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Config => {
            print!("{}", resolve_config(c, vec![])?.to_toml());
        }
        Command::Generate { n } => {
            let config = resolve_config(c, vec![])?;
            let m = pipeline::generate(&config, n)?;
            println!(
                "wrote {} pairs to {}",
                m.len(),
                config.paths.manifest.display()
            );
        }
        Command::BuildCorpus => {
            let config = resolve_config(c, vec![])?;
            let corpus = pipeline::build_corpus_command(&config)?;
            println!(
                "wrote {} concepts to {}",
                corpus.len(),
                config.paths.corpus.display()
            );
        }
        Command::Embed => {
            let config = resolve_config(c, vec![])?;
            let n = pipeline::embed_command(&config)?;
            println!("cached {n} embeddings in {}", config.paths.cache.display());
        }
        Command::SelectConcepts { k } => {
            let config = resolve_config(c, opt("training.k", k).into_iter().collect())?;
            let sets = pipeline::select_concepts_command(&config)?;
            println!(
                "wrote concepts for {} images to {}",
                sets.len(),
                config.paths.concepts.display()
            );
        }
        Command::ScorePairs { input, output } => {
            let config = resolve_config(c, vec![])?;
            let input = input.unwrap_or_else(|| config.paths.manifest.clone());
            let output = output.unwrap_or_else(|| input.clone());
            let report = pipeline::score_pairs_command(&config, &input, &output)?;
            println!(
                "scored {} pairs, {} failures, wrote {}",
                report.scored,
                report.failures.len(),
                output.display()
            );
        }
        Command::FilterPairs {
            p,
            mode,
            input,
            output,
        } => {
            let mut extra: Vec<String> = opt("filter.p", p).into_iter().collect();
            extra.extend(opt("filter.mode", mode.map(|m| format!("\"{m}\""))));
            let config = resolve_config(c, extra)?;
            let input = input.unwrap_or_else(|| config.paths.manifest.clone());
            let m = pipeline::filter_pairs_command(
                &config,
                config.filter.p,
                config.filter.mode,
                &input,
                &output,
            )?;
            println!("kept {} pairs, wrote {}", m.len(), output.display());
        }
        Command::Pretrain {
            steps,
            p_vc,
            k,
            resume,
        } => {
            let extra = [
                opt("training.steps", steps),
                opt("training.p_vc", p_vc),
                opt("training.k", k),
            ]
            .into_iter()
            .flatten()
            .collect();
            let config = resolve_config(c, extra)?;
            let summary = pipeline::pretrain_command(&config, resume)?;
            if let Some(last) = summary.last {
                println!("step {} total loss {:.4}", last.step, last.total);
            }
            println!(
                "ran {} steps, checkpoint {}",
                summary.steps_run,
                summary.checkpoint.display()
            );
        }
        Command::EvalRetrieval {
            checkpoint,
            manifest,
            concepts,
            m,
            out_dir,
        } => {
            let config = resolve_config(c, vec![])?;
            let manifest = manifest.unwrap_or_else(|| config.paths.manifest.clone());
            let out_dir = out_dir.unwrap_or_else(|| config.paths.output_dir.clone());
            let report = pipeline::eval_retrieval_command(
                &checkpoint,
                &manifest,
                concepts.as_deref(),
                m,
                Some(&out_dir),
            )?;
            println!("{}", serde_json::to_string_pretty(&report.result)?);
        }
        Command::Ground {
            checkpoint,
            image,
            query,
            proposals,
            layer,
            out,
        } => {
            let config = resolve_config(c, vec![])?;
            let out = out.unwrap_or_else(|| config.paths.output_dir.join(pipeline::GROUNDING_FILE));
            let map = pipeline::ground_command(
                &checkpoint,
                &image,
                &query,
                &proposals,
                layer,
                Some(&out),
            )?;
            for r in &map.ranking {
                let b = r.bbox;
                println!(
                    "{}\t{:.6}\t[{}, {}, {}, {}]",
                    r.index, r.score, b.x0, b.y0, b.x1, b.y1
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
