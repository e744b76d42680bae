//! `factlens` command-line front end.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use factlens::analysis::{integrated_gradients, write_attribution_pgm};
use factlens::capture::{read_capture, write_capture, CaptureFile};
use factlens::dataset::{
    ingest_facts, read_fact_file, render_prompts, write_fact_file, write_prompt_file, ColumnMapping, Table, TemplateRegistry,
};
use factlens::detector::{evaluate, load_checkpoint, load_support, save_checkpoint, save_support};
use factlens::pipeline::{
    ablation_sweep, annotate, digest_file, leave_one_out, render_annotation, split_records, support_stage, train_stage, AblationAxis,
    RunConfig, RunManifest,
};
use factlens::preprocess::{fit_stats, DatasetStats, PreprocessedRecord, Preprocessor};
use factlens::synth::generate_synthetic;

#[derive(Parser)]
#[command(name = "factlens", version, about = "Detect factual outputs from language-model inner states")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every stochastic stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads; 1 guarantees determinism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Map a CSV table to fact triples.
    Ingest {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        entity_col: String,
        #[arg(long)]
        target_col: String,
        #[arg(long)]
        relation: String,
        #[arg(long)]
        category: String,
    },
    /// Render fact triples through the template registry into a prompt file.
    Render {
        #[arg(long)]
        facts: PathBuf,
        #[arg(long)]
        registry: PathBuf,
    },
    /// Balance and split a capture into train, support-pool and test files.
    Split {
        #[arg(long)]
        capture: PathBuf,
    },
    /// Fit normalization statistics on a training capture.
    FitStats {
        #[arg(long)]
        capture: PathBuf,
    },
    /// Train a detector and build its support set.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        pool: PathBuf,
    },
    /// Evaluate a trained detector on a test capture.
    Eval {
        #[arg(long)]
        capture: PathBuf,
        #[command(flatten)]
        model: ModelFiles,
    },
    /// Leave one relation out: train on the rest, test on it.
    Loo {
        #[arg(long)]
        capture: PathBuf,
        /// Relation to hold out; every relation in turn when omitted.
        #[arg(long)]
        hold_out: Option<String>,
    },
    /// Sweep one ablation axis.
    Ablate {
        #[arg(long)]
        capture: PathBuf,
        /// top_k | support_size | architecture
        #[arg(long)]
        axis: String,
        /// Comma-separated settings replacing the standard ones.
        #[arg(long)]
        values: Option<String>,
    },
    /// Flag every token of one generation.
    Annotate {
        #[arg(long)]
        capture: PathBuf,
        #[command(flatten)]
        model: ModelFiles,
    },
    /// Integrated-gradients attribution for one record.
    Attribute {
        #[arg(long)]
        capture: PathBuf,
        #[command(flatten)]
        model: ModelFiles,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a synthetic capture file.
    Synth {
        /// Records per label.
        #[arg(long)]
        per_class: usize,
    },
}

#[derive(Args)]
struct ModelFiles {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    support: PathBuf,
    #[arg(long)]
    stats: PathBuf,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Render { .. } => "render",
            Command::Split { .. } => "split",
            Command::FitStats { .. } => "fit-stats",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Loo { .. } => "loo",
            Command::Ablate { .. } => "ablate",
            Command::Annotate { .. } => "annotate",
            Command::Attribute { .. } => "attribute",
            Command::Synth { .. } => "synth",
        }
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, path: &Path) -> PathBuf {
        self.inputs.push(path.to_path_buf());
        path.to_path_buf()
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn capture(&mut self, path: &Path) -> anyhow::Result<CaptureFile> {
        let p = self.input(path);
        read_capture(&p).with_context(|| format!("reading capture {}", p.display()))
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        emit(&text);
        std::fs::write(self.output(name), text + "\n")?;
        Ok(())
    }

    fn model_files(&mut self, m: &ModelFiles) -> anyhow::Result<(factlens::detector::DetectorModel, factlens::detector::SupportSet, Preprocessor)> {
        let model = load_checkpoint(&self.input(&m.model)).context("loading model checkpoint")?;
        let support = load_support(&self.input(&m.support)).context("loading support set")?;
        let stats = DatasetStats::load(&self.input(&m.stats)).context("loading normalization statistics")?;
        Ok((model, support, Preprocessor::new(stats)))
    }
}

/// Results also go to stdout; a closed pipe there is not an error.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", text.trim_end()).and_then(|_| out.flush());
}

fn preprocess_all(pre: &Preprocessor, capture: &CaptureFile) -> anyhow::Result<Vec<PreprocessedRecord>> {
    Ok(pre.apply_all(&capture.records, capture.meta.top_k, &capture.embeddings)?)
}

fn parse_values<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|v| v.trim().parse().map_err(|_| anyhow::anyhow!(factlens::Error::Config(format!("bad axis value `{v}`")))))
        .collect()
}

fn execute(command: &Command, run: &mut Run) -> anyhow::Result<()> {
    let cfg = run.cfg.clone();
    match command {
        Command::Ingest {
            table,
            entity_col,
            target_col,
            relation,
            category,
        } => {
            let t = Table::from_csv(File::open(run.input(table))?)?;
            let mapping = ColumnMapping {
                entity: entity_col.clone(),
                target: target_col.clone(),
            };
            let ingested = ingest_facts(&t, &mapping, relation, category)?;
            info!("{} triples, {} rows dropped", ingested.triples.len(), ingested.dropped);
            let mut w = BufWriter::new(File::create(run.output("facts.tsv"))?);
            write_fact_file(&ingested.triples, &mut w)?;
            w.flush()?;
        }
        Command::Render { facts, registry } => {
            let triples = read_fact_file(BufReader::new(File::open(run.input(facts))?))?;
            let reg = TemplateRegistry::parse(&std::fs::read_to_string(run.input(registry))?)?;
            let prompts = render_prompts(&triples, &reg)?;
            let mut w = BufWriter::new(File::create(run.output("prompts.tsv"))?);
            write_prompt_file(&prompts, &mut w)?;
            w.flush()?;
        }
        Command::Split { capture } => {
            let file = run.capture(capture)?;
            let split = split_records(file.records, &cfg)?;
            for (name, records) in [("train.cap", split.train), ("pool.cap", split.pool), ("test.cap", split.test)] {
                info!("{name}: {} records", records.len());
                let part = CaptureFile {
                    meta: file.meta.clone(),
                    records,
                    embeddings: file.embeddings.clone(),
                };
                write_capture(&part, &run.output(name))?;
            }
        }
        Command::FitStats { capture } => {
            let file = run.capture(capture)?;
            let stats = fit_stats(&file.records, &file.meta, cfg.stats_mode)?;
            stats.save(&run.output("stats.bin"))?;
        }
        Command::Train { train, pool } => {
            let train_file = run.capture(train)?;
            let pool_file = run.capture(pool)?;
            if pool_file.meta != train_file.meta {
                bail!(factlens::Error::param("train and pool captures have different metadata"));
            }
            let trained = train_stage(&train_file.records, &train_file.meta, &train_file.embeddings, &cfg)?;
            let support = support_stage(
                &trained,
                &pool_file.records,
                &pool_file.meta,
                &pool_file.embeddings,
                cfg.detector.support_size,
                cfg.detector.seed,
            )?;
            trained.stats.save(&run.output("stats.bin"))?;
            save_checkpoint(&trained.model, &run.output("model.lfsm"))?;
            save_support(&support, &run.output("support.lfss"))?;
            run.write_json("train_report.json", &trained.report)?;
        }
        Command::Eval { capture, model } => {
            let (model, support, pre) = run.model_files(model)?;
            let file = run.capture(capture)?;
            let metrics = evaluate(&model, &support, &preprocess_all(&pre, &file)?)?;
            run.write_json("metrics.json", &metrics)?;
        }
        Command::Loo { capture, hold_out } => {
            let file = run.capture(capture)?;
            let targets = match hold_out {
                Some(r) => vec![r.clone()],
                None => factlens::dataset::relations(&file.records),
            };
            let outcomes = targets
                .iter()
                .map(|r| leave_one_out(&file, r, &cfg))
                .collect::<factlens::Result<Vec<_>>>()?;
            run.write_json("loo.json", &outcomes)?;
        }
        Command::Ablate { capture, axis, values } => {
            let standard = AblationAxis::standard(axis)?;
            let axis = match (values, standard) {
                (None, a) => a,
                (Some(v), AblationAxis::TopK(_)) => AblationAxis::TopK(parse_values(v)?),
                (Some(v), AblationAxis::SupportSize(_)) => AblationAxis::SupportSize(parse_values(v)?),
                (Some(v), AblationAxis::Architecture(_)) => AblationAxis::Architecture(
                    v.split(',')
                        .map(|s| factlens::detector::Variant::parse(s.trim()))
                        .collect::<factlens::Result<_>>()?,
                ),
            };
            let file = run.capture(capture)?;
            let split = split_records(file.records, &cfg)?;
            let rows = ablation_sweep(&split, &file.meta, &file.embeddings, &axis, &cfg)?;
            run.write_json("ablation.json", &rows)?;
        }
        Command::Annotate { capture, model } => {
            let (model, support, pre) = run.model_files(model)?;
            let file = run.capture(capture)?;
            let flags = annotate(&file.records, &file.meta, &file.embeddings, &pre, &model, &support)?;
            let text = render_annotation(&flags);
            emit(&text);
            std::fs::write(run.output("annotation.txt"), text)?;
        }
        Command::Attribute {
            capture,
            model,
            index,
            steps,
        } => {
            let (model, support, pre) = run.model_files(model)?;
            let file = run.capture(capture)?;
            let record = file
                .records
                .get(*index)
                .ok_or_else(|| factlens::Error::param(format!("record index {index} out of range ({} records)", file.records.len())))?;
            let input = pre.apply(record, file.meta.top_k, &file.embeddings)?;
            let baseline = PreprocessedRecord::zeros(model.dims(), input.label);
            let report = integrated_gradients(&model, &support, &input, &baseline, steps.unwrap_or(cfg.ig_steps))?;
            let mut img = BufWriter::new(File::create(run.output("attribution.pgm"))?);
            write_attribution_pgm(&report, model.dims(), &mut img)?;
            img.flush()?;
            run.write_json("attribution.json", &report)?;
        }
        Command::Synth { per_class } => {
            let set = generate_synthetic(&cfg.synth, *per_class)?;
            write_capture(&set.into_capture(), &run.output("synthetic.cap"))?;
        }
    }
    Ok(())
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg = cfg.with_seed(seed);
    }
    if cli.global.jobs == 0 {
        bail!(factlens::Error::param("--jobs must be at least 1"));
    }
    if cli.global.jobs > 1 {
        warn!("--jobs {} requested; commands run single-threaded", cli.global.jobs);
    }
    std::fs::create_dir_all(&cli.global.out)?;
    let mut run = Run {
        cfg,
        out: cli.global.out.clone(),
        inputs: cli.global.config.iter().cloned().collect(),
        outputs: Vec::new(),
    };
    execute(&cli.command, &mut run)?;

    let manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: std::env::args().skip(1).collect(),
        seed: run.cfg.detector.seed,
        config: run.cfg.snapshot(),
        inputs: run.inputs.iter().map(|p| digest_file(p)).collect::<factlens::Result<_>>()?,
        outputs: run.outputs.iter().map(|p| digest_file(p)).collect::<factlens::Result<_>>()?,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let path = cli.global.out.join(format!("{}.manifest.json", manifest.command));
    std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<factlens::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
