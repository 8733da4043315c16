//! `cnc`: train, code and evaluate binarized hash-grid feature fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cnc_core::codec::bitstream::MAGIC;
use cnc_core::codec::{decode_model, encode_model, EncodeOptions};
use cnc_core::corpus::{code_corpus, generate_corpus, Corpus, CorpusCoding, CorpusKind};
use cnc_core::field::{
    evaluate, rd_sweep, synth_field, train, write_rd_csv, write_rd_json, write_train_log, Checkpoint,
};
use cnc_core::{Ablation, Error, ErrorClass, FieldModel, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "cnc", version, about = "Context-coded binarized hash-grid fields")]
struct Cli {
    /// Worker threads for reconstruction and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write `checkpoint.bin`, `train_log.csv` and `config.toml`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code a checkpoint into a bitstream.
    Encode {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream into `model.bin` inside the output directory.
    Decode {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report PSNR of a checkpoint, decoded model or bitstream.
    Eval {
        model: PathBuf,
        /// Defaults to the configuration embedded in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train, code and evaluate once per rate weight.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated rate weights.
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic sign corpus.
    GenCorpus {
        /// `iid(p)`, `multiscale-correlated` or `all-ones`.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code a corpus and print per-level sizes as JSON.
    CodeCorpus {
        input: PathBuf,
        /// Fit context fusers instead of using level frequencies.
        #[arg(long)]
        context: bool,
        #[arg(long = "Lc", default_value_t = 3)]
        context_levels: usize,
        #[arg(long, default_value_t = 300)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-size preset instead of the desk defaults.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, value_parser = parse_ablation)]
    ablate_context: Option<Ablation>,
    /// First 3D level coded without context.
    #[arg(long = "Ld")]
    disable_from: Option<usize>,
    /// Coarser levels fed to each fuser.
    #[arg(long = "Lc")]
    context_levels: Option<usize>,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse()
        .map_err(|_| format!("expected one of none, 2d, 3d, dim, all; got {s}"))
}

impl RunArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let base = if self.paper_scale {
            TrainConfig::paper_scale()
        } else {
            TrainConfig::desk()
        };
        let mut c = match &self.config {
            Some(path) => TrainConfig::from_toml_over(&read_text(path)?, &base)?,
            None => base,
        };
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(l) = self.lambda {
            c.train.lambda = l;
        }
        if let Some(n) = self.iterations {
            c.train.iterations = n;
        }
        if let Some(a) = self.ablate_context {
            c.model.ablation = a;
        }
        if let Some(d) = self.disable_from {
            c.model.disable_from = Some(d);
        }
        if let Some(l) = self.context_levels {
            c.model.context_levels = l;
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

/// Loads a checkpoint, a decoded model or a bitstream.
fn load_any(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    if data.starts_with(&MAGIC) {
        return Ok(Checkpoint {
            config: None,
            model: decode_model(&data)?,
        });
    }
    Checkpoint::from_bytes(&data)
}

fn cmd_train(run: &RunArgs, out: &Path) -> Result<()> {
    let config = run.resolve()?;
    let field = synth_field(config.field.kind, config.field.seed, config.field.channels)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    let every = config.train.log_every.max(1);
    let outcome = train(&config, &field, |e| {
        if (e.iteration + 1) % every == 0 {
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.4e}  mse {:.4e}  bits {:.0}",
                e.iteration + 1,
                e.lr,
                e.loss,
                e.mse,
                e.rate_bits
            );
        }
    })?;
    write_train_log(&outcome.log, fs::File::create(out.join("train_log.csv"))?)?;
    let psnr = evaluate(&outcome.model, &field, config.eval.resolution)?;
    Checkpoint {
        config: Some(config),
        model: outcome.model,
    }
    .save(&out.join("checkpoint.bin"))?;
    eprintln!("psnr {psnr:.3} dB");
    Ok(())
}

#[derive(Serialize)]
struct EncodeSummary {
    total_bytes: usize,
    embedding_bytes: usize,
    header: usize,
    occupancy: usize,
    context: usize,
    mlp: usize,
    tables: Vec<(String, usize)>,
}

fn cmd_encode(checkpoint: &Path, out: &Path) -> Result<()> {
    let ckpt = load_any(checkpoint)?;
    let options = match &ckpt.config {
        Some(c) => EncodeOptions {
            mlp_bits: c.codec.mlp_bits,
            lambda: c.train.lambda,
        },
        None => EncodeOptions::default(),
    };
    let (bytes, report) = encode_model(&ckpt.model, &options)?;
    fs::write(out, &bytes)?;
    print_json(&EncodeSummary {
        total_bytes: report.total_bytes,
        embedding_bytes: report.embedding_bytes(),
        header: report.sections.header,
        occupancy: report.sections.occupancy,
        context: report.sections.context,
        mlp: report.sections.mlp,
        tables: report.tables.iter().map(|t| (t.name.clone(), t.bytes)).collect(),
    })
}

fn cmd_decode(input: &Path, out: &Path) -> Result<()> {
    let model: FieldModel = decode_model(&fs::read(input)?)?;
    fs::create_dir_all(out)?;
    Checkpoint { config: None, model }.save(&out.join("model.bin"))
}

#[derive(Serialize)]
struct EvalSummary {
    psnr: f64,
    resolution: u32,
}

fn cmd_eval(model: &Path, config: Option<&Path>) -> Result<()> {
    let ckpt = load_any(model)?;
    let config = match (config, ckpt.config) {
        (Some(p), _) => TrainConfig::from_toml(&read_text(p)?)?,
        (None, Some(c)) => c,
        (None, None) => {
            return Err(Error::Config(
                "model carries no configuration; pass --config".into(),
            ))
        }
    };
    let field = synth_field(config.field.kind, config.field.seed, config.field.channels)?;
    let psnr = evaluate(&ckpt.model, &field, config.eval.resolution)?;
    print_json(&EvalSummary {
        psnr,
        resolution: config.eval.resolution,
    })
}

fn cmd_sweep(run: &RunArgs, lambdas: &[f64], out: &Path) -> Result<()> {
    let config = run.resolve()?;
    let field = synth_field(config.field.kind, config.field.seed, config.field.channels)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml())?;
    let points = rd_sweep(&config, &field, lambdas, |p| {
        eprintln!(
            "lambda {:.2e}  bytes {}  psnr {:.3}  decoded {:.3}",
            p.lambda, p.bytes, p.psnr, p.decoded_psnr
        );
    })?;
    write_rd_csv(&points, fs::File::create(out.join("rd.csv"))?)?;
    write_rd_json(&points, fs::File::create(out.join("rd.json"))?)
}

fn cmd_gen_corpus(kind: &str, seed: u64, out: &Path) -> Result<()> {
    let kind: CorpusKind = kind.parse()?;
    let corpus = generate_corpus(kind, seed);
    fs::write(out, corpus.to_bytes())?;
    eprintln!("{} entries", corpus.entries());
    Ok(())
}

#[derive(Serialize)]
struct CorpusSummary {
    entries: usize,
    coded_bytes: usize,
    estimated_bits: f64,
    model_bytes: usize,
    levels: Vec<cnc_core::corpus::CorpusLevelReport>,
}

fn cmd_code_corpus(input: &Path, coding: CorpusCoding, seed: u64) -> Result<()> {
    let corpus = Corpus::from_bytes(&fs::read(input)?)?;
    let report = code_corpus(&corpus, coding, seed)?;
    print_json(&CorpusSummary {
        entries: corpus.entries(),
        coded_bytes: report.coded_bytes,
        estimated_bits: report.estimated_bits(),
        model_bytes: report.model_bytes,
        levels: report.levels,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Train { run, out } => cmd_train(run, out),
        Command::Encode { checkpoint, out } => cmd_encode(checkpoint, out),
        Command::Decode { input, out } => cmd_decode(input, out),
        Command::Eval { model, config } => cmd_eval(model, config.as_deref()),
        Command::Sweep { run, lambdas, out } => cmd_sweep(run, lambdas, out),
        Command::GenCorpus { kind, seed, out } => cmd_gen_corpus(kind, *seed, out),
        Command::CodeCorpus {
            input,
            context,
            context_levels,
            iterations,
            seed,
        } => {
            let coding = if *context {
                CorpusCoding::Context {
                    context_levels: *context_levels,
                    iterations: *iterations,
                }
            } else {
                CorpusCoding::Frequency
            };
            cmd_code_corpus(input, coding, *seed)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
