use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use swishrnn::bench::{run_bench, BenchConfig, MIN_REPS, MIN_WARMUP};
use swishrnn::data::{read_documents, BatchIterator, Corpus, Vocab};
use swishrnn::gradcheck::{run_suite, tiny_config, TOLERANCE};
use swishrnn::training::{
    evaluate, load_checkpoint, save_checkpoint, train_loop, AdamState, MetricsWriter, TrainHyper,
};
use swishrnn::{EncoderModel, Error, ModelConfig, Result, Variant};

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "swishrnn", version, about = "SwishRNN encoder pretraining and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-LM pretraining; writes metrics, checkpoints and the vocabulary.
    Pretrain(PretrainArgs),
    /// Finite-difference gradient check of every block and a small model.
    Gradcheck(GradcheckArgs),
    /// Per-layer timing of the FFN block against the recurrent block.
    Bench(BenchArgs),
    /// Held-out masked-LM loss of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Args)]
struct PretrainArgs {
    /// Run config: `{"model": {...}, "train": {...}}`.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// Existing vocabulary file; built from the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Save a checkpoint every this many steps (0 saves only the final one).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    #[arg(long, default_value_t = 50)]
    log_every: u64,
    /// Fraction of documents held out and evaluated after training.
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model config JSON. Defaults to the 2-layer d=8 test model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
    #[arg(long, default_value_t = 768)]
    d: usize,
    #[arg(long, default_value_t = 2048)]
    d_prime: usize,
    #[arg(long, default_value_t = 3072)]
    d_ffn: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    step_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    schedule: Vec<usize>,
    #[arg(long, default_value_t = MIN_WARMUP)]
    warmup: usize,
    #[arg(long, default_value_t = MIN_REPS)]
    reps: usize,
    /// Also time forward+backward.
    #[arg(long)]
    backward: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Evaluate only the last fraction of documents (1 uses the whole corpus).
    #[arg(long, default_value_t = 1.0)]
    holdout: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    /// Seed of the evaluation masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    #[serde(default)]
    train: TrainHyper,
}

/// Either a library error or a failed check with its message.
enum Failure {
    Lib(Error),
    Usage(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Checkpoint(_) => EXIT_IO,
        Error::Config(_) | Error::Input(_) | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_VERIFY,
    }
}

fn require_precision(cmd: &str, got: Precision, want: Precision) -> CmdResult {
    if got == want {
        Ok(())
    } else {
        Err(Failure::Usage(
            format!("{cmd} runs in {want:?} only, got --precision {got:?}").to_lowercase(),
        ))
    }
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    let docs = read_documents(path)?;
    if docs.is_empty() {
        return Err(Error::Input(format!("{} contains no documents", path.display())));
    }
    Ok(docs)
}

fn write_report(out: Option<&Path>, csv: &str) -> Result<()> {
    match out {
        Some(path) => Ok(fs::write(path, csv)?),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_pretrain(args: &PretrainArgs) -> CmdResult {
    require_precision("pretrain", args.precision, Precision::F32)?;
    if !(0.0..1.0).contains(&args.holdout) {
        return Err(Failure::Usage(format!(
            "--holdout must be in [0, 1), got {}",
            args.holdout
        )));
    }
    let text = fs::read_to_string(&args.config).map_err(Error::from)?;
    let mut run: RunConfig = serde_json::from_str(&text).map_err(Error::from)?;
    if let Some(v) = args.variant {
        run.model.variant = v;
    }
    if let Some(s) = args.steps {
        run.train.total_steps = s;
        run.train.warmup_steps = run.train.warmup_steps.min(s);
    }
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }

    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let docs = read_corpus(&args.corpus)?;
    let vocab = match &args.vocab {
        Some(path) => Vocab::load(path)?,
        None => {
            let vocab = Vocab::build(&docs, run.model.vocab_size)?;
            log::info!("built vocabulary of {} tokens", vocab.len());
            vocab
        }
    };
    if vocab.len() > run.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens but the model allows {}",
            vocab.len(),
            run.model.vocab_size
        ))
        .into());
    }
    if vocab.len() < run.model.vocab_size {
        log::warn!(
            "corpus supports only {} tokens; shrinking the model vocabulary",
            vocab.len()
        );
        run.model.vocab_size = vocab.len();
    }
    run.model.validate()?;
    run.train.validate()?;
    vocab.save(&args.out.join("vocab.txt"))?;
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&run).map_err(Error::from)?,
    )
    .map_err(Error::from)?;

    let corpus = Corpus::from_documents(&docs, &vocab);
    let (train_corpus, held_out) = if args.holdout > 0.0 {
        let (a, b) = corpus.split_tail(args.holdout);
        (a, Some(b))
    } else {
        (corpus, None)
    };
    log::info!(
        "{} variant, {} documents, {} tokens",
        run.model.variant,
        train_corpus.documents.len(),
        train_corpus.num_tokens()
    );

    let mut model = EncoderModel::<f32>::new(&run.model, run.train.seed)?;
    let mut state = AdamState::new(&model.store);
    let mut batches = BatchIterator::new(&train_corpus, run.train.seq_len, run.train.batch_size, run.train.seed)?;
    let metrics_path = args.out.join("metrics.csv");
    if metrics_path.exists() {
        fs::remove_file(&metrics_path).map_err(Error::from)?;
    }
    let mut metrics = MetricsWriter::open(&metrics_path)?;
    log::info!("{} parameters, {} steps", model.num_params(), run.train.total_steps);

    let summary = train_loop(&mut model, &mut state, &mut batches, &run.train, |rec, model, state| {
        metrics.write(rec)?;
        if args.log_every > 0 && rec.step % args.log_every == 0 {
            log::info!(
                "step {} loss {:.4} lr {:.3e} {:.1}s",
                rec.step,
                rec.loss,
                rec.lr,
                rec.wall_ms / 1e3
            );
            metrics.flush()?;
        }
        if args.checkpoint_every > 0 && rec.step % args.checkpoint_every == 0 {
            save_checkpoint(&args.out.join(format!("checkpoint-{:06}.bin", rec.step)), model, state)?;
        }
        Ok(())
    })?;
    metrics.flush()?;
    save_checkpoint(&args.out.join("checkpoint.bin"), &model, &state)?;
    if summary.skipped_sequences > 0 {
        log::warn!("{} sequences had no maskable tokens", summary.skipped_sequences);
    }
    if let (Some(first), Some(last)) = (summary.initial_loss(), summary.final_loss(50)) {
        log::info!("loss {first:.4} -> {last:.4} (mean of last 50 steps)");
    }
    if let Some(held_out) = held_out {
        let batches = BatchIterator::new(&held_out, run.train.seq_len, run.train.batch_size, 0)?;
        let n = batches.batches_per_epoch();
        let (loss, count) = evaluate(&model, batches.take(n), run.train.mask_rate, 0)?;
        log::info!("held-out loss {loss:.4} over {count} masked tokens");
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    require_precision("gradcheck", args.precision, Precision::F64)?;
    let mut config = match &args.config {
        Some(path) => ModelConfig::load(path)?,
        None => tiny_config(Variant::Swish),
    };
    if let Some(v) = args.variant {
        config.variant = v;
    }
    config.validate()?;
    let report = run_suite(&config, args.seed)?;
    println!("block,group,coords,max_rel_err");
    for g in &report.groups {
        println!("{},{},{},{:.3e}", g.block, g.group, g.coords, g.max_rel_err);
    }
    let worst = report.max_rel_err();
    eprintln!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    if report.passed(TOLERANCE) {
        Ok(())
    } else {
        Err(Failure::Verify(format!(
            "gradient check failed: {worst:.3e} > {TOLERANCE:e}"
        )))
    }
}

fn cmd_bench(args: &BenchArgs) -> CmdResult {
    require_precision("bench", args.precision, Precision::F32)?;
    let cfg = BenchConfig {
        seq_len: args.seq_len,
        d: args.d,
        d_prime: args.d_prime,
        d_ffn: args.d_ffn,
        steps: args.step_sizes.clone(),
        schedule: args.schedule.clone(),
        warmup: args.warmup,
        reps: args.reps,
        backward: args.backward,
        seed: args.seed,
    };
    let report = run_bench(&cfg)?;
    eprint!("{}", report.table());
    if let Some(o) = report.scan_ordering() {
        eprintln!(
            "scan medians (ms): k=1 {:.3}, k=2 {:.3}, k=4 {:.3}, schedule {:.3}; t4<=t2<=t1 {}, schedule strictly between {}",
            o.t1,
            o.t2,
            o.t4,
            o.schedule,
            o.monotone(),
            o.schedule_between()
        );
    }
    eprintln!("reference whole-model pretraining time vs baseline at full scale: 1.4x (k=1), 1.2x ([1,2,4])");
    write_report(args.out.as_deref(), &report.to_csv())?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    require_precision("eval", args.precision, Precision::F32)?;
    if !(args.holdout > 0.0 && args.holdout <= 1.0) {
        return Err(Failure::Usage(format!(
            "--holdout must be in (0, 1], got {}",
            args.holdout
        )));
    }
    let (model, _) = load_checkpoint(&args.checkpoint)?;
    let vocab = Vocab::load(&args.vocab)?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            model.config.vocab_size
        ))
        .into());
    }
    let docs = read_corpus(&args.corpus)?;
    let corpus = Corpus::from_documents(&docs, &vocab);
    let corpus = if args.holdout < 1.0 {
        corpus.split_tail(args.holdout).1
    } else {
        corpus
    };
    let seq_len = args.seq_len.unwrap_or(model.config.max_seq_len);
    let batches = BatchIterator::new(&corpus, seq_len, args.batch_size, 0)?;
    let n = batches.batches_per_epoch();
    let (loss, count) = evaluate(&model, batches.take(n), args.mask_rate, args.seed)?;
    let csv = format!("loss,perplexity,masked_tokens\n{loss:.6},{:.4},{count}\n", loss.exp());
    write_report(args.out.as_deref(), &csv)?;
    Ok(())
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Verify(msg)) => {
            eprintln!("{msg}");
            EXIT_VERIFY
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os()))
}

#[cfg(test)]
mod tests;
