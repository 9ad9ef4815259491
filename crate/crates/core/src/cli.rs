//! Command-line interface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::bleu::bleu;
use crate::bundle::{Bundle, METRICS};
use crate::data::synthetic::{generate_synthetic, write_corpus, SyntheticConfig};
use crate::data::{load_corpus, tokenize};
use crate::dump::{dump_dialogue, validate};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::gradcheck::{check_piece, GradcheckReport, Piece};
use crate::model::{detokenize, prepare_all, summarize};
use crate::training::{train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "eedmn",
    version,
    about = "Entropy-enhanced dynamic memory network for scene-aware dialogue"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoint, configuration and metrics log.
    Train(TrainArgs),
    /// Score generated answers with corpus BLEU (smoothing: add1-zero-only,
    /// add-one on n ≥ 2 precisions only when they are zero).
    Eval(EvalArgs),
    /// Answer the final question of every dialogue with beam search.
    Generate(GenerateArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic scene-dialogue corpus.
    Synth(SynthArgs),
    /// Export attention weights, gates and fusion weights as JSON.
    DumpAttention(DumpArgs),
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// `literal` or `question-gated`.
    #[arg(long)]
    pub fusion: Option<FusionMode>,
    /// Train without feeding the previous answer state to the decoder.
    #[arg(long)]
    pub no_chain: bool,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Pretrained word vectors, one `token v1 … v_d` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with TrainConfig fields; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dialogue JSON file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model directory written by `train`.
    #[arg(long, requires = "data", conflicts_with_all = ["candidates", "references"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Text file of candidate answers, one per line.
    #[arg(long, requires = "references")]
    pub candidates: Option<PathBuf>,
    /// Text file of reference answers, one per line.
    #[arg(long, requires = "candidates")]
    pub references: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub max_n: usize,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write JSON results here in addition to printing one answer per line.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Random instances per piece.
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    /// One of affine, lstm, text-attention, dmn, fusion, decoder, pipeline, all.
    #[arg(long, default_value = "all")]
    pub piece: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub segments: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub feat_dim: usize,
    /// Segment questions per dialogue (a follow-up is added on top).
    #[arg(long)]
    pub questions: Option<usize>,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output JSON file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Load a config file (if any), then apply `DMN_SEED` and the flags.
pub fn resolve_config(
    path: Option<&Path>,
    o: &Overrides,
    env_seed: Option<String>,
) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Resolution {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = env_seed {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DMN_SEED `{s}` is not an unsigned integer")))?;
    }
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { cfg.$f = v; } )* };
    }
    set!(hidden, embed_dim, episodes, gamma, lr, batch_size, epochs, beam_width, max_len, seed,
         val_fraction, fusion, clip_norm, min_count);
    if o.no_chain {
        cfg.chain = false;
    }
    if o.embeddings.is_some() {
        cfg.embeddings = o.embeddings.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: &TrainArgs) -> Result<i32> {
    let cfg = resolve_config(
        a.config.as_deref(),
        &a.overrides,
        std::env::var("DMN_SEED").ok(),
    )?;
    let samples = load_corpus(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut log = fs::File::create(a.out.join(METRICS))?;
    let outcome = train(&samples, &cfg, |m| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        eprintln!(
            "epoch {:>3}  ce {:.4}  entropy {:.4}  total {:.4}  val_acc {}",
            m.epoch,
            m.ce,
            m.entropy,
            m.total,
            m.val_token_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        Ok(())
    })?;
    if let Some(c) = &outcome.coverage {
        eprintln!("embedding coverage {:.4} ({}/{})", c.fraction, c.found, c.total);
    }
    Bundle {
        model: outcome.model,
        store: outcome.store,
        vocab: outcome.vocab,
        train: cfg,
    }
    .save(&a.out)?;
    Ok(EXIT_OK)
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Resolution {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(text.lines().map(tokenize).collect())
}

#[derive(Serialize)]
struct GeneratedAnswer {
    id: String,
    question: String,
    answer: String,
    reference: String,
    log_prob: f64,
    normalized: f64,
}

fn generate_all(
    bundle: &Bundle,
    data: &Path,
    width: Option<usize>,
    max_len: Option<usize>,
) -> Result<Vec<GeneratedAnswer>> {
    let samples = load_corpus(data)?;
    let prepared = prepare_all(&samples, &bundle.vocab);
    let width = width.unwrap_or(bundle.train.beam_width);
    let max_len = max_len.unwrap_or(bundle.train.max_len);
    prepared
        .par_iter()
        .zip(&samples)
        .map(|(d, s)| {
            let hyp = bundle.model.generate(&bundle.store, d, width, max_len)?;
            let last = s.example.qa_pairs.last().expect("validated dialogue");
            Ok(GeneratedAnswer {
                id: d.id.clone(),
                question: last.question.join(" "),
                answer: detokenize(&bundle.vocab, &hyp.tokens).join(" "),
                reference: last.answer.join(" "),
                log_prob: hyp.log_prob,
                normalized: hyp.normalized,
            })
        })
        .collect()
}

fn run_eval(a: &EvalArgs) -> Result<i32> {
    let report = match (&a.model, &a.data, &a.candidates, &a.references) {
        (_, _, Some(c), Some(r)) => {
            let report = bleu(&read_lines(c)?, &read_lines(r)?, a.max_n)?;
            json!({ "bleu": report })
        }
        (Some(m), Some(d), _, _) => {
            let bundle = Bundle::load(m)?;
            let answers = generate_all(&bundle, d, a.beam_width, a.max_len)?;
            let cands: Vec<Vec<String>> = answers.iter().map(|g| tokenize(&g.answer)).collect();
            let refs: Vec<Vec<String>> = answers.iter().map(|g| tokenize(&g.reference)).collect();
            let report = bleu(&cands, &refs, a.max_n)?;
            let prepared = prepare_all(&load_corpus(d)?, &bundle.vocab);
            let records = bundle
                .model
                .evaluate(&bundle.store, &prepared, bundle.train.chain)?;
            json!({ "bleu": report, "teacher_forced": summarize(&records) })
        }
        _ => {
            return Err(Error::Config(
                "eval needs --model with --data, or --candidates with --references".into(),
            ))
        }
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(EXIT_OK)
}

fn run_generate(a: &GenerateArgs) -> Result<i32> {
    let bundle = Bundle::load(&a.model)?;
    let answers = generate_all(&bundle, &a.data, a.beam_width, a.max_len)?;
    for g in &answers {
        println!("{}", g.answer);
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&answers)?)?;
    }
    Ok(EXIT_OK)
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if !(a.tol > 0.0) {
        return Err(Error::Config("--tol must be positive".into()));
    }
    let pieces: Vec<Piece> = if a.piece == "all" {
        Piece::ALL.to_vec()
    } else {
        vec![a.piece.parse()?]
    };
    let mut reports: Vec<GradcheckReport> = Vec::new();
    for p in pieces {
        for t in 0..a.trials.max(1) {
            reports.push(check_piece(p, a.seed + t, a.tol)?);
        }
    }
    let passed = reports.iter().all(GradcheckReport::passed);
    let summary: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "piece": r.piece,
                "max_rel_error": r.max_rel_error(),
                "boundary": r.boundary_count(),
                "passed": r.passed(),
                "blocks": r.blocks,
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "tolerance": a.tol, "passed": passed, "reports": summary }))?
    );
    Ok(if passed { EXIT_OK } else { EXIT_FAILURE })
}

fn run_synth(a: &SynthArgs) -> Result<i32> {
    let mut cfg = SyntheticConfig::new(a.n, a.segments, a.feat_dim, a.seed);
    if let Some(q) = a.questions {
        cfg.segment_questions = q;
    }
    let data = generate_synthetic(&cfg)?;
    let path = write_corpus(&a.out, &data)?;
    eprintln!("wrote {} dialogues to {}", data.len(), path.display());
    Ok(EXIT_OK)
}

fn run_dump(a: &DumpArgs) -> Result<i32> {
    let bundle = Bundle::load(&a.model)?;
    let prepared = prepare_all(&load_corpus(&a.data)?, &bundle.vocab);
    let dumps = prepared
        .par_iter()
        .map(|d| {
            let dump = dump_dialogue(&bundle.model, &bundle.store, &bundle.vocab, d, bundle.train.chain)?;
            validate(&dump)?;
            Ok(dump)
        })
        .collect::<Result<Vec<_>>>()?;
    let text = serde_json::to_string_pretty(&dumps)?;
    match &a.out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(EXIT_OK)
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Generate(a) => run_generate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a),
        Command::DumpAttention(a) => run_dump(a),
    }
}

/// Parse `args` and run; returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.kind() == clap::error::ErrorKind::UnknownArgument {
                let mut cmd = Cli::command();
                let sub = args.get(1).and_then(|a| a.to_str()).unwrap_or_default();
                let help = match cmd.find_subcommand_mut(sub) {
                    Some(s) => s.render_help(),
                    None => cmd.render_help(),
                };
                eprintln!("\nvalid flags:\n{help}");
            }
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}
