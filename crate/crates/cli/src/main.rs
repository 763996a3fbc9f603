use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amrstack::amr::{parse_penman_document, serialize_penman};
use amrstack::corpus::{
    fallback_align, metadata_field, read_conll_annotations, read_corpus, tokens_from_surfaces, AlignedExample, Token,
};
use amrstack::model::{is_empty_marker, read_embeddings, ModelConfig};
use amrstack::oracle::derive_actions;
use amrstack::smatch::{corpus_score, smatch_score, CorpusScore, DEFAULT_RESTARTS};
use amrstack::to_triples;
use amrstack::trainer::{self, load_checkpoint, parse_all, TrainConfig, TrainError};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "amrstack", version, about = "Transition-based AMR parser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an aligned corpus.
    Train(TrainArgs),
    /// Parse tokenized sentences into PENMAN graphs.
    Parse(ParseArgs),
    /// Score predicted graphs against gold graphs with Smatch.
    Eval(EvalArgs),
    /// Print oracle action sequences for an aligned corpus.
    Oracle(OracleArgs),
    /// Print parameter names and shapes of a model.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Pretrained word vectors (`<count> <dim>` header).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// POS/dependency annotations for the training corpus.
    #[arg(long)]
    conll: Option<PathBuf>,
    /// POS/dependency annotations for the dev corpus.
    #[arg(long)]
    dev_conll: Option<PathBuf>,
    #[arg(long)]
    use_pos: bool,
    #[arg(long)]
    use_dep: bool,
    /// Drop the character-level word encoder.
    #[arg(long)]
    no_chars: bool,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    model: PathBuf,
    /// One tokenized sentence per line, or an AMR file with `::tok`/`::snt` lines.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    conll: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Add alignments for nodes the corpus leaves unaligned.
    #[arg(long)]
    fallback_align: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
}

/// Failures that are bugs or numerical breakdowns rather than bad input.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn check_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn load_corpus(path: &Path, conll: Option<&Path>) -> Result<Vec<AlignedExample>> {
    let corpus = read_corpus(path)?;
    match conll {
        Some(c) => Ok(read_conll_annotations(c, corpus)?),
        None => Ok(corpus),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let TrainArgs { corpus, dev, embeddings, conll, dev_conll, use_pos, use_dep, no_chars, epochs, out, seed } = args;
    for p in [Some(&corpus), Some(&dev), embeddings.as_ref(), conll.as_ref(), dev_conll.as_ref()].into_iter().flatten()
    {
        check_file(p)?;
    }
    if (use_pos || use_dep) && conll.is_none() {
        log::warn!("--use-pos/--use-dep without --conll: every token gets the unknown tag");
    }
    let train_set = load_corpus(&corpus, conll.as_deref())?;
    let dev_set = load_corpus(&dev, dev_conll.as_deref())?;
    let pretrained = embeddings.as_deref().map(read_embeddings).transpose()?;
    let model_config = ModelConfig { use_chars: !no_chars, use_pos, use_dep, ..ModelConfig::default() };
    let config = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let run =
        trainer::train(&train_set, &dev_set, model_config, &config, pretrained.as_ref(), Some(&out)).map_err(|e| {
            match e {
                TrainError::NonFinite { .. } => anyhow::Error::new(Internal(e.to_string())),
                e => e.into(),
            }
        })?;
    let best = run.best_epoch.map_or("none".to_string(), |e| (e + 1).to_string());
    let dev_best = run.best_epoch.and_then(|e| run.dev_smatch.get(e)).copied();
    println!(
        "epochs {} best {} dev F1 {} checkpoint {}",
        run.epoch_losses.len(),
        best,
        dev_best.map_or("n/a".into(), |f| format!("{f:.4}")),
        out.display()
    );
    Ok(())
}

/// Tokenized sentences from plain lines or from AMR metadata.
fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let has_meta = text.lines().any(|l| l.starts_with("# ::tok") || l.starts_with("# ::snt"));
    if !has_meta {
        return Ok(text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().map(String::from).collect())
            .collect());
    }
    let mut out = Vec::new();
    for block in amrstack::amr::split_blocks(&text) {
        let field = |name: &str| {
            block
                .comments
                .iter()
                .find_map(|c| metadata_field(c, name))
                .map(|v| v.split_whitespace().map(String::from).collect())
        };
        if let Some(tokens) = field("tok").or_else(|| field("snt")) {
            out.push(tokens);
        }
    }
    Ok(out)
}

fn parse(args: ParseArgs) -> Result<()> {
    let ParseArgs { model, input, output, conll, jobs } = args;
    check_file(&input)?;
    if !model.is_dir() {
        bail!("{}: not a model directory", model.display());
    }
    let (model, _) = load_checkpoint(&model)?;
    let sentences = read_sentences(&input)?;
    let mut tokens: Vec<Vec<Token>> = sentences.iter().map(|s| tokens_from_surfaces(s)).collect();
    if let Some(c) = conll {
        let graphs =
            tokens.iter().map(|t| AlignedExample::new(t.clone(), amrstack::AmrGraph::single("x", "x"))).collect();
        tokens = read_conll_annotations(c, graphs)?.into_iter().map(|e| e.tokens).collect();
    }
    let outputs = parse_all(&model, &tokens, jobs.max(1));
    let mut text = String::new();
    for (words, out) in sentences.iter().zip(&outputs) {
        writeln!(text, "# ::snt {}", words.join(" "))?;
        text.push_str(&serialize_penman(&out.graph));
        text.push_str("\n\n");
    }
    fs::write(&output, text).with_context(|| format!("cannot write {}", output.display()))?;
    let fallbacks = outputs.iter().filter(|o| !o.rooted || !o.complete).count();
    if fallbacks > 0 {
        log::warn!("{fallbacks} sentence(s) needed a fallback root or hit the step limit");
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let EvalArgs { gold, pred, jobs } = args;
    check_file(&gold)?;
    check_file(&pred)?;
    let read = |p: &Path| -> Result<_> {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        parse_penman_document(&text).with_context(|| format!("{}", p.display()))
    };
    let (gold, pred) = (read(&gold)?, read(&pred)?);
    if gold.len() != pred.len() {
        bail!("gold has {} graphs, prediction has {}", gold.len(), pred.len());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let counts: Vec<(usize, usize, usize)> = pool.install(|| {
        gold.par_iter()
            .zip(&pred)
            .map(|(g, p)| {
                if is_empty_marker(p) {
                    return (0, to_triples(g).len(), 0);
                }
                let r = smatch_score(g, p, DEFAULT_RESTARTS);
                (r.matched, r.gold_triples, r.pred_triples)
            })
            .collect()
    });
    let (m, g, p) = counts.iter().fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let score = CorpusScore::from_counts(m, g, p);
    println!("P {:.4} R {:.4} F1 {:.4}", score.precision, score.recall, score.f1);
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<()> {
    let OracleArgs { corpus, fallback_align: fallback } = args;
    check_file(&corpus)?;
    let mut examples = read_corpus(&corpus)?;
    if fallback {
        examples = examples.into_iter().map(fallback_align).collect();
    }
    let mut out = String::new();
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for ex in &examples {
        let r = derive_actions(ex);
        for a in &r.actions {
            writeln!(out, "{a}")?;
        }
        writeln!(out, "# reachable={} skipped={}", r.reachable, r.skipped_triples)?;
        out.push('\n');
        gold.push(ex.graph.clone());
        pred.push(r.graph);
    }
    let score = corpus_score(&gold, &pred)?;
    writeln!(out, "# oracle smatch P {:.4} R {:.4} F1 {:.4}", score.precision, score.recall, score.f1)?;
    print!("{out}");
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    let InspectArgs { model } = args;
    if !model.is_dir() {
        bail!("{}: not a model directory", model.display());
    }
    let (m, train) = load_checkpoint(&model)?;
    for (_, p) in m.params.iter() {
        println!("{}\t{}x{}{}", p.name, p.value.rows, p.value.cols, if p.trainable { "" } else { "\tfrozen" });
    }
    println!(
        "# parameters {} trainable {} actions {} lexicon words {} seed {}",
        m.parameter_count(),
        m.trainable_parameter_count(),
        m.inventory.action_inventory.len(),
        m.inventory.lexicon.len(),
        train.seed
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Parse(a) => parse(a),
        Command::Eval(a) => eval(a),
        Command::Oracle(a) => oracle(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Internal>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
        Err(_) => ExitCode::from(2),
    }
}
