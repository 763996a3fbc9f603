//! Teacher-forced training on oracle sequences, greedy decoding,
//! evaluation and checkpoints.
//!
//! A checkpoint is a directory holding `config` (JSON), `params.bin`,
//! `vocab.json`, `lexicon.tsv` and `actions.txt`.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amr::AmrGraph;
use crate::autodiff::{Tape, Tensor, Var};
use crate::corpus::{AlignedExample, Token};
use crate::model::{is_empty_marker, Model, ModelConfig, ModelError, ParseOutput, Pretrained, Vocab};
use crate::oracle::{collect_inventories, derive_actions, ActionInventory, InventorySet, NodeLexicon};
use crate::smatch::{corpus_score_with, CorpusScore, SmatchError};
use crate::transitions::{parse_action_lines, Action};

const MAGIC: &[u8; 8] = b"AMRSTACK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub clip_norm: f64,
    /// Non-improving dev evaluations tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub input_dropout: f64,
    pub smatch_restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.1,
            lr_decay: 0.95,
            clip_norm: 5.0,
            patience: 5,
            seed: 1,
            input_dropout: 0.0,
            smatch_restarts: 4,
        }
    }
}

/// Contents of the `config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Smatch(#[from] SmatchError),
    #[error("non-finite loss in epoch {epoch} on sentence {sentence}; the last good checkpoint was kept")]
    NonFinite { epoch: usize, sentence: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Outcome of [`train`]. `model` holds the parameters of the best epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: ModelConfig,
    pub epoch_losses: Vec<f64>,
    pub dev_smatch: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub model: Model,
}

/// Builds inventories, vocabulary and a freshly initialised model.
pub fn init_model(
    corpus: &[AlignedExample],
    config: ModelConfig,
    pretrained: Option<&Pretrained>,
    rng: &mut ChaCha8Rng,
) -> Result<(Model, Vec<Vec<Action>>), TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let sequences: Vec<Vec<Action>> = corpus.iter().map(|e| derive_actions(e).actions).collect();
    let inventory = collect_inventories(corpus.iter().zip(sequences.iter().map(Vec::as_slice)));
    let vocab = Vocab::build(corpus, &inventory, pretrained);
    let config = ModelConfig { pretrained_dim: pretrained.map(|p| p.dim), ..config };
    let model = Model::new(config, vocab, inventory, pretrained, rng)?;
    Ok((model, sequences))
}

/// Summed action and node cross-entropy of one teacher-forced sentence.
/// `None` when no step contributes a loss term.
pub fn sentence_loss<'m>(
    model: &'m Model,
    tape: &mut Tape<'m>,
    tokens: &[Token],
    actions: &[Action],
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Option<Var> {
    let mut enc = match dropout {
        Some((rate, rng)) => model.start_with_dropout(tape, tokens, rate, rng),
        None => model.start(tape, tokens),
    };
    let mut losses = Vec::new();
    for a in actions {
        if !enc.state.is_legal(a) {
            log::warn!("oracle action `{a}` is illegal under the model's state; truncating");
            break;
        }
        let s = enc.features(tape);
        let mask = enc.legal_mask();
        if let Some(i) = model.inventory.action_inventory.index_of(a).filter(|&i| mask[i]) {
            let logits = enc.action_logits(tape, s);
            losses.push(tape.softmax_cross_entropy(logits, i, Some(&mask)));
        }
        if let Action::Confirm(Some(c)) = a {
            let cands = enc.candidates();
            if let Some(ci) = model.vocab.concepts.get_index_of(c).filter(|ci| cands.contains(ci)) {
                if cands.len() > 1 {
                    let logits = enc.node_logits(tape, s);
                    let mask = enc.concept_mask(&cands);
                    losses.push(tape.softmax_cross_entropy(logits, ci, Some(&mask)));
                }
            }
        }
        enc.apply(tape, a);
    }
    (!losses.is_empty()).then(|| tape.sum(&losses))
}

/// One SGD pass over `order`. Returns the summed loss, or the position of
/// the first sentence whose loss was not finite.
pub fn train_epoch(
    model: &mut Model,
    corpus: &[AlignedExample],
    sequences: &[Vec<Action>],
    order: &[usize],
    lr: f64,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64, usize> {
    let mut total = 0.0;
    for &i in order {
        let grads = {
            let mut tape = Tape::new(&model.params);
            let dropout = (config.input_dropout > 0.0).then_some((config.input_dropout, &mut *rng));
            let Some(loss) = sentence_loss(model, &mut tape, &corpus[i].tokens, &sequences[i], dropout) else {
                continue;
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(i);
            }
            total += value;
            tape.backward(loss)
        };
        model.params.accumulate(&grads);
        let norm = model.params.sgd_step(lr, Some(config.clip_norm));
        if !norm.is_finite() {
            return Err(i);
        }
    }
    Ok(total)
}

/// Trains with per-epoch dev evaluation, keeping the parameters with the
/// best dev Smatch (written to `out` when given).
pub fn train(
    corpus: &[AlignedExample],
    dev: &[AlignedExample],
    model_config: ModelConfig,
    config: &TrainConfig,
    pretrained: Option<&Pretrained>,
    out: Option<&Path>,
) -> Result<TrainRun, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut model, sequences) = init_model(corpus, model_config, pretrained, &mut rng)?;
    let unreachable = corpus.iter().filter(|e| !derive_actions(e).reachable).count();
    if unreachable > 0 {
        log::info!("{unreachable} of {} training sentences are not fully reachable by the oracle", corpus.len());
    }
    let mut run = TrainRun {
        config: model.config.clone(),
        epoch_losses: Vec::new(),
        dev_smatch: Vec::new(),
        best_epoch: None,
        best_checkpoint: None,
        model: model.clone(),
    };
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        let loss = train_epoch(&mut model, corpus, &sequences, &order, lr, config, &mut rng)
            .map_err(|sentence| TrainError::NonFinite { epoch, sentence })?;
        run.epoch_losses.push(loss);
        // Without dev data the (negated) training loss selects the checkpoint.
        let score = if dev.is_empty() {
            -loss
        } else {
            let s = evaluate(&model, dev, config.smatch_restarts, 1)?.f1;
            run.dev_smatch.push(s);
            s
        };
        log::info!(
            "epoch {epoch}: loss {loss:.4}{}",
            if dev.is_empty() { String::new() } else { format!(", dev Smatch {score:.4}") }
        );
        if score > best {
            best = score;
            stale = 0;
            run.best_epoch = Some(epoch);
            run.model = model.clone();
            if let Some(dir) = out {
                save_checkpoint(&model, config, dir)?;
                run.best_checkpoint = Some(dir.to_path_buf());
            }
        } else {
            stale += 1;
            if stale >= config.patience {
                log::info!("no improvement for {stale} evaluations; stopping");
                break;
            }
        }
    }
    if run.best_epoch.is_none() {
        if let Some(dir) = out {
            save_checkpoint(&model, config, dir)?;
            run.best_checkpoint = Some(dir.to_path_buf());
        }
    }
    Ok(run)
}

pub fn parse_greedy(model: &Model, tokens: &[Token]) -> AmrGraph {
    model.parse(tokens).graph
}

/// Parses sentences on up to `jobs` threads; output order follows input order.
pub fn parse_all(model: &Model, sentences: &[Vec<Token>], jobs: usize) -> Vec<ParseOutput> {
    let jobs = jobs.clamp(1, sentences.len().max(1));
    if jobs == 1 {
        return sentences.iter().map(|s| model.parse(s)).collect();
    }
    let chunk = sentences.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sentences
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.parse(s)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("parser thread panicked")).collect()
    })
}

/// A parse that produced no node counts as an empty prediction.
pub fn prediction(output: &ParseOutput) -> Option<AmrGraph> {
    let empty = !output.rooted && is_empty_marker(&output.graph);
    (!empty).then(|| output.graph.clone())
}

pub fn evaluate(
    model: &Model,
    corpus: &[AlignedExample],
    restarts: usize,
    jobs: usize,
) -> Result<CorpusScore, SmatchError> {
    let sentences: Vec<Vec<Token>> = corpus.iter().map(|e| e.tokens.clone()).collect();
    let preds: Vec<Option<AmrGraph>> = parse_all(model, &sentences, jobs).iter().map(prediction).collect();
    let gold: Vec<AmrGraph> = corpus.iter().map(|e| e.graph.clone()).collect();
    corpus_score_with(&gold, &preds, restarts)
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format { path: path.to_path_buf(), message: message.into() }
}

fn config_json(model: &Model, train: &TrainConfig) -> String {
    let cfg = CheckpointConfig { format_version: FORMAT_VERSION, model: model.config.clone(), train: train.clone() };
    serde_json::to_string_pretty(&cfg).expect("config serialises") + "\n"
}

/// Serialised parameters: magic, version, config echo, then one record per
/// parameter (name, shape, little-endian `f64` values).
pub fn encode_params(model: &Model, train: &TrainConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = config_json(model, train);
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols as u64).to_le_bytes());
        for v in &p.value.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save_checkpoint(model: &Model, train: &TrainConfig, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))
    };
    write("config", config_json(model, train).as_bytes())?;
    write("vocab.json", (serde_json::to_string_pretty(&model.vocab).expect("vocab serialises") + "\n").as_bytes())?;
    write("lexicon.tsv", model.inventory.lexicon.to_tsv().as_bytes())?;
    write("actions.txt", model.inventory.actions_text().as_bytes())?;
    write("params.bin", &encode_params(model, train))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.path, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(Model, TrainConfig), CheckpointError> {
    let read = |name: &str| {
        let path = dir.join(name);
        fs::read_to_string(&path).map_err(io_err(&path))
    };
    let cfg_path = dir.join("config");
    let cfg: CheckpointConfig =
        serde_json::from_str(&read("config")?).map_err(|e| format_err(&cfg_path, e.to_string()))?;
    if cfg.format_version != FORMAT_VERSION {
        return Err(format_err(&cfg_path, format!("unsupported format version {}", cfg.format_version)));
    }
    let vocab_path = dir.join("vocab.json");
    let vocab: Vocab =
        serde_json::from_str(&read("vocab.json")?).map_err(|e| format_err(&vocab_path, e.to_string()))?;
    let lex_path = dir.join("lexicon.tsv");
    let lexicon = NodeLexicon::from_tsv(&read("lexicon.tsv")?).map_err(|e| format_err(&lex_path, e))?;
    let act_path = dir.join("actions.txt");
    let actions = parse_action_lines(&read("actions.txt")?).map_err(|e| format_err(&act_path, e.0))?;
    let inventory = InventorySet::from_parts(ActionInventory::new(actions), lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg.model.clone(), vocab, inventory, None, &mut rng)?;

    let path = dir.join("params.bin");
    let mut bytes = Vec::new();
    fs::File::open(&path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(&path))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path: &path };
    if r.take(8)? != MAGIC {
        return Err(format_err(&path, "not a parameter file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(&path, format!("unsupported format version {version}")));
    }
    let echo_len = r.u32()? as usize;
    let echo: CheckpointConfig =
        serde_json::from_slice(r.take(echo_len)?).map_err(|e| format_err(&path, format!("config echo: {e}")))?;
    if echo.model != cfg.model {
        return Err(format_err(&path, "config echo does not match the config file"));
    }
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(format_err(&path, format!("{count} parameters stored, model has {}", model.params.len())));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| format_err(&path, "parameter name is not UTF-8"))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| format_err(&path, "shape overflow"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| format_err(&path, "shape overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.params.set_value(&name, Tensor { rows, cols, data }).map_err(|e| format_err(&path, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(format_err(&path, "trailing bytes"));
    }
    Ok((model, cfg.train))
}
