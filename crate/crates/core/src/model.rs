//! Stack-LSTM parser state encoder.
//!
//! Three stack LSTMs summarise the stack, the buffer and the action history.
//! Their outputs feed a ReLU state layer, then two tanh layers: one scores
//! the action inventory, the other scores concepts when the chosen action is
//! CONFIRM. Item embeddings are recomposed whenever an action changes an item
//! (CONFIRM, ENTITY, MERGE, DEPENDENT, arcs).

use std::collections::VecDeque;
use std::io::BufRead;
use std::path::Path;

use indexmap::IndexSet;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amr::AmrGraph;
use crate::autodiff::{masked_softmax, Lstm, ParamError, ParamId, ParamStore, StackLstm, Tape, Tensor, Var};
use crate::corpus::{AlignedExample, Head, Token};
use crate::oracle::InventorySet;
use crate::transitions::{step_limit, Action, ParserState, StackItem, ROOT_LABEL};

pub const UNK: &str = "<unk>";

/// Concept of the placeholder graph written for sentences that produced no node.
pub const EMPTY_CONCEPT: &str = "amr-empty";

/// Whether `graph` is the placeholder for an empty parse.
pub fn is_empty_marker(graph: &AmrGraph) -> bool {
    graph.nodes.len() == 1
        && graph.edges.is_empty()
        && graph.attributes.is_empty()
        && graph.root_concept() == EMPTY_CONCEPT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub pos_dim: usize,
    pub deprel_dim: usize,
    pub action_dim: usize,
    pub concept_dim: usize,
    pub relation_dim: usize,
    pub lstm_hidden: usize,
    pub state_dim: usize,
    pub use_chars: bool,
    pub use_pos: bool,
    pub use_dep: bool,
    /// Width of the pretrained table, when one is used.
    pub pretrained_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            token_dim: 100,
            word_dim: 100,
            char_dim: 25,
            char_hidden: 50,
            pos_dim: 12,
            deprel_dim: 12,
            action_dim: 20,
            concept_dim: 20,
            relation_dim: 20,
            lstm_hidden: 100,
            state_dim: 100,
            use_chars: true,
            use_pos: false,
            use_dep: false,
            pretrained_dim: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("embeddings: {0}")]
    Io(#[from] std::io::Error),
    #[error("embeddings line {line}: {message}")]
    Embeddings { line: usize, message: String },
    #[error("the action inventory is empty")]
    EmptyInventory,
}

/// Fixed word vectors read from a text file.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub words: IndexSet<String>,
    pub dim: usize,
    /// `words.len() x dim`, row-major.
    pub table: Vec<f64>,
}

/// Reads `<count> <dim>` followed by one `word v1 .. vdim` line per word.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Pretrained, ModelError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines().enumerate();
    let bad = |line: usize, message: &str| ModelError::Embeddings { line, message: message.into() };
    let (_, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let header = header?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| bad(1, "header must be `<count> <dim>`"))?;
    let [count, dim] = dims[..] else { return Err(bad(1, "header must be `<count> <dim>`")) };
    if dim == 0 {
        return Err(bad(1, "dimension must be positive"));
    }
    let mut words = IndexSet::new();
    let mut table = Vec::with_capacity(count * dim);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line");
        let values: Vec<f64> =
            parts.map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(i + 1, "non-numeric value"))?;
        if values.len() != dim {
            return Err(bad(i + 1, &format!("expected {dim} values, found {}", values.len())));
        }
        if !words.insert(word.to_string()) {
            log::warn!("duplicate embedding for `{word}` on line {}; keeping the first", i + 1);
            continue;
        }
        table.extend(values);
    }
    if words.len() != count {
        log::warn!("embedding header announces {count} words, file has {}", words.len());
    }
    Ok(Pretrained { words, dim, table })
}

/// Symbol tables. Index 0 of every table except `pretrained` is [`UNK`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub words: IndexSet<String>,
    pub chars: IndexSet<char>,
    pub pos: IndexSet<String>,
    pub deprels: IndexSet<String>,
    pub concepts: IndexSet<String>,
    pub relations: IndexSet<String>,
    pub pretrained: IndexSet<String>,
}

fn with_unk() -> IndexSet<String> {
    IndexSet::from([UNK.to_string()])
}

impl Vocab {
    pub fn build(corpus: &[AlignedExample], inventory: &InventorySet, pretrained: Option<&Pretrained>) -> Self {
        let mut v = Vocab {
            words: with_unk(),
            chars: IndexSet::from(['\u{0}']),
            pos: with_unk(),
            deprels: with_unk(),
            concepts: with_unk(),
            relations: with_unk(),
            pretrained: pretrained.map(|p| p.words.clone()).unwrap_or_default(),
        };
        for t in corpus.iter().flat_map(|e| &e.tokens) {
            v.words.insert(t.surface.to_lowercase());
            v.chars.extend(t.surface.chars());
            if let Some(p) = &t.pos {
                v.pos.insert(p.clone());
            }
            if let Some(d) = &t.deprel {
                v.deprels.insert(d.clone());
            }
        }
        v.concepts.extend(inventory.lexicon.concepts());
        v.concepts.extend(inventory.entity_labels.iter().cloned());
        v.concepts.extend(inventory.dependent_pairs.iter().map(|(_, d)| d.clone()));
        v.relations.insert(ROOT_LABEL.to_string());
        for a in inventory.action_inventory.actions() {
            if let Action::LeftArc(l) | Action::RightArc(l) | Action::Dependent(l, _) = a {
                v.relations.insert(l.clone());
            }
        }
        v
    }

    fn index(set: &IndexSet<String>, key: &str) -> usize {
        set.get_index_of(key).unwrap_or(0)
    }
}

/// Which of the two top stack items heads the other in the input's
/// dependency tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepFeature {
    TopHeadsSecond = 0,
    SecondHeadsTop = 1,
    NoArc = 2,
}

pub fn dependency_feature(state: &ParserState, heads: &[Option<usize>]) -> DepFeature {
    let (Some(top), Some(second)) = (state.top(), state.second()) else { return DepFeature::NoArc };
    let heads_any = |h: &StackItem, d: &StackItem| {
        d.span.iter().any(|&i| heads.get(i).copied().flatten().is_some_and(|j| h.span.contains(&j)))
    };
    if heads_any(top, second) {
        DepFeature::TopHeadsSecond
    } else if heads_any(second, top) {
        DepFeature::SecondHeadsTop
    } else {
        DepFeature::NoArc
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    word_table: Option<ParamId>,
    pretrained: Option<ParamId>,
    pretrained_unk: Option<ParamId>,
    char_table: Option<ParamId>,
    char_fwd: Option<Lstm>,
    char_bwd: Option<Lstm>,
    pos_table: Option<ParamId>,
    deprel_table: Option<ParamId>,
    token_w: ParamId,
    token_b: ParamId,
    root_item: ParamId,
    stack: Lstm,
    buffer: Lstm,
    history: Lstm,
    empty_stack: ParamId,
    empty_buffer: ParamId,
    empty_history: ParamId,
    action_table: ParamId,
    dep_table: Option<ParamId>,
    state_w: ParamId,
    state_b: ParamId,
    action_bridge_w: ParamId,
    action_bridge_b: ParamId,
    node_bridge_w: ParamId,
    node_bridge_b: ParamId,
    action_out_w: ParamId,
    action_out_b: ParamId,
    node_out_w: ParamId,
    node_out_b: ParamId,
    concept_table: ParamId,
    relation_table: ParamId,
    confirm_w: ParamId,
    confirm_b: ParamId,
    dependent_w: ParamId,
    dependent_b: ParamId,
    arc_w: ParamId,
    arc_b: ParamId,
    merge_w: ParamId,
    merge_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub inventory: InventorySet,
    pub params: ParamStore,
    ids: Ids,
}

/// Concept produced for a word the lexicon has never seen.
pub fn surface_concept(surface: &str) -> String {
    let c: String = surface
        .to_lowercase()
        .chars()
        .map(|ch| if ch.is_whitespace() || "()/:\"~^".contains(ch) { '-' } else { ch })
        .collect();
    if c.trim_matches('-').is_empty() {
        "thing".into()
    } else {
        c
    }
}

impl Model {
    /// Registers every parameter with Glorot-initialised values.
    pub fn new<R: Rng>(
        config: ModelConfig,
        vocab: Vocab,
        inventory: InventorySet,
        pretrained: Option<&Pretrained>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        if inventory.action_inventory.is_empty() {
            return Err(ModelError::EmptyInventory);
        }
        let c = &config;
        let mut s = ParamStore::new();
        let add = |s: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R| {
            s.add(name, Tensor::glorot(rows, cols, rng))
        };
        let mut input_dim = 0;
        let (mut char_table, mut char_fwd, mut char_bwd) = (None, None, None);
        if c.use_chars {
            char_table = Some(add(&mut s, "char.table", vocab.chars.len(), c.char_dim, rng)?);
            char_fwd = Some(Lstm::register(&mut s, "char.fwd", c.char_dim, c.char_hidden, rng)?);
            char_bwd = Some(Lstm::register(&mut s, "char.bwd", c.char_dim, c.char_hidden, rng)?);
            input_dim += 2 * c.char_hidden;
        }
        let (mut pretrained_id, mut pretrained_unk) = (None, None);
        if let Some(dim) = c.pretrained_dim {
            let rows = vocab.pretrained.len();
            let table = match pretrained {
                Some(p) => Tensor { rows, cols: dim, data: p.table.clone() },
                None => Tensor::zeros(rows, dim),
            };
            pretrained_id = Some(s.add_frozen("pretrained.table", table)?);
            pretrained_unk = Some(add(&mut s, "pretrained.unk", dim, 1, rng)?);
            input_dim += dim;
        }
        let mut word_table = None;
        if !c.use_chars || c.pretrained_dim.is_none() {
            word_table = Some(add(&mut s, "word.table", vocab.words.len(), c.word_dim, rng)?);
            input_dim += c.word_dim;
        }
        let pos_table = if c.use_pos { Some(add(&mut s, "pos.table", vocab.pos.len(), c.pos_dim, rng)?) } else { None };
        if c.use_pos {
            input_dim += c.pos_dim;
        }
        let deprel_table =
            if c.use_dep { Some(add(&mut s, "deprel.table", vocab.deprels.len(), c.deprel_dim, rng)?) } else { None };
        if c.use_dep {
            input_dim += c.deprel_dim;
        }
        let token_w = add(&mut s, "token.w", c.token_dim, input_dim, rng)?;
        let token_b = s.add("token.b", Tensor::zeros(c.token_dim, 1))?;
        let root_item = add(&mut s, "root.item", c.token_dim, 1, rng)?;
        let h = c.lstm_hidden;
        let stack = Lstm::register(&mut s, "stack", c.token_dim, h, rng)?;
        let buffer = Lstm::register(&mut s, "buffer", c.token_dim, h, rng)?;
        let history = Lstm::register(&mut s, "history", c.action_dim, h, rng)?;
        let empty_stack = add(&mut s, "stack.empty", h, 1, rng)?;
        let empty_buffer = add(&mut s, "buffer.empty", h, 1, rng)?;
        let empty_history = add(&mut s, "history.empty", h, 1, rng)?;
        let n_actions = inventory.action_inventory.len();
        let action_table = add(&mut s, "action.table", n_actions + 1, c.action_dim, rng)?;
        let dep_table = if c.use_dep { Some(add(&mut s, "depfeat.table", 3, c.deprel_dim, rng)?) } else { None };
        let state_in = 3 * h + if c.use_dep { c.deprel_dim } else { 0 };
        let state_w = add(&mut s, "state.w", c.state_dim, state_in, rng)?;
        let state_b = s.add("state.b", Tensor::zeros(c.state_dim, 1))?;
        let action_bridge_w = add(&mut s, "action.bridge.w", c.state_dim, c.state_dim, rng)?;
        let action_bridge_b = s.add("action.bridge.b", Tensor::zeros(c.state_dim, 1))?;
        let node_bridge_w = add(&mut s, "node.bridge.w", c.state_dim, c.state_dim, rng)?;
        let node_bridge_b = s.add("node.bridge.b", Tensor::zeros(c.state_dim, 1))?;
        let action_out_w = add(&mut s, "action.out.w", n_actions, c.state_dim, rng)?;
        let action_out_b = s.add("action.out.b", Tensor::zeros(n_actions, 1))?;
        let n_concepts = vocab.concepts.len();
        let node_out_w = add(&mut s, "node.out.w", n_concepts, c.state_dim, rng)?;
        let node_out_b = s.add("node.out.b", Tensor::zeros(n_concepts, 1))?;
        let concept_table = add(&mut s, "concept.table", n_concepts, c.concept_dim, rng)?;
        let relation_table = add(&mut s, "relation.table", vocab.relations.len(), c.relation_dim, rng)?;
        let t = c.token_dim;
        let confirm_w = add(&mut s, "compose.confirm.w", t, t + c.concept_dim, rng)?;
        let confirm_b = s.add("compose.confirm.b", Tensor::zeros(t, 1))?;
        let dependent_w = add(&mut s, "compose.dependent.w", t, t + c.relation_dim + c.concept_dim, rng)?;
        let dependent_b = s.add("compose.dependent.b", Tensor::zeros(t, 1))?;
        let arc_w = add(&mut s, "compose.arc.w", t, 2 * t + c.relation_dim, rng)?;
        let arc_b = s.add("compose.arc.b", Tensor::zeros(t, 1))?;
        let merge_w = add(&mut s, "compose.merge.w", t, 2 * t, rng)?;
        let merge_b = s.add("compose.merge.b", Tensor::zeros(t, 1))?;
        let ids = Ids {
            word_table,
            pretrained: pretrained_id,
            pretrained_unk,
            char_table,
            char_fwd,
            char_bwd,
            pos_table,
            deprel_table,
            token_w,
            token_b,
            root_item,
            stack,
            buffer,
            history,
            empty_stack,
            empty_buffer,
            empty_history,
            action_table,
            dep_table,
            state_w,
            state_b,
            action_bridge_w,
            action_bridge_b,
            node_bridge_w,
            node_bridge_b,
            action_out_w,
            action_out_b,
            node_out_w,
            node_out_b,
            concept_table,
            relation_table,
            confirm_w,
            confirm_b,
            dependent_w,
            dependent_b,
            arc_w,
            arc_b,
            merge_w,
            merge_b,
        };
        Ok(Model { config, vocab, inventory, params: s, ids })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Starts encoding one sentence on `tape`.
    pub fn start<'m>(&'m self, tape: &mut Tape<'m>, tokens: &[Token]) -> Encoder<'m> {
        Encoder::new(self, tape, tokens, None)
    }

    /// Like [`Model::start`], zeroing each token-embedding unit with
    /// probability `rate` (inverted dropout).
    pub fn start_with_dropout<'m>(
        &'m self,
        tape: &mut Tape<'m>,
        tokens: &[Token],
        rate: f64,
        rng: &mut dyn RngCore,
    ) -> Encoder<'m> {
        Encoder::new(self, tape, tokens, Some((rate, rng)))
    }

    /// Candidate concept indices for a word, most frequent first.
    pub fn concept_candidates(&self, surface: &str) -> Vec<usize> {
        self.inventory
            .lexicon
            .candidates(surface)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|(c, _)| self.vocab.concepts.get_index_of(&c))
            .collect()
    }

    /// Greedy decoding; see [`ParseOutput`].
    pub fn parse(&self, tokens: &[Token]) -> ParseOutput {
        let mut tape = Tape::new(&self.params);
        let mut enc = self.start(&mut tape, tokens);
        let limit = step_limit(tokens.len());
        let mut capped = false;
        while !enc.state.is_terminal() {
            if enc.state.history().len() >= limit {
                capped = true;
                log::warn!("step limit {limit} reached; keeping the partial graph");
                break;
            }
            let s = enc.features(&mut tape);
            let mask = enc.legal_mask();
            let action = if mask.iter().any(|m| *m) {
                let logits = enc.action_logits(&mut tape, s);
                let probs = masked_softmax(tape.value(logits), Some(&mask));
                // First maximum wins, i.e. the lowest inventory index on ties.
                let best = probs
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask[*i])
                    .fold(None, |acc: Option<(usize, f64)>, (i, p)| match acc {
                        Some((_, bp)) if bp >= *p => acc,
                        _ => Some((i, *p)),
                    })
                    .map(|(i, _)| i)
                    .expect("some action is legal");
                self.inventory.action_inventory.get(best).expect("index in range").clone()
            } else {
                enc.fallback_action()
            };
            let action = match action {
                Action::Confirm(None) => Action::Confirm(Some(enc.predict_concept(&mut tape, s))),
                a => a,
            };
            enc.apply(&mut tape, &action);
        }
        let complete = !capped;
        let (graph, rooted) = match enc.state.extract_graph() {
            Ok(e) => (e.graph, true),
            Err(_) => match enc.state.partial_graph() {
                Some(e) => (e.graph, false),
                None => (AmrGraph::single("e", EMPTY_CONCEPT), false),
            },
        };
        ParseOutput { graph, actions: enc.state.history().to_vec(), complete, rooted }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutput {
    pub graph: AmrGraph,
    pub actions: Vec<Action>,
    /// False when the step limit cut decoding short.
    pub complete: bool,
    /// False when no root arc was built and a fallback root was used.
    pub rooted: bool,
}

/// Per-sentence encoder state mirroring a [`ParserState`].
pub struct Encoder<'m> {
    model: &'m Model,
    pub state: ParserState,
    heads: Vec<Option<usize>>,
    stack_items: Vec<Var>,
    buffer_items: VecDeque<Var>,
    stack: StackLstm,
    buffer: StackLstm,
    history: StackLstm,
}

impl<'m> Encoder<'m> {
    fn new(
        model: &'m Model,
        tape: &mut Tape<'m>,
        tokens: &[Token],
        mut dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Self {
        let ids = &model.ids;
        let mut buffer_items = VecDeque::with_capacity(tokens.len() + 1);
        for t in tokens {
            let mut x = model.token_embedding(tape, t);
            if let Some((rate, rng)) = dropout.as_mut().filter(|(rate, _)| *rate > 0.0) {
                let keep = 1.0 - *rate;
                let mask: Vec<f64> = (0..model.config.token_dim)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let m = tape.input(mask);
                x = tape.mul(x, m);
            }
            buffer_items.push_back(x);
        }
        buffer_items.push_back(tape.param(ids.root_item));
        let mut buffer = StackLstm::new(tape, ids.buffer, ids.empty_buffer);
        for v in buffer_items.iter().rev() {
            buffer.push(tape, *v);
        }
        let heads = tokens
            .iter()
            .map(|t| match t.head {
                Some(Head::Token(j)) => Some(j),
                _ => None,
            })
            .collect();
        Encoder {
            model,
            state: ParserState::new(tokens.iter().map(|t| t.surface.as_str())),
            heads,
            stack_items: Vec::new(),
            buffer_items,
            stack: StackLstm::new(tape, ids.stack, ids.empty_stack),
            buffer,
            history: StackLstm::new(tape, ids.history, ids.empty_history),
        }
    }

    /// The state vector `s_t`.
    pub fn features(&self, tape: &mut Tape<'m>) -> Var {
        let ids = &self.model.ids;
        let mut parts = vec![self.stack.output(tape), self.buffer.output(tape), self.history.output(tape)];
        if let Some(table) = ids.dep_table {
            let f = dependency_feature(&self.state, &self.heads);
            parts.push(tape.pick_row(table, f as usize));
        }
        let x = tape.concat(&parts);
        let a = tape.affine(ids.state_w, Some(ids.state_b), x);
        tape.relu(a)
    }

    pub fn action_logits(&self, tape: &mut Tape<'m>, s: Var) -> Var {
        let ids = &self.model.ids;
        let a = tape.affine(ids.action_bridge_w, Some(ids.action_bridge_b), s);
        let a = tape.tanh(a);
        tape.affine(ids.action_out_w, Some(ids.action_out_b), a)
    }

    pub fn node_logits(&self, tape: &mut Tape<'m>, s: Var) -> Var {
        let ids = &self.model.ids;
        let n = tape.affine(ids.node_bridge_w, Some(ids.node_bridge_b), s);
        let n = tape.tanh(n);
        tape.affine(ids.node_out_w, Some(ids.node_out_b), n)
    }

    /// Legality of every inventory action in the current state.
    pub fn legal_mask(&self) -> Vec<bool> {
        self.model
            .inventory
            .action_inventory
            .actions()
            .iter()
            .map(|a| match a {
                Action::Confirm(None) => self.state.is_legal(&Action::confirm("x")),
                a => self.state.is_legal(a),
            })
            .collect()
    }

    /// Action used when no inventory action is legal.
    pub fn fallback_action(&self) -> Action {
        [Action::Shift, Action::Reduce, Action::LeftArc(ROOT_LABEL.into()), Action::RightArc(ROOT_LABEL.into())]
            .into_iter()
            .find(|a| self.state.is_legal(a))
            .unwrap_or(Action::Reduce)
    }

    /// Candidate concept indices for the top item.
    pub fn candidates(&self) -> Vec<usize> {
        self.state.top().map(|t| self.model.concept_candidates(&t.surface)).unwrap_or_default()
    }

    /// Best lexicon candidate for the top word, or its surface form when
    /// the word is unknown.
    pub fn predict_concept(&self, tape: &mut Tape<'m>, s: Var) -> String {
        let cands = self.candidates();
        let surface = self.state.top().map(|t| t.surface.clone()).unwrap_or_default();
        if cands.is_empty() {
            return surface_concept(&surface);
        }
        if cands.len() == 1 {
            return self.model.vocab.concepts[cands[0]].clone();
        }
        let logits = self.node_logits(tape, s);
        let values = tape.value(logits);
        let best = cands
            .iter()
            .copied()
            .fold(None, |acc: Option<usize>, c| match acc {
                Some(b) if values[b] >= values[c] => Some(b),
                _ => Some(c),
            })
            .expect("non-empty");
        self.model.vocab.concepts[best].clone()
    }

    /// Mask over the concept vocabulary allowing only `cands`.
    pub fn concept_mask(&self, cands: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.model.vocab.concepts.len()];
        for &c in cands {
            mask[c] = true;
        }
        mask
    }

    fn concept_row(&self, tape: &mut Tape<'m>, concept: &str) -> Var {
        let i = Vocab::index(&self.model.vocab.concepts, concept);
        tape.pick_row(self.model.ids.concept_table, i)
    }

    fn relation_row(&self, tape: &mut Tape<'m>, label: &str) -> Var {
        let i = Vocab::index(&self.model.vocab.relations, label);
        tape.pick_row(self.model.ids.relation_table, i)
    }

    fn compose(&self, tape: &mut Tape<'m>, w: ParamId, b: ParamId, parts: &[Var]) -> Var {
        let x = tape.concat(parts);
        let a = tape.affine(w, Some(b), x);
        tape.tanh(a)
    }

    fn pop_stack(&mut self) -> Var {
        self.stack.pop();
        self.stack_items.pop().expect("stack item")
    }

    fn push_stack(&mut self, tape: &mut Tape<'m>, v: Var) {
        self.stack.push(tape, v);
        self.stack_items.push(v);
    }

    /// Applies `action` to the parser state and updates the encoders.
    /// Panics on illegal actions; callers check legality first.
    pub fn apply(&mut self, tape: &mut Tape<'m>, action: &Action) {
        let ids = self.model.ids;
        self.state.apply_mut(action).unwrap_or_else(|e| panic!("encoder applied an illegal action: {e}"));
        match action {
            Action::Shift => {
                let v = self.buffer_items.pop_front().expect("buffer item");
                self.buffer.pop();
                self.push_stack(tape, v);
            }
            Action::Confirm(c) => {
                let top = self.pop_stack();
                let c = self.concept_row(tape, c.as_deref().unwrap_or(UNK));
                let v = self.compose(tape, ids.confirm_w, ids.confirm_b, &[top, c]);
                self.push_stack(tape, v);
            }
            Action::Entity(label) => {
                let top = self.pop_stack();
                let c = self.concept_row(tape, label);
                let v = self.compose(tape, ids.confirm_w, ids.confirm_b, &[top, c]);
                self.push_stack(tape, v);
            }
            Action::Reduce => {
                self.pop_stack();
            }
            Action::Merge => {
                let top = self.pop_stack();
                let second = self.pop_stack();
                let v = self.compose(tape, ids.merge_w, ids.merge_b, &[second, top]);
                self.push_stack(tape, v);
            }
            Action::Dependent(label, value) => {
                let top = self.pop_stack();
                let r = self.relation_row(tape, label);
                let c = self.concept_row(tape, value);
                let v = self.compose(tape, ids.dependent_w, ids.dependent_b, &[top, r, c]);
                self.push_stack(tape, v);
            }
            Action::LeftArc(label) => {
                let top = self.pop_stack();
                let second = *self.stack_items.last().expect("second item");
                let r = self.relation_row(tape, label);
                let v = self.compose(tape, ids.arc_w, ids.arc_b, &[top, second, r]);
                self.push_stack(tape, v);
            }
            Action::RightArc(label) => {
                let top = self.pop_stack();
                let second = self.pop_stack();
                let r = self.relation_row(tape, label);
                let v = self.compose(tape, ids.arc_w, ids.arc_b, &[second, top, r]);
                self.push_stack(tape, v);
                self.push_stack(tape, top);
            }
            Action::Swap => {
                let top = self.pop_stack();
                let second = self.pop_stack();
                self.buffer_items.push_front(second);
                self.buffer.push(tape, second);
                self.push_stack(tape, top);
            }
        }
        let row = self
            .model
            .inventory
            .action_inventory
            .index_of(action)
            .unwrap_or(self.model.inventory.action_inventory.len());
        let a = tape.pick_row(ids.action_table, row);
        self.history.push(tape, a);
    }
}

impl Model {
    fn token_embedding(&self, tape: &mut Tape, token: &Token) -> Var {
        let ids = &self.ids;
        let mut parts = Vec::new();
        if let (Some(table), Some(fwd), Some(bwd)) = (ids.char_table, ids.char_fwd, ids.char_bwd) {
            let chars: Vec<Var> = token
                .surface
                .chars()
                .map(|ch| tape.pick_row(table, self.vocab.chars.get_index_of(&ch).unwrap_or(0)))
                .collect();
            let mut f = fwd.initial(tape);
            for &c in &chars {
                f = fwd.step(tape, c, f);
            }
            let mut b = bwd.initial(tape);
            for &c in chars.iter().rev() {
                b = bwd.step(tape, c, b);
            }
            parts.push(f.0);
            parts.push(b.0);
        }
        if let (Some(table), Some(unk)) = (ids.pretrained, ids.pretrained_unk) {
            let p = &self.vocab.pretrained;
            match p.get_index_of(&token.surface).or_else(|| p.get_index_of(&token.surface.to_lowercase())) {
                Some(i) => parts.push(tape.pick_row(table, i)),
                None => parts.push(tape.param(unk)),
            }
        }
        if let Some(table) = ids.word_table {
            parts.push(tape.pick_row(table, Vocab::index(&self.vocab.words, &token.surface.to_lowercase())));
        }
        if let Some(table) = ids.pos_table {
            parts.push(tape.pick_row(table, Vocab::index(&self.vocab.pos, token.pos.as_deref().unwrap_or(UNK))));
        }
        if let Some(table) = ids.deprel_table {
            parts.push(tape.pick_row(table, Vocab::index(&self.vocab.deprels, token.deprel.as_deref().unwrap_or(UNK))));
        }
        let x = tape.concat(&parts);
        let a = tape.affine(ids.token_w, Some(ids.token_b), x);
        tape.relu(a)
    }
}
