//! Reading aligned AMR corpora and token annotations.
//!
//! A corpus file is a sequence of blank-line separated blocks:
//!
//! ```text
//! # ::snt It should be vigorously advocated
//! # ::tok It should be vigorously advocated
//! # ::alignments 0-1|0.0.0 3-4|0.0.1
//! (r / recommend-01 ...)
//! ```
//!
//! Alignment paths use JAMR addressing: `0` is the root, `0.k` its k-th child,
//! counting nested nodes and constants in text order. Annotation files are
//! five tab-separated columns `index surface pos head deprel`, one sentence
//! per blank-line separated group.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::amr::{parse_penman_at, parse_penman_with_paths, serialize_penman, AmrGraph, PathTarget, PenmanError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Head {
    Root,
    Token(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub index: usize,
    pub surface: String,
    pub pos: Option<String>,
    pub head: Option<Head>,
    pub deprel: Option<String>,
}

impl Token {
    pub fn new(index: usize, surface: impl Into<String>) -> Self {
        Token { index, surface: surface.into(), pos: None, head: None, deprel: None }
    }
}

pub fn tokens_from_surfaces<S: AsRef<str>>(words: &[S]) -> Vec<Token> {
    words.iter().enumerate().map(|(i, w)| Token::new(i, w.as_ref())).collect()
}

/// A token span `[start, end)` aligned to one graph node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub start: usize,
    pub end: usize,
    pub node_path: String,
    /// Variable id the path resolved to.
    pub node: String,
}

impl Alignment {
    pub fn overlaps(&self, other: &Alignment) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedExample {
    pub tokens: Vec<Token>,
    pub graph: AmrGraph,
    pub alignments: Vec<Alignment>,
}

impl AlignedExample {
    pub fn new(tokens: Vec<Token>, graph: AmrGraph) -> Self {
        AlignedExample { tokens, graph, alignments: Vec::new() }
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    /// Adds an alignment unless it conflicts with an existing one (same node,
    /// or an overlapping but different span). Returns whether it was kept.
    pub fn push_alignment(&mut self, alignment: Alignment) -> bool {
        let conflict = self.alignments.iter().any(|a| {
            a.node == alignment.node || (a.overlaps(&alignment) && (a.start, a.end) != (alignment.start, alignment.end))
        });
        if conflict {
            return false;
        }
        self.alignments.push(alignment);
        true
    }

    /// Aligns a span to a variable, computing its JAMR path from the
    /// serialized graph.
    pub fn align_node(&mut self, start: usize, end: usize, node: &str) -> bool {
        let node_path = node_paths(&self.graph).remove(node).unwrap_or_default();
        self.push_alignment(Alignment { start, end, node_path, node: node.to_string() })
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("block {block}: {message}")]
    Block { block: usize, message: String },
    #[error("block {block}: {source}")]
    Penman { block: usize, source: PenmanError },
    #[error("{message} at sentence {sentence}")]
    Annotation { sentence: usize, message: String },
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<AlignedExample>, CorpusError> {
    parse_corpus(&read_file(path.as_ref())?)
}

/// Parses corpus text; block numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<AlignedExample>, CorpusError> {
    let mut out = Vec::new();
    let blocks = crate::amr::split_blocks(text).into_iter().filter(|b| !b.body.trim().is_empty());
    for (i, block) in blocks.enumerate() {
        let number = i + 1;
        let err = |message: String| CorpusError::Block { block: number, message };
        let mut snt = None;
        let mut tok = None;
        let mut alignments = None;
        for c in &block.comments {
            if let Some(rest) = metadata_field(c, "snt") {
                snt = Some(rest);
            } else if let Some(rest) = metadata_field(c, "tok") {
                tok = Some(rest);
            } else if let Some(rest) = metadata_field(c, "alignments") {
                alignments = Some(rest);
            }
        }
        let words: Vec<&str> = match (tok, snt) {
            (Some(t), _) => t.split_whitespace().collect(),
            (None, Some(s)) => s.split_whitespace().collect(),
            (None, None) => return Err(err("missing `# ::snt` line".into())),
        };
        let parsed = parse_penman_at(&block.body, block.body_line)
            .map_err(|source| CorpusError::Penman { block: number, source })?;
        let mut example = AlignedExample::new(tokens_from_surfaces(&words), parsed.graph);
        if let Some(line) = alignments {
            for item in line.split_whitespace() {
                let alignment = parse_alignment_item(item, words.len(), &parsed.paths).map_err(err)?;
                let Some(alignment) = alignment else { continue };
                if !example.push_alignment(alignment.clone()) {
                    log::warn!(
                        "block {number}: dropping alignment {}-{}|{} (node or span already aligned)",
                        alignment.start,
                        alignment.end,
                        alignment.node_path
                    );
                }
            }
        }
        out.push(example);
    }
    Ok(out)
}

/// Value of `::name` inside a metadata comment, stopping at the next `::key`.
/// Value of `::name` in a metadata comment, up to the next `::` field.
pub fn metadata_field<'a>(comment: &'a str, name: &str) -> Option<&'a str> {
    let key = format!("::{name}");
    let start = comment.find(&key)?;
    let rest = &comment[start + key.len()..];
    if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let end = rest.find(" ::").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn parse_alignment_item(
    item: &str,
    sentence_len: usize,
    paths: &BTreeMap<String, PathTarget>,
) -> Result<Option<Alignment>, String> {
    let malformed = || format!("malformed alignment item `{item}`");
    let (span, path_list) = item.split_once('|').ok_or_else(malformed)?;
    let (start, end) = span.split_once('-').ok_or_else(malformed)?;
    let start: usize = start.parse().map_err(|_| malformed())?;
    let end: usize = end.parse().map_err(|_| malformed())?;
    if start >= end || end > sentence_len {
        return Err(format!("alignment span {start}-{end} out of range for {sentence_len} tokens"));
    }
    let mut saw_constant = false;
    for path in path_list.split('+') {
        match paths.get(path) {
            Some(PathTarget::Node(var)) => {
                return Ok(Some(Alignment { start, end, node_path: path.to_string(), node: var.clone() }))
            }
            Some(PathTarget::Constant(_)) => saw_constant = true,
            None => return Err(format!("alignment path `{path}` does not resolve to a node")),
        }
    }
    if saw_constant {
        log::warn!("alignment `{item}` only names constants; skipped");
    }
    Ok(None)
}

/// JAMR path of every variable, as addressed in the serialized graph.
pub fn node_paths(graph: &AmrGraph) -> BTreeMap<String, String> {
    let parsed = parse_penman_with_paths(&serialize_penman(graph)).expect("serialized graphs re-parse");
    parsed
        .paths
        .into_iter()
        .filter_map(|(path, target)| match target {
            PathTarget::Node(var) => Some((var, path)),
            PathTarget::Constant(_) => None,
        })
        .collect()
}

pub fn read_conll_annotations(
    path: impl AsRef<Path>,
    examples: Vec<AlignedExample>,
) -> Result<Vec<AlignedExample>, CorpusError> {
    apply_conll_annotations(&read_file(path.as_ref())?, examples)
}

/// Enriches tokens with POS, head and dependency label from 5-column TSV text.
/// Sentence numbers in errors are 1-based.
pub fn apply_conll_annotations(
    text: &str,
    mut examples: Vec<AlignedExample>,
) -> Result<Vec<AlignedExample>, CorpusError> {
    let mut sentences: Vec<Vec<&str>> = vec![Vec::new()];
    for line in text.lines() {
        if line.trim().is_empty() {
            if !sentences.last().expect("nonempty").is_empty() {
                sentences.push(Vec::new());
            }
        } else {
            sentences.last_mut().expect("nonempty").push(line);
        }
    }
    if sentences.last().is_some_and(Vec::is_empty) {
        sentences.pop();
    }
    if sentences.len() != examples.len() {
        return Err(CorpusError::Annotation {
            sentence: sentences.len().min(examples.len()) + 1,
            message: format!("sentence count mismatch ({} annotated, {} in corpus)", sentences.len(), examples.len()),
        });
    }
    for (k, (rows, example)) in sentences.iter().zip(examples.iter_mut()).enumerate() {
        let sentence = k + 1;
        let err = |message: String| CorpusError::Annotation { sentence, message };
        if rows.len() != example.tokens.len() {
            return Err(err(format!("token count mismatch ({} rows, {} tokens)", rows.len(), example.tokens.len())));
        }
        let mut seen = BTreeSet::new();
        for row in rows {
            let cols: Vec<&str> = row.split('\t').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 tab-separated columns, found {}", cols.len())));
            }
            let index: usize = cols[0].parse().map_err(|_| err(format!("non-numeric index `{}`", cols[0])))?;
            if index >= example.tokens.len() || !seen.insert(index) {
                return Err(err(format!("bad or repeated token index {index}")));
            }
            let head = match cols[3] {
                "ROOT" | "root" | "-1" => Head::Root,
                h => {
                    let h: usize = h.parse().map_err(|_| err(format!("non-numeric head `{h}`")))?;
                    if h >= example.tokens.len() {
                        return Err(err(format!("head {h} out of range")));
                    }
                    if h == index {
                        return Err(err(format!("token {index} is its own head")));
                    }
                    Head::Token(h)
                }
            };
            let token = &mut example.tokens[index];
            if token.surface != cols[1] {
                log::warn!(
                    "sentence {sentence}: token {index} is `{}` in the corpus but `{}` in annotations",
                    token.surface,
                    cols[1]
                );
            }
            token.pos = Some(cols[2].to_string());
            token.head = Some(head);
            token.deprel = Some(cols[4].to_string());
        }
    }
    Ok(examples)
}

fn strip_sense(concept: &str) -> &str {
    match concept.rfind('-') {
        Some(i) if i > 0 && concept[i + 1..].len() >= 2 && concept[i + 1..].chars().all(|c| c.is_ascii_digit()) => {
            &concept[..i]
        }
        _ => concept,
    }
}

fn common_prefix(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// Exact-match aligner used when no external alignments exist. Tries, in
/// order, exact concept match, match after stripping a `-NN` sense suffix and
/// a shared prefix of at least four characters. Each token and each node is
/// aligned at most once; existing alignments are kept.
pub fn fallback_align(mut example: AlignedExample) -> AlignedExample {
    type Rule = fn(&str, &str) -> bool;
    let rules: [Rule; 3] = [|w, c| w == c, |w, c| w == strip_sense(c), |w, c| common_prefix(w, strip_sense(c)) >= 4];
    let paths = node_paths(&example.graph);
    for i in 0..example.tokens.len() {
        if example.alignments.iter().any(|a| a.start <= i && i < a.end) {
            continue;
        }
        let word = example.tokens[i].surface.to_lowercase();
        let found = rules.iter().find_map(|rule| {
            example
                .graph
                .nodes
                .iter()
                .find(|(var, concept)| !example.alignments.iter().any(|a| &a.node == *var) && rule(&word, concept))
                .map(|(var, _)| var.clone())
        });
        if let Some(var) = found {
            let node_path = paths.get(&var).cloned().unwrap_or_default();
            example.push_alignment(Alignment { start: i, end: i + 1, node_path, node: var });
        }
    }
    example
}
