//! AMR graph model, PENMAN reading/writing and triple extraction.
//!
//! Graphs keep variable ids exactly as written. Constants (`-`, numbers,
//! quoted strings, bare symbols such as `imperative`) are stored verbatim as
//! attribute values and never become nodes. Relation labels are stored
//! without the leading `:` and inverse roles (`ARG0-of`) are kept as written.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

/// A constant attached to a variable, e.g. `(l, polarity, -)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attribute {
    pub source: String,
    pub role: String,
    pub value: String,
}

/// A relation between two variables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub source: String,
    pub role: String,
    pub target: String,
}

/// A rooted, labeled, possibly reentrant AMR graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmrGraph {
    /// Variable id to concept, in order of first definition.
    pub nodes: IndexMap<String, String>,
    pub attributes: Vec<Attribute>,
    pub edges: Vec<Edge>,
    pub root: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("root `{0}` is not a node of the graph")]
    MissingRoot(String),
    #[error("edge {0} -> {1} references an unknown variable")]
    DanglingEdge(String, String),
    #[error("attribute `{role}` is held by unknown variable `{holder}`")]
    DanglingAttribute { holder: String, role: String },
    #[error("node `{0}` is not reachable from the root")]
    Unreachable(String),
}

impl AmrGraph {
    /// A graph holding a single node, which is also the root.
    pub fn single(var: impl Into<String>, concept: impl Into<String>) -> Self {
        let var = var.into();
        let mut nodes = IndexMap::new();
        nodes.insert(var.clone(), concept.into());
        AmrGraph { nodes, attributes: Vec::new(), edges: Vec::new(), root: var }
    }

    pub fn concept(&self, var: &str) -> Option<&str> {
        self.nodes.get(var).map(String::as_str)
    }

    pub fn root_concept(&self) -> &str {
        self.concept(&self.root).unwrap_or_default()
    }

    /// Checks every structural invariant, including reachability from the root.
    pub fn validate(&self) -> Result<(), GraphError> {
        if !self.nodes.contains_key(&self.root) {
            return Err(GraphError::MissingRoot(self.root.clone()));
        }
        for e in &self.edges {
            if !self.nodes.contains_key(&e.source) || !self.nodes.contains_key(&e.target) {
                return Err(GraphError::DanglingEdge(e.source.clone(), e.target.clone()));
            }
        }
        for a in &self.attributes {
            if !self.nodes.contains_key(&a.source) {
                return Err(GraphError::DanglingAttribute { holder: a.source.clone(), role: a.role.clone() });
            }
        }
        let reachable = self.reachable_from_root();
        if let Some(v) = self.nodes.keys().find(|v| !reachable.contains(*v)) {
            return Err(GraphError::Unreachable(v.clone()));
        }
        Ok(())
    }

    /// Variables reachable from the root following edges in their stored direction.
    pub fn reachable_from_root(&self) -> HashSet<String> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for e in &self.edges {
            out.entry(&e.source).or_default().push(&e.target);
        }
        let mut seen = HashSet::new();
        let mut stack = vec![self.root.as_str()];
        while let Some(v) = stack.pop() {
            if !self.nodes.contains_key(v) || !seen.insert(v.to_string()) {
                continue;
            }
            if let Some(next) = out.get(v) {
                stack.extend(next.iter().rev());
            }
        }
        seen
    }

    /// Drops nodes not reachable from the root together with their edges and
    /// attributes. Returns how many nodes were removed.
    pub fn prune_unreachable(&mut self) -> usize {
        let keep = self.reachable_from_root();
        let before = self.nodes.len();
        self.nodes.retain(|v, _| keep.contains(v));
        self.edges.retain(|e| keep.contains(&e.source) && keep.contains(&e.target));
        self.attributes.retain(|a| keep.contains(&a.source));
        before - self.nodes.len()
    }

    pub fn outgoing<'a>(&'a self, var: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.source == var)
    }

    pub fn incoming<'a>(&'a self, var: &'a str) -> impl Iterator<Item = &'a Edge> + 'a {
        self.edges.iter().filter(move |e| e.target == var)
    }

    pub fn attributes_of<'a>(&'a self, var: &'a str) -> impl Iterator<Item = &'a Attribute> + 'a {
        self.attributes.iter().filter(move |a| a.source == var)
    }

    /// Returns a variable id not yet used in the graph: first concept letter,
    /// then the same letter with an increasing integer.
    pub fn fresh_variable(&self, concept: &str) -> String {
        let letter = concept.chars().find(|c| c.is_ascii_alphabetic()).map(|c| c.to_ascii_lowercase()).unwrap_or('x');
        let base = letter.to_string();
        if !self.nodes.contains_key(&base) {
            return base;
        }
        (2..).map(|i| format!("{letter}{i}")).find(|v| !self.nodes.contains_key(v)).expect("unbounded search")
    }
}

impl fmt::Display for AmrGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_penman(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TripleKind {
    Instance,
    Attribute,
    Relation,
}

/// One Smatch triple. For instance triples `arg2` is the concept, for
/// attribute triples it is the constant, for relation triples the tail variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub kind: TripleKind,
    pub relation: String,
    pub arg1: String,
    pub arg2: String,
}

pub const TOP_RELATION: &str = "TOP";
pub const INSTANCE_RELATION: &str = "instance";

/// Instance, attribute and relation triples plus the `TOP` attribute carrying
/// the root concept.
pub fn to_triples(graph: &AmrGraph) -> BTreeSet<Triple> {
    let mut out = BTreeSet::new();
    for (var, concept) in &graph.nodes {
        out.insert(Triple {
            kind: TripleKind::Instance,
            relation: INSTANCE_RELATION.into(),
            arg1: var.clone(),
            arg2: concept.clone(),
        });
    }
    for a in &graph.attributes {
        out.insert(Triple {
            kind: TripleKind::Attribute,
            relation: a.role.clone(),
            arg1: a.source.clone(),
            arg2: a.value.clone(),
        });
    }
    for e in &graph.edges {
        out.insert(Triple {
            kind: TripleKind::Relation,
            relation: e.role.clone(),
            arg1: e.source.clone(),
            arg2: e.target.clone(),
        });
    }
    out.insert(Triple {
        kind: TripleKind::Attribute,
        relation: TOP_RELATION.into(),
        arg1: graph.root.clone(),
        arg2: graph.root_concept().to_string(),
    });
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{line}:{column}: {message}")]
pub struct PenmanError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// What a JAMR-style dot path (`0`, `0.1`, `0.1.0`, ...) points at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathTarget {
    Node(String),
    Constant(String),
}

/// A parsed graph together with the JAMR path of every node and constant.
#[derive(Debug, Clone)]
pub struct ParsedPenman {
    pub graph: AmrGraph,
    pub paths: BTreeMap<String, PathTarget>,
}

pub fn parse_penman(text: &str) -> Result<AmrGraph, PenmanError> {
    parse_penman_with_paths(text).map(|p| p.graph)
}

pub fn parse_penman_with_paths(text: &str) -> Result<ParsedPenman, PenmanError> {
    parse_penman_at(text, 1)
}

/// Parses one PENMAN expression whose first line is `first_line` in the
/// enclosing file, so error positions point into that file.
pub fn parse_penman_at(text: &str, first_line: usize) -> Result<ParsedPenman, PenmanError> {
    let tokens = lex(text, first_line)?;
    let mut parser = TreeParser { tokens: &tokens, pos: 0, end: end_position(text, first_line) };
    let tree = parser.node()?;
    if let Some(tok) = parser.tokens.get(parser.pos) {
        let message = match tok.kind {
            TokKind::RParen => "unbalanced parentheses: unexpected `)`".to_string(),
            _ => format!("unexpected `{}` after the graph", tok.text),
        };
        return Err(PenmanError { line: tok.line, column: tok.column, message });
    }
    build_graph(tree)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokKind {
    LParen,
    RParen,
    Slash,
    Role,
    Symbol,
    Quoted,
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    text: String,
    line: usize,
    column: usize,
}

fn end_position(text: &str, first_line: usize) -> (usize, usize) {
    let mut line = first_line;
    let mut column = 1;
    for c in text.chars() {
        if c == '\n' {
            line += 1;
            column = 1;
        } else {
            column += 1;
        }
    }
    (line, column)
}

fn lex(text: &str, first_line: usize) -> Result<Vec<Tok>, PenmanError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut column) = (first_line, 1usize);
    let is_delim = |c: char| c.is_whitespace() || c == '(' || c == ')' || c == '"';
    while let Some(&c) = chars.peek() {
        let (tl, tc) = (line, column);
        let push = |out: &mut Vec<Tok>, kind, text: String| out.push(Tok { kind, text, line: tl, column: tc });
        match c {
            '\n' => {
                chars.next();
                line += 1;
                column = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                column += 1;
            }
            '#' if column == 1 => {
                // metadata comment line
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                }
            }
            '(' | ')' | '/' => {
                chars.next();
                column += 1;
                let kind = match c {
                    '(' => TokKind::LParen,
                    ')' => TokKind::RParen,
                    _ => TokKind::Slash,
                };
                push(&mut out, kind, c.to_string());
            }
            '"' => {
                let mut s = String::from('"');
                chars.next();
                column += 1;
                let mut closed = false;
                while let Some(c) = chars.next() {
                    s.push(c);
                    if c == '\n' {
                        line += 1;
                        column = 1;
                    } else {
                        column += 1;
                    }
                    if c == '\\' {
                        if let Some(n) = chars.next() {
                            s.push(n);
                            column += 1;
                        }
                    } else if c == '"' {
                        closed = true;
                        break;
                    }
                }
                if !closed {
                    return Err(PenmanError { line: tl, column: tc, message: "unterminated string".into() });
                }
                push(&mut out, TokKind::Quoted, s);
            }
            _ => {
                let mut s = String::new();
                while let Some(&c) = chars.peek() {
                    if is_delim(c) || (c == '/' && !s.is_empty() && !s.starts_with(':')) {
                        break;
                    }
                    s.push(c);
                    chars.next();
                    column += 1;
                }
                let kind = if s.starts_with(':') { TokKind::Role } else { TokKind::Symbol };
                if kind == TokKind::Role && s.len() == 1 {
                    return Err(PenmanError { line: tl, column: tc, message: "empty role".into() });
                }
                push(&mut out, kind, s);
            }
        }
    }
    Ok(out)
}

struct TreeNode {
    var: String,
    concept: String,
    line: usize,
    column: usize,
    relations: Vec<(String, TreeValue)>,
}

enum TreeValue {
    Node(TreeNode),
    Symbol { text: String, line: usize, column: usize },
    Quoted(String),
}

struct TreeParser<'a> {
    tokens: &'a [Tok],
    pos: usize,
    end: (usize, usize),
}

impl TreeParser<'_> {
    fn err(&self, message: impl Into<String>) -> PenmanError {
        let (line, column) = match self.tokens.get(self.pos) {
            Some(t) => (t.line, t.column),
            None => self.end,
        };
        PenmanError { line, column, message: message.into() }
    }

    fn next(&mut self) -> Option<&Tok> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn expect(&mut self, kind: TokKind, what: &str) -> Result<Tok, PenmanError> {
        match self.tokens.get(self.pos) {
            Some(t) if t.kind == kind => {
                self.pos += 1;
                Ok(t.clone())
            }
            Some(t) => Err(self.err(format!("expected {what}, found `{}`", t.text))),
            None => Err(self.err(format!("expected {what}, found end of input"))),
        }
    }

    fn node(&mut self) -> Result<TreeNode, PenmanError> {
        let open = self.expect(TokKind::LParen, "`(`")?;
        let var = self.expect(TokKind::Symbol, "a variable")?;
        self.expect(TokKind::Slash, "`/`")?;
        let concept = match self.tokens.get(self.pos) {
            Some(t) if t.kind == TokKind::Symbol || t.kind == TokKind::Quoted => {
                self.pos += 1;
                t.text.clone()
            }
            _ => return Err(self.err("expected a concept")),
        };
        let mut relations = Vec::new();
        loop {
            match self.tokens.get(self.pos).map(|t| t.kind) {
                Some(TokKind::RParen) => {
                    self.pos += 1;
                    break;
                }
                Some(TokKind::Role) => {
                    let role = self.next().expect("peeked").text[1..].to_string();
                    let value = match self.tokens.get(self.pos) {
                        Some(t) if t.kind == TokKind::LParen => TreeValue::Node(self.node()?),
                        Some(t) if t.kind == TokKind::Symbol => {
                            let t = t.clone();
                            self.pos += 1;
                            TreeValue::Symbol { text: t.text, line: t.line, column: t.column }
                        }
                        Some(t) if t.kind == TokKind::Quoted => {
                            let t = t.clone();
                            self.pos += 1;
                            TreeValue::Quoted(t.text)
                        }
                        Some(t) => {
                            return Err(self.err(format!("expected a value after `:{role}`, found `{}`", t.text)))
                        }
                        None => return Err(self.err(format!("expected a value after `:{role}`"))),
                    };
                    relations.push((role, value));
                }
                Some(_) => {
                    let t = &self.tokens[self.pos];
                    return Err(self.err(format!("expected a role or `)`, found `{}`", t.text)));
                }
                None => {
                    return Err(PenmanError {
                        line: open.line,
                        column: open.column,
                        message: "unbalanced parentheses: `(` is never closed".into(),
                    })
                }
            }
        }
        Ok(TreeNode { var: var.text, concept, line: var.line, column: var.column, relations })
    }
}

fn looks_like_variable(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase()) && chars.all(|c| c.is_ascii_digit())
}

fn build_graph(tree: TreeNode) -> Result<ParsedPenman, PenmanError> {
    // first pass: declarations
    let mut nodes: IndexMap<String, String> = IndexMap::new();
    let mut pending = vec![&tree];
    let mut order = Vec::new();
    while let Some(n) = pending.pop() {
        order.push(n);
        for (_, v) in n.relations.iter().rev() {
            if let TreeValue::Node(child) = v {
                pending.push(child);
            }
        }
    }
    for n in &order {
        if nodes.contains_key(&n.var) {
            return Err(PenmanError {
                line: n.line,
                column: n.column,
                message: format!("variable `{}` is defined twice", n.var),
            });
        }
        nodes.insert(n.var.clone(), n.concept.clone());
    }

    let mut graph = AmrGraph { nodes, attributes: Vec::new(), edges: Vec::new(), root: tree.var.clone() };
    let mut paths = BTreeMap::new();
    let mut stack = vec![(&tree, "0".to_string())];
    while let Some((n, path)) = stack.pop() {
        paths.insert(path.clone(), PathTarget::Node(n.var.clone()));
        let mut child_index = 0;
        let mut children = Vec::new();
        for (role, value) in &n.relations {
            match value {
                TreeValue::Node(child) => {
                    graph.edges.push(Edge { source: n.var.clone(), role: role.clone(), target: child.var.clone() });
                    children.push((child, format!("{path}.{child_index}")));
                    child_index += 1;
                }
                TreeValue::Symbol { text, line, column } => {
                    if graph.nodes.contains_key(text) {
                        graph.edges.push(Edge { source: n.var.clone(), role: role.clone(), target: text.clone() });
                    } else if looks_like_variable(text) {
                        return Err(PenmanError {
                            line: *line,
                            column: *column,
                            message: format!("reference to undeclared variable `{text}`"),
                        });
                    } else {
                        graph.attributes.push(Attribute {
                            source: n.var.clone(),
                            role: role.clone(),
                            value: text.clone(),
                        });
                        paths.insert(format!("{path}.{child_index}"), PathTarget::Constant(text.clone()));
                        child_index += 1;
                    }
                }
                TreeValue::Quoted(text) => {
                    graph.attributes.push(Attribute { source: n.var.clone(), role: role.clone(), value: text.clone() });
                    paths.insert(format!("{path}.{child_index}"), PathTarget::Constant(text.clone()));
                    child_index += 1;
                }
            }
        }
        stack.extend(children.into_iter().rev());
    }
    // Edges were collected in DFS pop order; restore text order.
    let rank: HashMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (n.var.as_str(), i)).collect();
    graph.edges.sort_by_key(|e| rank[e.source.as_str()]);
    graph.attributes.sort_by_key(|a| rank[a.source.as_str()]);
    Ok(ParsedPenman { graph, paths })
}

/// Writes the graph in indented PENMAN notation starting from the root. A
/// variable's concept appears at its first mention; later mentions are bare.
pub fn serialize_penman(graph: &AmrGraph) -> String {
    let mut out = String::new();
    let mut printed = HashSet::new();
    write_node(graph, &graph.root, 1, &mut printed, &mut out);
    out
}

fn write_node(graph: &AmrGraph, var: &str, depth: usize, printed: &mut HashSet<String>, out: &mut String) {
    printed.insert(var.to_string());
    out.push('(');
    out.push_str(var);
    out.push_str(" / ");
    out.push_str(graph.concept(var).unwrap_or("?"));
    let indent = "    ".repeat(depth);
    for e in graph.outgoing(var) {
        out.push('\n');
        out.push_str(&indent);
        out.push(':');
        out.push_str(&e.role);
        out.push(' ');
        if printed.contains(&e.target) {
            out.push_str(&e.target);
        } else {
            write_node(graph, &e.target, depth + 1, printed, out);
        }
    }
    for a in graph.attributes_of(var) {
        out.push('\n');
        out.push_str(&indent);
        out.push(':');
        out.push_str(&a.role);
        out.push(' ');
        out.push_str(&a.value);
    }
    out.push(')');
}

/// One blank-line separated block of a PENMAN file.
#[derive(Debug, Clone)]
pub struct PenmanBlock {
    /// `#` lines preceding the graph, without the leading `#` and whitespace.
    pub comments: Vec<String>,
    pub body: String,
    /// 1-based line of the first graph line in the file.
    pub body_line: usize,
}

/// Splits a PENMAN file into blocks. Blocks with comments but no graph are kept
/// with an empty body.
pub fn split_blocks(text: &str) -> Vec<PenmanBlock> {
    let mut blocks = Vec::new();
    let mut comments = Vec::new();
    let mut body = String::new();
    let mut body_line = 0;
    let flush = |comments: &mut Vec<String>, body: &mut String, body_line: usize, blocks: &mut Vec<PenmanBlock>| {
        if !comments.is_empty() || !body.trim().is_empty() {
            blocks.push(PenmanBlock { comments: std::mem::take(comments), body: std::mem::take(body), body_line });
        }
    };
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut comments, &mut body, body_line, &mut blocks);
        } else if trimmed.starts_with('#') && body.is_empty() {
            comments.push(trimmed.trim_start_matches('#').trim().to_string());
        } else {
            if body.is_empty() {
                body_line = i + 1;
            }
            body.push_str(line);
            body.push('\n');
        }
    }
    flush(&mut comments, &mut body, body_line, &mut blocks);
    blocks
}

/// Reads every graph of a PENMAN file.
pub fn parse_penman_document(text: &str) -> Result<Vec<AmrGraph>, PenmanError> {
    split_blocks(text)
        .into_iter()
        .filter(|b| !b.body.trim().is_empty())
        .map(|b| parse_penman_at(&b.body, b.body_line).map(|p| p.graph))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const ADVOCATED: &str = "(r / recommend-01
    :ARG1 (a / advocate-01
        :ARG1 (i / it)
        :manner (v / vigorous)))";

    fn edge(s: &str, r: &str, t: &str) -> Edge {
        Edge { source: s.into(), role: r.into(), target: t.into() }
    }

    #[test]
    fn minimal_graph() {
        let g = parse_penman("(i / it)").unwrap();
        assert_eq!(g, AmrGraph::single("i", "it"));
        assert_eq!(serialize_penman(&g), "(i / it)");
    }

    #[test]
    fn advocated_block() {
        let g = parse_penman(ADVOCATED).unwrap();
        assert_eq!(g.root, "r");
        let nodes: Vec<_> = g.nodes.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        assert_eq!(nodes, vec![("r", "recommend-01"), ("a", "advocate-01"), ("i", "it"), ("v", "vigorous")]);
        assert_eq!(g.edges, vec![edge("r", "ARG1", "a"), edge("a", "ARG1", "i"), edge("a", "manner", "v")]);
        assert!(g.attributes.is_empty());
        g.validate().unwrap();
    }

    #[test]
    fn polarity_is_an_attribute() {
        let g = parse_penman("(l / legal :polarity -)").unwrap();
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.attributes, vec![Attribute { source: "l".into(), role: "polarity".into(), value: "-".into() }]);
    }

    #[test]
    fn reentrancy_and_constants() {
        let g = parse_penman(
            r#"(w / want-01 :ARG0 (b / boy) :ARG1 (g / go-02 :ARG0 b :mode imperative)
                :quant 5 :name (n / name :op1 "New York"))"#,
        )
        .unwrap();
        assert!(g.edges.contains(&edge("g", "ARG0", "b")));
        let attrs: Vec<_> = g.attributes.iter().map(|a| (a.role.as_str(), a.value.as_str())).collect();
        assert_eq!(attrs, vec![("quant", "5"), ("mode", "imperative"), ("op1", "\"New York\"")]);
    }

    #[test]
    fn forward_reference_is_reentrancy() {
        let g = parse_penman("(a / and :op1 (x / see-01 :ARG0 y) :op2 (y / you))").unwrap();
        assert!(g.edges.contains(&edge("x", "ARG0", "y")));
    }

    #[test]
    fn errors_carry_positions() {
        let e = parse_penman("(a / b :ARG0 (c / d)").unwrap_err();
        assert!(e.message.contains("unbalanced"), "{e}");
        assert_eq!((e.line, e.column), (1, 1));

        let e = parse_penman("(a / b))").unwrap_err();
        assert!(e.message.contains("unbalanced"), "{e}");
        assert_eq!(e.column, 8);

        let e = parse_penman("(a / b\n  :ARG0 (a / c))").unwrap_err();
        assert!(e.message.contains("defined twice"), "{e}");
        assert_eq!((e.line, e.column), (2, 10));

        let e = parse_penman("(a / b :ARG0 z2)").unwrap_err();
        assert!(e.message.contains("undeclared"), "{e}");
        assert_eq!(e.column, 14);
    }

    #[test]
    fn reentrant_round_trip_prints_concept_once() {
        let mut g = AmrGraph::single("w", "want-01");
        g.nodes.insert("b".into(), "boy".into());
        g.nodes.insert("g".into(), "go-02".into());
        g.edges.push(edge("w", "ARG0", "b"));
        g.edges.push(edge("w", "ARG1", "g"));
        g.edges.push(edge("g", "ARG0", "b"));
        let text = serialize_penman(&g);
        assert_eq!(text.matches("/ boy").count(), 1);
        assert_eq!(text.matches(" b)").count() + text.matches(" b\n").count(), 1, "{text}");
        let back = parse_penman(&text).unwrap();
        assert_eq!(to_triples(&back), to_triples(&g));
    }

    #[test]
    fn advocated_round_trip() {
        let g = parse_penman(ADVOCATED).unwrap();
        let back = parse_penman(&serialize_penman(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn triple_counts() {
        let g = parse_penman(ADVOCATED).unwrap();
        let t = to_triples(&g);
        assert_eq!(t.len(), 8);
        assert_eq!(t.iter().filter(|t| t.kind == TripleKind::Instance).count(), 4);
        assert_eq!(t.iter().filter(|t| t.kind == TripleKind::Relation).count(), 3);
        assert!(t.contains(&Triple {
            kind: TripleKind::Attribute,
            relation: "TOP".into(),
            arg1: "r".into(),
            arg2: "recommend-01".into()
        }));

        assert_eq!(to_triples(&AmrGraph::single("i", "it")).len(), 2);

        let l = parse_penman("(l / legal :polarity -)").unwrap();
        assert!(to_triples(&l).contains(&Triple {
            kind: TripleKind::Attribute,
            relation: "polarity".into(),
            arg1: "l".into(),
            arg2: "-".into()
        }));
    }

    #[test]
    fn jamr_paths() {
        let p = parse_penman_with_paths(
            "(r / recommend-01 :ARG1 (a / advocate-01 :ARG1 (i / it) :polarity - :manner (v / vigorous)))",
        )
        .unwrap();
        assert_eq!(p.paths["0"], PathTarget::Node("r".into()));
        assert_eq!(p.paths["0.0"], PathTarget::Node("a".into()));
        assert_eq!(p.paths["0.0.0"], PathTarget::Node("i".into()));
        assert_eq!(p.paths["0.0.1"], PathTarget::Constant("-".into()));
        assert_eq!(p.paths["0.0.2"], PathTarget::Node("v".into()));
        assert!(!p.paths.contains_key("0.1"));
    }

    #[test]
    fn fresh_variables() {
        let g = parse_penman(ADVOCATED).unwrap();
        assert_eq!(g.fresh_variable("run-01"), "r2");
        assert_eq!(g.fresh_variable("boy"), "b");
        assert_eq!(g.fresh_variable("\"x\""), "x");
    }

    #[test]
    fn document_blocks() {
        let text = "# ::id 1\n# ::snt hi\n(h / hi)\n\n\n(a / a2 :ARG0 (b / b2))\n";
        let blocks = split_blocks(text);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].comments, vec!["::id 1", "::snt hi"]);
        assert_eq!(blocks[1].body_line, 6);
        assert_eq!(parse_penman_document(text).unwrap().len(), 2);
        let err = parse_penman_document("(a / b)\n\n(c / d\n").unwrap_err();
        assert_eq!(err.line, 3);
    }
}
