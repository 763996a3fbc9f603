//! The nine-action shift-reduce transition system.
//!
//! The stack holds words, confirmed AMR nodes and the ROOT symbol; the buffer
//! holds the same kinds of items (SWAP moves nodes back into it) and starts
//! with every token followed by ROOT. Arc direction follows arc-standard:
//! `LA(r)` attaches the second item under the top (`top -r-> second`) and
//! `RA(r)` attaches the top under the second (`second -r-> top`).
//!
//! Besides the basic constraints (arcs only between confirmed nodes, no SHIFT
//! from an empty buffer, ...) a few caps bound every legal derivation on `n`
//! tokens to at most `20 (n + 1)` actions; see [`MAX_SWAPS_PER_ITEM`],
//! [`MAX_INCOMING_ARCS`] and [`MAX_DEPENDENTS`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

use crate::amr::{AmrGraph, Attribute, Edge};
use crate::corpus::Token;

/// How often one item may be sent back to the buffer by SWAP.
pub const MAX_SWAPS_PER_ITEM: u8 = 3;
/// Maximum number of LA/RA arcs a node may receive as dependent.
pub const MAX_INCOMING_ARCS: u8 = 3;
/// Maximum number of DEPENDENT actions applied to one node.
pub const MAX_DEPENDENTS: u8 = 4;

/// Label of arcs from the ROOT symbol.
pub const ROOT_LABEL: &str = "root";

/// Upper bound on the length of any derivation over `n` tokens.
pub fn step_limit(n: usize) -> usize {
    20 * (n + 1)
}

/// Whether `DEPENDENT(label, value)` creates a constant attribute rather than
/// a fresh concept node.
pub fn is_constant_dependent(label: &str, value: &str) -> bool {
    matches!(label, "polarity" | "mode")
        || value == "-"
        || value == "+"
        || value.starts_with('"')
        || value.parse::<f64>().is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ActionKind {
    Shift,
    Confirm,
    Reduce,
    Merge,
    Entity,
    Dependent,
    LeftArc,
    RightArc,
    Swap,
}

impl ActionKind {
    pub const ALL: [ActionKind; 9] = [
        ActionKind::Shift,
        ActionKind::Confirm,
        ActionKind::Reduce,
        ActionKind::Merge,
        ActionKind::Entity,
        ActionKind::Dependent,
        ActionKind::LeftArc,
        ActionKind::RightArc,
        ActionKind::Swap,
    ];
}

/// A fully parametrized transition. `Confirm(None)` is the inventory form of
/// CONFIRM; applying it requires the predicted concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Shift,
    Confirm(Option<String>),
    Reduce,
    Merge,
    Entity(String),
    Dependent(String, String),
    LeftArc(String),
    RightArc(String),
    Swap,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Shift => ActionKind::Shift,
            Action::Confirm(_) => ActionKind::Confirm,
            Action::Reduce => ActionKind::Reduce,
            Action::Merge => ActionKind::Merge,
            Action::Entity(_) => ActionKind::Entity,
            Action::Dependent(..) => ActionKind::Dependent,
            Action::LeftArc(_) => ActionKind::LeftArc,
            Action::RightArc(_) => ActionKind::RightArc,
            Action::Swap => ActionKind::Swap,
        }
    }

    /// The action with its CONFIRM concept removed, as stored in inventories.
    pub fn template(&self) -> Action {
        match self {
            Action::Confirm(_) => Action::Confirm(None),
            a => a.clone(),
        }
    }

    pub fn confirm(concept: impl Into<String>) -> Action {
        Action::Confirm(Some(concept.into()))
    }

    /// Relation or entity label carried by the action.
    pub fn label(&self) -> Option<&str> {
        match self {
            Action::Entity(l) | Action::Dependent(l, _) | Action::LeftArc(l) | Action::RightArc(l) => Some(l),
            _ => None,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Shift => write!(f, "SHIFT"),
            Action::Confirm(None) => write!(f, "CONFIRM"),
            Action::Confirm(Some(c)) => write!(f, "CONFIRM({c})"),
            Action::Reduce => write!(f, "REDUCE"),
            Action::Merge => write!(f, "MERGE"),
            Action::Entity(l) => write!(f, "ENTITY({l})"),
            Action::Dependent(l, d) => write!(f, "DEPENDENT({l},{d})"),
            Action::LeftArc(l) => write!(f, "LA({l})"),
            Action::RightArc(l) => write!(f, "RA({l})"),
            Action::Swap => write!(f, "SWAP"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse action `{0}`")]
pub struct ActionParseError(pub String);

impl FromStr for Action {
    type Err = ActionParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let err = || ActionParseError(s.to_string());
        let (name, arg) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], Some(&s[i + 1..s.len() - 1])),
            Some(_) => return Err(err()),
            None => (s, None),
        };
        let nonempty = |a: Option<&str>| a.filter(|a| !a.is_empty()).map(str::to_string).ok_or_else(err);
        Ok(match name {
            "SHIFT" if arg.is_none() => Action::Shift,
            "REDUCE" if arg.is_none() => Action::Reduce,
            "MERGE" if arg.is_none() => Action::Merge,
            "SWAP" if arg.is_none() => Action::Swap,
            "CONFIRM" => Action::Confirm(arg.map(str::to_string).filter(|c| !c.is_empty())),
            "ENTITY" => Action::Entity(nonempty(arg)?),
            "LA" => Action::LeftArc(nonempty(arg)?),
            "RA" => Action::RightArc(nonempty(arg)?),
            "DEPENDENT" => {
                let (l, d) = arg.and_then(|a| a.split_once(',')).ok_or_else(err)?;
                if l.is_empty() || d.is_empty() {
                    return Err(err());
                }
                Action::Dependent(l.to_string(), d.to_string())
            }
            _ => return Err(err()),
        })
    }
}

/// Parses one action per line; blank lines and `#` comments are skipped.
pub fn parse_action_lines(text: &str) -> Result<Vec<Action>, ActionParseError> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(str::parse).collect()
}

pub type ItemId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ItemKind {
    Word,
    Node,
    Root,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackItem {
    pub id: ItemId,
    pub kind: ItemKind,
    /// Covered token indices, ascending.
    pub span: Vec<usize>,
    /// Surface form of the covered tokens joined by single spaces.
    pub surface: String,
    pub node: Option<String>,
    pub entity_label: Option<String>,
    /// Times this item was moved back to the buffer by SWAP.
    pub swaps: u8,
}

impl StackItem {
    pub fn is_word(&self) -> bool {
        self.kind == ItemKind::Word
    }

    pub fn is_node(&self) -> bool {
        self.kind == ItemKind::Node
    }

    pub fn is_root(&self) -> bool {
        self.kind == ItemKind::Root
    }

    /// Word items show their surface, nodes their concept, ROOT shows `R`.
    pub fn display(&self, graph: &AmrGraph) -> String {
        match self.kind {
            ItemKind::Word => self.surface.clone(),
            ItemKind::Root => "R".into(),
            ItemKind::Node => {
                let var = self.node.as_deref().unwrap_or_default();
                graph.concept(var).unwrap_or(var).to_string()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("illegal {action}: {reason}")]
    Illegal { action: String, reason: String },
    #[error("no root designated")]
    NoRoot,
    #[error("state is not terminal")]
    NotTerminal,
}

/// Result of turning a finished derivation into a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub graph: AmrGraph,
    /// Nodes dropped because they were not reachable from the root.
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct ParserState {
    tokens: Arc<[String]>,
    /// Bottom first; the top of the stack is the last element.
    stack: Vec<StackItem>,
    buffer: VecDeque<StackItem>,
    history: Vec<Action>,
    /// Partial graph; its `root` is empty until extraction.
    graph: AmrGraph,
    arcs: BTreeSet<(String, String, String)>,
    root_node: Option<String>,
    incoming: BTreeMap<String, u8>,
    dependents: BTreeMap<String, u8>,
    /// Pair exchanged by the latest SWAP, while only SHIFTs followed it.
    last_swap: Option<(ItemId, ItemId)>,
    next_id: ItemId,
}

pub fn initial_state(tokens: &[Token]) -> ParserState {
    ParserState::new(tokens.iter().map(|t| t.surface.as_str()))
}

impl ParserState {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let tokens: Arc<[String]> = words.into_iter().map(str::to_string).collect();
        let mut buffer: VecDeque<StackItem> = tokens
            .iter()
            .enumerate()
            .map(|(i, w)| StackItem {
                id: i as ItemId,
                kind: ItemKind::Word,
                span: vec![i],
                surface: w.clone(),
                node: None,
                entity_label: None,
                swaps: 0,
            })
            .collect();
        let root_id = tokens.len() as ItemId;
        buffer.push_back(StackItem {
            id: root_id,
            kind: ItemKind::Root,
            span: Vec::new(),
            surface: "R".into(),
            node: None,
            entity_label: None,
            swaps: 0,
        });
        let graph =
            AmrGraph { nodes: Default::default(), attributes: Vec::new(), edges: Vec::new(), root: String::new() };
        ParserState {
            tokens,
            stack: Vec::new(),
            buffer,
            history: Vec::new(),
            graph,
            arcs: BTreeSet::new(),
            root_node: None,
            incoming: BTreeMap::new(),
            dependents: BTreeMap::new(),
            last_swap: None,
            next_id: root_id + 1,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Stack items, bottom first (the top is the last element).
    pub fn stack(&self) -> &[StackItem] {
        &self.stack
    }

    /// Stack items from the top down.
    pub fn stack_from_top(&self) -> impl Iterator<Item = &StackItem> {
        self.stack.iter().rev()
    }

    pub fn buffer(&self) -> &VecDeque<StackItem> {
        &self.buffer
    }

    pub fn history(&self) -> &[Action] {
        &self.history
    }

    pub fn graph(&self) -> &AmrGraph {
        &self.graph
    }

    pub fn arcs(&self) -> &BTreeSet<(String, String, String)> {
        &self.arcs
    }

    pub fn root_node(&self) -> Option<&str> {
        self.root_node.as_deref()
    }

    pub fn top(&self) -> Option<&StackItem> {
        self.stack.last()
    }

    pub fn second(&self) -> Option<&StackItem> {
        self.stack.len().checked_sub(2).map(|i| &self.stack[i])
    }

    pub fn is_terminal(&self) -> bool {
        self.stack.is_empty() && self.buffer.is_empty()
    }

    fn incoming_count(&self, var: &str) -> u8 {
        self.incoming.get(var).copied().unwrap_or(0)
    }

    fn dependent_count(&self, var: &str) -> u8 {
        self.dependents.get(var).copied().unwrap_or(0)
    }

    /// Head and dependent items of an LA/RA on the current top pair.
    fn arc_ends(&self, left: bool) -> Option<(&StackItem, &StackItem)> {
        let (top, second) = (self.top()?, self.second()?);
        Some(if left { (top, second) } else { (second, top) })
    }

    /// Structural check for an arc between the top two items, ignoring the label.
    fn arc_shape(&self, left: bool) -> Result<(), String> {
        let (head, dep) = self.arc_ends(left).ok_or("needs two stack items")?;
        if dep.is_root() {
            return Err("ROOT cannot be a dependent".into());
        }
        if !dep.is_node() {
            return Err("dependent is not a confirmed node".into());
        }
        match head.kind {
            ItemKind::Root => {
                if self.root_node.is_some() {
                    return Err("root arc already built".into());
                }
            }
            ItemKind::Node => {
                let dep_var = dep.node.as_deref().expect("node item");
                if self.incoming_count(dep_var) >= MAX_INCOMING_ARCS {
                    return Err("dependent already has the maximum number of heads".into());
                }
            }
            ItemKind::Word => return Err("head is not a confirmed node".into()),
        }
        Ok(())
    }

    fn swap_blocked(&self) -> Result<(), String> {
        let (top, second) = match (self.top(), self.second()) {
            (Some(t), Some(s)) => (t, s),
            _ => return Err("needs two stack items".into()),
        };
        if top.is_root() || second.is_root() {
            return Err("ROOT cannot be swapped".into());
        }
        if second.swaps >= MAX_SWAPS_PER_ITEM {
            return Err("second item has been swapped too often".into());
        }
        if let Some((a, b)) = self.last_swap {
            if (a, b) == (top.id, second.id) || (b, a) == (top.id, second.id) {
                return Err("would undo the previous SWAP".into());
            }
        }
        Ok(())
    }

    fn kind_check(&self, kind: ActionKind) -> Result<(), String> {
        let top = self.top();
        match kind {
            ActionKind::Shift => {
                if self.buffer.is_empty() {
                    return Err("buffer is empty".into());
                }
            }
            ActionKind::Confirm | ActionKind::Entity => match top {
                Some(t) if t.is_word() => {
                    if kind == ActionKind::Entity && t.entity_label.is_some() {
                        return Err("already entity-labeled".into());
                    }
                }
                _ => return Err("top is not a word".into()),
            },
            ActionKind::Reduce => match top {
                None => return Err("stack is empty".into()),
                Some(t) if t.is_root() && self.root_node.is_none() => {
                    let other = ActionKind::ALL.iter().any(|&k| k != ActionKind::Reduce && self.kind_check(k).is_ok());
                    if other {
                        return Err("ROOT cannot be reduced before the root arc".into());
                    }
                }
                Some(_) => {}
            },
            ActionKind::Merge => match (top, self.second()) {
                (Some(t), Some(s)) if t.is_word() && s.is_word() => {}
                _ => return Err("top two items are not both words".into()),
            },
            ActionKind::Dependent => match top {
                Some(t) if t.is_node() => {
                    if self.dependent_count(t.node.as_deref().expect("node")) >= MAX_DEPENDENTS {
                        return Err("node already has the maximum number of dependents".into());
                    }
                }
                _ => return Err("top is not a node".into()),
            },
            ActionKind::LeftArc => self.arc_shape(true)?,
            ActionKind::RightArc => self.arc_shape(false)?,
            ActionKind::Swap => self.swap_blocked()?,
        }
        Ok(())
    }

    /// Action kinds permitted in this state.
    pub fn legal_actions(&self) -> BTreeSet<ActionKind> {
        ActionKind::ALL.iter().copied().filter(|&k| self.kind_check(k).is_ok()).collect()
    }

    /// Full legality check including parameters.
    pub fn check(&self, action: &Action) -> Result<(), String> {
        self.kind_check(action.kind())?;
        match action {
            Action::Confirm(None) => return Err("CONFIRM needs a concept".into()),
            Action::Confirm(Some(c)) if c.trim().is_empty() => return Err("empty concept".into()),
            Action::Entity(l) if l.trim().is_empty() => return Err("empty entity label".into()),
            Action::Dependent(label, value) => {
                if label == ROOT_LABEL {
                    return Err("`root` is reserved for ROOT arcs".into());
                }
                let var = self.top().and_then(|t| t.node.as_deref()).expect("checked");
                if is_constant_dependent(label, value)
                    && self.graph.attributes.iter().any(|a| a.source == var && &a.role == label && &a.value == value)
                {
                    return Err("attribute already present".into());
                }
            }
            Action::LeftArc(label) | Action::RightArc(label) => {
                let left = matches!(action, Action::LeftArc(_));
                let (head, dep) = self.arc_ends(left).expect("checked");
                if head.is_root() != (label == ROOT_LABEL) {
                    return Err("arcs from ROOT, and only those, carry the `root` label".into());
                }
                if let (Some(h), Some(d)) = (&head.node, &dep.node) {
                    if self.arcs.contains(&(h.clone(), label.clone(), d.clone())) {
                        return Err("arc already built".into());
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn is_legal(&self, action: &Action) -> bool {
        self.check(action).is_ok()
    }

    /// Returns the successor state, leaving `self` untouched.
    pub fn apply(&self, action: &Action) -> Result<ParserState, TransitionError> {
        let mut next = self.clone();
        next.apply_mut(action)?;
        Ok(next)
    }

    /// Applies a legal action in place. Illegal actions leave the state unchanged.
    pub fn apply_mut(&mut self, action: &Action) -> Result<(), TransitionError> {
        self.check(action).map_err(|reason| TransitionError::Illegal { action: action.to_string(), reason })?;
        if !matches!(action, Action::Shift | Action::Swap) {
            self.last_swap = None;
        }
        match action {
            Action::Shift => {
                let item = self.buffer.pop_front().expect("checked");
                self.stack.push(item);
            }
            Action::Confirm(concept) => {
                let concept = concept.clone().expect("checked");
                let var = self.add_node(&concept);
                let top = self.stack.last_mut().expect("checked");
                top.kind = ItemKind::Node;
                top.node = Some(var);
            }
            Action::Reduce => {
                self.stack.pop();
            }
            Action::Merge => {
                let top = self.stack.pop().expect("checked");
                let second = self.stack.pop().expect("checked");
                let (first, last) = if second.span.first() <= top.span.first() { (second, top) } else { (top, second) };
                let mut span = first.span.clone();
                span.extend(&last.span);
                span.sort_unstable();
                let item = StackItem {
                    id: self.next_id,
                    kind: ItemKind::Word,
                    span,
                    surface: format!("{} {}", first.surface, last.surface),
                    node: None,
                    entity_label: None,
                    swaps: first.swaps + last.swaps,
                };
                self.next_id += 1;
                self.stack.push(item);
            }
            Action::Entity(label) => {
                let var = self.add_node(label);
                let name = self.add_node("name");
                self.graph.edges.push(Edge { source: var.clone(), role: "name".into(), target: name.clone() });
                let span = self.stack.last().expect("checked").span.clone();
                for (k, &i) in span.iter().enumerate() {
                    let value = format!("\"{}\"", self.tokens[i].replace('"', "\\\""));
                    self.graph.attributes.push(Attribute { source: name.clone(), role: format!("op{}", k + 1), value });
                }
                let top = self.stack.last_mut().expect("checked");
                top.kind = ItemKind::Node;
                top.node = Some(var);
                top.entity_label = Some(label.clone());
            }
            Action::Dependent(label, value) => {
                let head = self.top().and_then(|t| t.node.clone()).expect("checked");
                if is_constant_dependent(label, value) {
                    self.graph.attributes.push(Attribute {
                        source: head.clone(),
                        role: label.clone(),
                        value: value.clone(),
                    });
                } else {
                    let var = self.add_node(value);
                    self.graph.edges.push(Edge { source: head.clone(), role: label.clone(), target: var });
                }
                *self.dependents.entry(head).or_default() += 1;
            }
            Action::LeftArc(label) | Action::RightArc(label) => {
                let left = matches!(action, Action::LeftArc(_));
                let (head, dep) = self.arc_ends(left).expect("checked");
                let dep_var = dep.node.clone().expect("checked");
                if head.is_root() {
                    self.root_node = Some(dep_var);
                } else {
                    let head_var = head.node.clone().expect("checked");
                    self.arcs.insert((head_var.clone(), label.clone(), dep_var.clone()));
                    self.graph.edges.push(Edge { source: head_var, role: label.clone(), target: dep_var.clone() });
                    *self.incoming.entry(dep_var).or_default() += 1;
                }
            }
            Action::Swap => {
                let top = self.stack.pop().expect("checked");
                let mut second = self.stack.pop().expect("checked");
                second.swaps += 1;
                self.last_swap = Some((top.id, second.id));
                self.buffer.push_front(second);
                self.stack.push(top);
            }
        }
        self.history.push(action.clone());
        Ok(())
    }

    fn add_node(&mut self, concept: &str) -> String {
        let var = self.graph.fresh_variable(concept);
        self.graph.nodes.insert(var.clone(), concept.to_string());
        var
    }

    /// The finished graph rooted at the node attached to ROOT.
    pub fn extract_graph(&self) -> Result<Extracted, TransitionError> {
        if !self.is_terminal() {
            return Err(TransitionError::NotTerminal);
        }
        let root = self.root_node.clone().ok_or(TransitionError::NoRoot)?;
        Ok(self.rooted_graph(root))
    }

    /// Graph built so far, rooted at the ROOT attachment or, failing that, at
    /// the most recently created node. `None` when no node exists.
    pub fn partial_graph(&self) -> Option<Extracted> {
        let root = match &self.root_node {
            Some(r) => r.clone(),
            None => {
                let last = self.last_confirmed()?;
                log::warn!("no root arc was built; using `{last}` as root");
                last
            }
        };
        Some(self.rooted_graph(root))
    }

    /// The node most recently created by CONFIRM or ENTITY.
    fn last_confirmed(&self) -> Option<String> {
        let mut vars = self.graph.nodes.keys().rev();
        // Skip nodes introduced by DEPENDENT or as entity name nodes.
        let dependents: BTreeSet<&str> = self
            .graph
            .edges
            .iter()
            .filter(|e| !self.arcs.contains(&(e.source.clone(), e.role.clone(), e.target.clone())))
            .map(|e| e.target.as_str())
            .collect();
        vars.find(|v| !dependents.contains(v.as_str())).cloned().or_else(|| self.graph.nodes.keys().next().cloned())
    }

    fn rooted_graph(&self, root: String) -> Extracted {
        let mut graph = self.graph.clone();
        graph.root = root;
        let dropped = graph.prune_unreachable();
        if dropped > 0 {
            log::debug!("dropped {dropped} node(s) not reachable from the root");
        }
        Extracted { graph, dropped }
    }

    /// Checks the state invariants; used by tests and debug assertions.
    pub fn check_invariants(&self) -> Result<(), String> {
        let roots_in_buffer = self.buffer.iter().filter(|i| i.is_root()).count();
        let roots_in_stack = self.stack.iter().filter(|i| i.is_root()).count();
        if roots_in_buffer + roots_in_stack > 1 {
            return Err("ROOT appears more than once".into());
        }
        if roots_in_buffer == 1 && !self.buffer.back().is_some_and(StackItem::is_root) {
            return Err("ROOT is not at the end of the buffer".into());
        }
        for item in self.stack.iter().chain(self.buffer.iter()) {
            match item.kind {
                ItemKind::Word | ItemKind::Root if item.node.is_some() => {
                    return Err(format!("item {} has a node but is not a node item", item.id))
                }
                ItemKind::Node => {
                    let var = item.node.as_deref().ok_or_else(|| format!("node item {} without node", item.id))?;
                    if !self.graph.nodes.contains_key(var) {
                        return Err(format!("node `{var}` is missing from the graph"));
                    }
                }
                _ => {}
            }
        }
        for (h, l, d) in &self.arcs {
            if !self.graph.edges.iter().any(|e| &e.source == h && &e.role == l && &e.target == d) {
                return Err(format!("arc {h} -{l}-> {d} is not a graph edge"));
            }
        }
        for e in &self.graph.edges {
            if !self.graph.nodes.contains_key(&e.source) || !self.graph.nodes.contains_key(&e.target) {
                return Err("edge references a missing node".into());
            }
        }
        if let Some(r) = &self.root_node {
            if !self.graph.nodes.contains_key(r) {
                return Err("root node is missing from the graph".into());
            }
        }
        Ok(())
    }
}

/// Replays actions from the initial state of `words`.
pub fn replay<'a>(
    words: impl IntoIterator<Item = &'a str>,
    actions: &[Action],
) -> Result<ParserState, TransitionError> {
    let mut state = ParserState::new(words);
    for a in actions {
        state.apply_mut(a)?;
    }
    Ok(state)
}
