//! Static oracle: derives a transition sequence from an aligned gold graph,
//! and collects corpus-wide inventories (actions, word-to-concept lexicon,
//! entity labels, DEPENDENT pairs).
//!
//! At every step the first applicable rule wins:
//!
//! 1. MERGE two words aligned to the same gold node;
//! 2. CONFIRM (or ENTITY for a named-entity subgraph) a word aligned to a
//!    gold node that has not been built; REDUCE words with nothing to build;
//! 3. DEPENDENT for unaligned leaves and constants under the top node;
//! 4. LA/RA for a gold edge between the two top nodes (or the ROOT arc);
//! 5. REDUCE a node with no pending work;
//! 6. SWAP when the top node still needs an item below the second one;
//! 7. SHIFT;
//! 8. otherwise force a REDUCE, abandoning whatever the top still needed.
//!
//! Gold content that the sequence cannot produce is counted, never fatal.

use std::collections::{BTreeMap, BTreeSet};

use crate::amr::{to_triples, AmrGraph, TripleKind, TOP_RELATION};
use crate::corpus::AlignedExample;
use crate::transitions::{is_constant_dependent, step_limit, Action, ItemKind, ParserState, StackItem, ROOT_LABEL};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub actions: Vec<Action>,
    pub reachable: bool,
    /// Gold triples missing from the replayed graph.
    pub skipped_triples: usize,
    /// Graph produced by replaying `actions`; `None` when no root was attached.
    pub graph: Option<AmrGraph>,
}

struct EntityIdiom {
    name_edge: usize,
    name_var: String,
    ops: Vec<String>,
    op_attrs: Vec<usize>,
}

struct Oracle<'a> {
    gold: &'a AmrGraph,
    state: ParserState,
    token_node: Vec<Option<String>>,
    span: BTreeMap<String, Vec<usize>>,
    built: BTreeMap<String, String>,
    gold_of: BTreeMap<String, String>,
    /// Gold edges / attributes that are built or abandoned.
    edge_done: Vec<bool>,
    attr_done: Vec<bool>,
    /// Edges whose target is an unaligned leaf created by DEPENDENT.
    leaf_edge: Vec<bool>,
    dead: BTreeSet<String>,
    root_abandoned: bool,
    entities: BTreeMap<String, EntityIdiom>,
}

fn entity_idiom(gold: &AmrGraph, var: &str) -> Option<EntityIdiom> {
    let (name_edge, e) = gold.edges.iter().enumerate().find(|(_, e)| e.source == var && e.role == "name")?;
    let n = &e.target;
    if gold.concept(n) != Some("name") || gold.outgoing(n).next().is_some() || gold.incoming(n).count() != 1 {
        return None;
    }
    let mut ops: Vec<(usize, usize, String)> = Vec::new();
    for (i, a) in gold.attributes.iter().enumerate().filter(|(_, a)| &a.source == n) {
        let k: usize = a.role.strip_prefix("op")?.parse().ok()?;
        ops.push((k, i, a.value.clone()));
    }
    ops.sort();
    if ops.is_empty() || ops.iter().enumerate().any(|(j, (k, _, _))| *k != j + 1) {
        return None;
    }
    Some(EntityIdiom {
        name_edge,
        name_var: n.clone(),
        op_attrs: ops.iter().map(|(_, i, _)| *i).collect(),
        ops: ops.into_iter().map(|(_, _, v)| v).collect(),
    })
}

impl<'a> Oracle<'a> {
    fn new(example: &'a AlignedExample) -> Self {
        let gold = &example.graph;
        let mut token_node = vec![None; example.tokens.len()];
        let mut span: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut entities = BTreeMap::new();
        for var in gold.nodes.keys() {
            if let Some(idiom) = entity_idiom(gold, var) {
                entities.insert(var.clone(), idiom);
            }
        }
        for a in &example.alignments {
            let mut node = a.node.clone();
            // A span aligned to the name node of an entity stands for the entity.
            if let Some((parent, _)) = entities.iter().find(|(_, idiom)| idiom.name_var == node) {
                if !example.alignments.iter().any(|b| &b.node == parent) {
                    node = parent.clone();
                }
            }
            if span.contains_key(&node) {
                continue;
            }
            let tokens: Vec<usize> = (a.start..a.end).filter(|&i| token_node[i].is_none()).collect();
            for &i in &tokens {
                token_node[i] = Some(node.clone());
            }
            if !tokens.is_empty() {
                span.insert(node, tokens);
            }
        }
        let leaf_edge = gold
            .edges
            .iter()
            .map(|e| {
                let c = &e.target;
                c != &gold.root
                    && !span.contains_key(c)
                    && gold.outgoing(c).next().is_none()
                    && gold.attributes_of(c).next().is_none()
                    && gold.incoming(c).count() == 1
                    && !is_constant_dependent(&e.role, gold.concept(c).unwrap_or_default())
                    && e.role != ROOT_LABEL
            })
            .collect();
        Oracle {
            gold,
            state: ParserState::new(example.tokens.iter().map(|t| t.surface.as_str())),
            token_node,
            span,
            built: BTreeMap::new(),
            gold_of: BTreeMap::new(),
            edge_done: vec![false; gold.edges.len()],
            attr_done: vec![false; gold.attributes.len()],
            leaf_edge,
            dead: BTreeSet::new(),
            root_abandoned: false,
            entities,
        }
    }

    /// Gold node an item stands for: its built node, or the node all its
    /// tokens are aligned to.
    fn gold_node(&self, item: &StackItem) -> Option<String> {
        match item.kind {
            ItemKind::Node => self.gold_of.get(item.node.as_deref()?).cloned(),
            ItemKind::Word => {
                let first = self.token_node.get(*item.span.first()?)?.clone()?;
                item.span.iter().all(|&i| self.token_node[i].as_deref() == Some(&first)).then_some(first)
            }
            ItemKind::Root => None,
        }
    }

    fn root_live(&self) -> bool {
        self.state.root_node().is_none()
            && !self.root_abandoned
            && (self.state.buffer().iter().any(StackItem::is_root) || self.state.stack().iter().any(StackItem::is_root))
    }

    /// A gold node can still take part in arcs.
    fn live(&self, var: &str) -> bool {
        !self.dead.contains(var) && (self.built.contains_key(var) || self.span.contains_key(var))
    }

    fn pending_edges(&self, g: &str) -> Vec<usize> {
        self.gold
            .edges
            .iter()
            .enumerate()
            .filter(|(i, e)| {
                !self.edge_done[*i]
                    && !self.leaf_edge[*i]
                    && e.source != e.target
                    && (e.source == g || e.target == g)
                    && self.live(if e.source == g { &e.target } else { &e.source })
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn pending_dependent(&self, g: &str) -> Option<(Action, Result<usize, usize>)> {
        let edge = self
            .gold
            .edges
            .iter()
            .enumerate()
            .find(|(i, e)| !self.edge_done[*i] && self.leaf_edge[*i] && e.source == g);
        if let Some((i, e)) = edge {
            let concept = self.gold.concept(&e.target).unwrap_or_default().to_string();
            return Some((Action::Dependent(e.role.clone(), concept), Ok(i)));
        }
        let attr = self
            .gold
            .attributes
            .iter()
            .enumerate()
            .find(|(i, a)| !self.attr_done[*i] && a.source == g && is_constant_dependent(&a.role, &a.value));
        attr.map(|(i, a)| (Action::Dependent(a.role.clone(), a.value.clone()), Err(i)))
    }

    fn needs_root(&self, g: &str) -> bool {
        g == self.gold.root && self.root_live()
    }

    fn needs_anything(&self, g: &str) -> bool {
        !self.pending_edges(g).is_empty() || self.pending_dependent(g).is_some() || self.needs_root(g)
    }

    /// Depth (0 = top) of the stack item standing for gold node `y`.
    fn stack_depth(&self, y: &str) -> Option<usize> {
        self.state.stack_from_top().position(|item| self.gold_node(item).as_deref() == Some(y))
    }

    fn apply(&mut self, action: Action) {
        let before_nodes = self.state.graph().nodes.len();
        let top_gold = self.state.top().and_then(|t| self.gold_node(t));
        if let Action::Reduce = action {
            if let Some(g) = &top_gold {
                self.dead.insert(g.clone());
            }
        }
        self.state.apply_mut(&action).expect("oracle chose a legal action");
        match &action {
            Action::Confirm(_) | Action::Entity(_) => {
                let g = top_gold.expect("aligned word");
                let var = self.state.top().and_then(|t| t.node.clone()).expect("node");
                self.built.insert(g.clone(), var.clone());
                self.gold_of.insert(var.clone(), g.clone());
                if let (Action::Entity(_), Some(idiom)) = (&action, self.entities.get(&g)) {
                    let name = self.state.graph().nodes.keys().nth(before_nodes + 1).cloned().expect("name node");
                    self.built.insert(idiom.name_var.clone(), name.clone());
                    self.gold_of.insert(name, idiom.name_var.clone());
                    self.edge_done[idiom.name_edge] = true;
                    for &i in &idiom.op_attrs {
                        self.attr_done[i] = true;
                    }
                }
            }
            _ => {}
        }
    }

    fn mark_dependent(&mut self, which: Result<usize, usize>) {
        match which {
            Ok(i) => {
                self.edge_done[i] = true;
                let created = self.state.graph().nodes.keys().last().cloned().expect("dependent node");
                let target = self.gold.edges[i].target.clone();
                self.built.insert(target.clone(), created.clone());
                self.gold_of.insert(created, target);
            }
            Err(i) => self.attr_done[i] = true,
        }
    }

    /// Abandons everything the top item still needs.
    fn abandon_top(&mut self) {
        let Some(g) = self.state.top().and_then(|t| self.gold_node(t)) else { return };
        for i in self.pending_edges(&g) {
            self.edge_done[i] = true;
        }
        while let Some((_, which)) = self.pending_dependent(&g) {
            match which {
                Ok(i) => self.edge_done[i] = true,
                Err(i) => self.attr_done[i] = true,
            }
        }
        if g == self.gold.root {
            self.root_abandoned = true;
        }
    }

    fn step(&mut self) {
        let state = &self.state;
        let top = state.top().cloned();
        let second = state.second().cloned();
        let top_gold = top.as_ref().and_then(|t| self.gold_node(t));

        // 1. MERGE
        if let (Some(t), Some(s)) = (&top, &second) {
            if t.is_word() && s.is_word() {
                let sg = self.gold_node(s);
                if top_gold.is_some() && top_gold == sg && !self.built.contains_key(top_gold.as_deref().unwrap()) {
                    return self.apply(Action::Merge);
                }
            }
        }

        // 2. words
        if let Some(t) = top.as_ref().filter(|t| t.is_word()) {
            if let Some(g) = top_gold.as_ref().filter(|g| !self.built.contains_key(*g) && !self.dead.contains(*g)) {
                let span = &self.span[g];
                let next_in_span =
                    state.buffer().front().filter(|b| b.is_word() && b.span.iter().all(|i| span.contains(i))).is_some();
                if t.span.len() < span.len() && next_in_span {
                    return self.apply(Action::Shift);
                }
                let entity = self.entities.get(g).filter(|idiom| {
                    idiom.ops.len() == t.span.len()
                        && idiom
                            .ops
                            .iter()
                            .zip(&t.span)
                            .all(|(op, &i)| *op == format!("\"{}\"", state.tokens()[i].replace('"', "\\\"")))
                });
                let concept = self.gold.concept(g).unwrap_or_default().to_string();
                let action = if entity.is_some() { Action::Entity(concept) } else { Action::confirm(concept) };
                return self.apply(action);
            }
            return self.apply(Action::Reduce);
        }

        if top.as_ref().is_some_and(StackItem::is_node) {
            let g = top_gold.clone().unwrap_or_default();
            // 3. DEPENDENT
            while let Some((action, which)) = self.pending_dependent(&g) {
                if self.state.is_legal(&action) {
                    self.apply(action);
                    return self.mark_dependent(which);
                }
                match which {
                    Ok(i) => self.edge_done[i] = true,
                    Err(i) => self.attr_done[i] = true,
                }
            }
            // 4. arcs with the second item
            if let Some(s) = &second {
                if s.is_root() {
                    if self.needs_root(&g) {
                        let a = Action::RightArc(ROOT_LABEL.into());
                        if self.state.is_legal(&a) {
                            return self.apply(a);
                        }
                    }
                } else if let Some(sg) = self.gold_node(s).filter(|_| s.is_node()) {
                    for i in self.pending_edges(&g) {
                        let e = &self.gold.edges[i];
                        let action = if e.source == g && e.target == sg {
                            Action::LeftArc(e.role.clone())
                        } else if e.source == sg && e.target == g {
                            Action::RightArc(e.role.clone())
                        } else {
                            continue;
                        };
                        if self.state.is_legal(&action) {
                            self.edge_done[i] = true;
                            return self.apply(action);
                        }
                        self.edge_done[i] = true;
                    }
                }
            }
            // 5. REDUCE finished nodes
            if !self.needs_anything(&g) {
                return self.apply(Action::Reduce);
            }
            // 6. SWAP to reach deeper items
            let deeper = self.pending_edges(&g).iter().any(|&i| {
                let e = &self.gold.edges[i];
                let y = if e.source == g { &e.target } else { &e.source };
                self.stack_depth(y).is_some_and(|d| d >= 2)
            }) || (self.needs_root(&g) && self.state.stack_from_top().skip(2).any(StackItem::is_root));
            if deeper && self.state.is_legal(&Action::Swap) {
                return self.apply(Action::Swap);
            }
        }

        if top.as_ref().is_some_and(StackItem::is_root) {
            if self.state.root_node().is_none() {
                let gold_root_below =
                    second.as_ref().and_then(|s| self.gold_node(s)).as_deref() == Some(&self.gold.root);
                let attach = Action::LeftArc(ROOT_LABEL.into());
                if (gold_root_below || !self.live(&self.gold.root)) && self.state.is_legal(&attach) {
                    return self.apply(attach);
                }
            }
            if self.state.is_legal(&Action::Reduce) {
                return self.apply(Action::Reduce);
            }
        }

        // 7. SHIFT
        if let Some(front) = self.state.buffer().front() {
            let root_next = front.is_root();
            let gold_root_in_stack = self.stack_depth(&self.gold.root).is_some_and(|d| d > 0);
            if !(root_next && gold_root_in_stack && top.as_ref().is_some_and(|t| !t.is_root())) {
                return self.apply(Action::Shift);
            }
        }

        // 8. give up on the top item
        self.abandon_top();
        if self.state.is_legal(&Action::Reduce) {
            return self.apply(Action::Reduce);
        }
        let fallback = [Action::Shift, Action::LeftArc(ROOT_LABEL.into()), Action::RightArc(ROOT_LABEL.into())]
            .into_iter()
            .find(|a| self.state.is_legal(a))
            .expect("non-terminal states always admit an action");
        self.apply(fallback)
    }

    fn run(mut self) -> OracleResult {
        let limit = step_limit(self.state.tokens().len());
        while !self.state.is_terminal() && self.state.history().len() < limit {
            self.step();
        }
        debug_assert!(self.state.is_terminal(), "oracle exceeded the step limit");
        let graph = self.state.extract_graph().ok().map(|e| e.graph);
        let skipped = self.count_skipped(graph.as_ref());
        OracleResult {
            actions: self.state.history().to_vec(),
            reachable: skipped == 0,
            skipped_triples: skipped,
            graph,
        }
    }

    fn count_skipped(&self, graph: Option<&AmrGraph>) -> usize {
        let empty = AmrGraph::single("", "");
        let out = graph.unwrap_or(&empty);
        let present = to_triples(out);
        let mut skipped = 0;
        let mut root_instance = false;
        for t in to_triples(self.gold) {
            if t.relation == TOP_RELATION && t.kind == TripleKind::Attribute {
                continue;
            }
            let map = |v: &str| self.built.get(v).filter(|b| out.nodes.contains_key(*b)).cloned();
            let Some(a1) = map(&t.arg1) else {
                skipped += 1;
                continue;
            };
            let arg2 = match t.kind {
                TripleKind::Relation => match map(&t.arg2) {
                    Some(v) => v,
                    None => {
                        skipped += 1;
                        continue;
                    }
                },
                _ => t.arg2.clone(),
            };
            let found =
                present.iter().any(|p| p.kind == t.kind && p.relation == t.relation && p.arg1 == a1 && p.arg2 == arg2);
            if found {
                root_instance |= t.kind == TripleKind::Instance && t.arg1 == self.gold.root;
            } else {
                skipped += 1;
            }
        }
        if root_instance && graph.is_some_and(|g| Some(&g.root) != self.built.get(&self.gold.root)) {
            skipped += 1;
        }
        if root_instance && graph.is_none() {
            skipped += 1;
        }
        skipped
    }
}

pub fn derive_actions(example: &AlignedExample) -> OracleResult {
    Oracle::new(example).run()
}

/// Word (lowercased) to candidate concepts, most frequent first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeLexicon {
    entries: BTreeMap<String, BTreeMap<String, usize>>,
}

impl NodeLexicon {
    pub fn add(&mut self, word: &str, concept: &str, count: usize) {
        *self.entries.entry(word.to_lowercase()).or_default().entry(concept.to_string()).or_default() += count;
    }

    /// Candidates ranked by count (descending), then concept.
    pub fn candidates(&self, word: &str) -> Option<Vec<(String, usize)>> {
        let m = self.entries.get(&word.to_lowercase())?;
        let mut v: Vec<(String, usize)> = m.iter().map(|(c, n)| (c.clone(), *n)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Some(v)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Every concept any word can produce, sorted.
    pub fn concepts(&self) -> BTreeSet<String> {
        self.entries.values().flat_map(|m| m.keys().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `word<TAB>concept<TAB>count` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for w in self.entries.keys() {
            for (c, n) in self.candidates(w).unwrap_or_default() {
                out.push_str(&format!("{w}\t{c}\t{n}\n"));
            }
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, String> {
        let mut lex = NodeLexicon::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let [w, c, n] = cols[..] else {
                return Err(format!("lexicon line {}: expected 3 columns", i + 1));
            };
            let n: usize = n.trim().parse().map_err(|_| format!("lexicon line {}: bad count", i + 1))?;
            if n == 0 {
                return Err(format!("lexicon line {}: zero count", i + 1));
            }
            lex.add(w, c, n);
        }
        Ok(lex)
    }
}

/// Distinct instantiated actions in a fixed order; CONFIRM appears once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionInventory {
    actions: Vec<Action>,
    index: BTreeMap<Action, usize>,
}

impl ActionInventory {
    pub fn new(actions: impl IntoIterator<Item = Action>) -> Self {
        let set: BTreeSet<Action> = actions.into_iter().map(|a| a.template()).collect();
        let actions: Vec<Action> = set.into_iter().collect();
        let index = actions.iter().enumerate().map(|(i, a)| (a.clone(), i)).collect();
        ActionInventory { actions, index }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn get(&self, i: usize) -> Option<&Action> {
        self.actions.get(i)
    }

    pub fn index_of(&self, action: &Action) -> Option<usize> {
        self.index.get(&action.template()).copied()
    }

    pub fn contains(&self, action: &Action) -> bool {
        self.index_of(action).is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InventorySet {
    pub action_inventory: ActionInventory,
    pub lexicon: NodeLexicon,
    pub entity_labels: BTreeSet<String>,
    pub dependent_pairs: BTreeSet<(String, String)>,
}

impl InventorySet {
    /// Inventories implied by an action list plus a lexicon.
    pub fn from_parts(actions: ActionInventory, lexicon: NodeLexicon) -> Self {
        let mut entity_labels = BTreeSet::new();
        let mut dependent_pairs = BTreeSet::new();
        for a in actions.actions() {
            match a {
                Action::Entity(l) => {
                    entity_labels.insert(l.clone());
                }
                Action::Dependent(l, d) => {
                    dependent_pairs.insert((l.clone(), d.clone()));
                }
                _ => {}
            }
        }
        InventorySet { action_inventory: actions, lexicon, entity_labels, dependent_pairs }
    }

    /// One action per line in inventory order.
    pub fn actions_text(&self) -> String {
        self.action_inventory.actions().iter().map(|a| format!("{a}\n")).collect()
    }
}

/// Records what one derivation contributes to the inventories.
pub fn collect_inventories<'a>(
    derivations: impl IntoIterator<Item = (&'a AlignedExample, &'a [Action])>,
) -> InventorySet {
    let mut actions = Vec::new();
    let mut lexicon = NodeLexicon::default();
    for (example, seq) in derivations {
        let mut state = ParserState::new(example.tokens.iter().map(|t| t.surface.as_str()));
        for a in seq {
            if let Action::Confirm(Some(c)) = a {
                if let Some(top) = state.top() {
                    lexicon.add(&top.surface, c, 1);
                }
            }
            if state.apply_mut(a).is_err() {
                log::warn!("skipping the rest of an unreplayable derivation at `{a}`");
                break;
            }
            actions.push(a.template());
        }
    }
    InventorySet::from_parts(ActionInventory::new(actions), lexicon)
}

pub fn build_inventories(corpus: &[AlignedExample]) -> InventorySet {
    let derived: Vec<OracleResult> = corpus.iter().map(derive_actions).collect();
    collect_inventories(corpus.iter().zip(derived.iter().map(|r| r.actions.as_slice())))
}
