#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;

use amrstack::amr::split_blocks;
use amrstack::amr::{Attribute, Edge};
use amrstack::corpus::{metadata_field, parse_corpus};
use amrstack::oracle::derive_actions;
use amrstack::{AlignedExample, AmrGraph};
use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn read_data(name: &str) -> String {
    std::fs::read_to_string(data_path(name)).unwrap()
}

pub const ADVOCATED: &str = "(r / recommend-01
    :ARG1 (a / advocate-01
        :ARG1 (i / it)
        :manner (v / vigorous)))";

/// One printed row of a transition table: action, stack (top first), buffer.
pub struct Row {
    pub action: String,
    pub stack: Vec<String>,
    pub buffer: Vec<String>,
}

pub fn read_rows(name: &str) -> Vec<Row> {
    let split = |s: &str| s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
    read_data(name)
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let cols: Vec<&str> = l.split('|').collect();
            assert_eq!(cols.len(), 3, "bad row `{l}`");
            Row { action: cols[0].trim().to_string(), stack: split(cols[1]), buffer: split(cols[2]) }
        })
        .collect()
}

const NOUNS: &[&str] = &["boy", "girl", "dog", "cat", "teacher", "bird", "child", "doctor"];
const ADJECTIVES: &[&str] = &["big", "small", "happy", "old", "red"];
const TRANSITIVE: &[(&str, &str)] =
    &[("sees", "see-01"), ("likes", "like-01"), ("chases", "chase-01"), ("helps", "help-01"), ("finds", "find-01")];
const INTRANSITIVE: &[(&str, &str, &str)] = &[
    ("sleeps", "sleep", "sleep-01"),
    ("runs", "run", "run-02"),
    ("sings", "sing", "sing-01"),
    ("laughs", "laugh", "laugh-01"),
];
const NAMES: &[(&str, &str)] = &[("John", "Smith"), ("Mary", "Jones"), ("Ana", "Silva"), ("Li", "Wei")];

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).unwrap()
}

/// Aligned corpus text of `n` distinct sentences from a small grammar with
/// one concept per word, covering arcs, modifiers, polarity, control
/// reentrancy and named entities.
pub fn synthetic_corpus_text(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = String::new();
    while seen.len() < n {
        let (tokens, align, graph) = match rng.gen_range(0..5) {
            0 => {
                let (a, b) = (pick(&mut rng, NOUNS), pick(&mut rng, NOUNS));
                let (v, c) = pick(&mut rng, TRANSITIVE);
                (
                    format!("The {a} {v} the {b}"),
                    "1-2|0.0 2-3|0 4-5|0.1",
                    format!("(v / {c} :ARG0 (x / {a}) :ARG1 (y / {b}))"),
                )
            }
            1 => {
                let (adj, a) = (pick(&mut rng, ADJECTIVES), pick(&mut rng, NOUNS));
                let (v, _, c) = pick(&mut rng, INTRANSITIVE);
                (
                    format!("The {adj} {a} {v}"),
                    "1-2|0.0.0 2-3|0.0 3-4|0",
                    format!("(v / {c} :ARG0 (x / {a} :mod (m / {adj})))"),
                )
            }
            2 => {
                let (a, b) = (pick(&mut rng, NOUNS), pick(&mut rng, NOUNS));
                let (v, c) = pick(&mut rng, TRANSITIVE);
                (
                    format!("The {a} never {v} the {b}"),
                    "1-2|0.0 3-4|0 5-6|0.1",
                    format!("(v / {c} :ARG0 (x / {a}) :ARG1 (y / {b}) :polarity -)"),
                )
            }
            3 => {
                let a = pick(&mut rng, NOUNS);
                let (_, v, c) = pick(&mut rng, INTRANSITIVE);
                (
                    format!("The {a} wants to {v}"),
                    "1-2|0.0 2-3|0 4-5|0.1",
                    format!("(w / want-01 :ARG0 (x / {a}) :ARG1 (v / {c} :ARG0 x))"),
                )
            }
            _ => {
                let (first, last) = pick(&mut rng, NAMES);
                let b = pick(&mut rng, NOUNS);
                let (v, c) = pick(&mut rng, TRANSITIVE);
                (
                    format!("{first} {last} {v} the {b}"),
                    "0-2|0.0.0 2-3|0 4-5|0.1",
                    format!("(v / {c} :ARG0 (p / person :name (n / name :op1 \"{first}\" :op2 \"{last}\")) :ARG1 (y / {b}))"),
                )
            }
        };
        if seen.insert(tokens.clone()) {
            out.push_str(&format!("# ::snt {tokens}\n# ::alignments {align}\n{graph}\n\n"));
        }
    }
    out
}

/// The synthetic corpus, checked to be fully reachable by the oracle.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<AlignedExample> {
    let corpus = parse_corpus(&synthetic_corpus_text(n, seed)).unwrap();
    for ex in &corpus {
        assert!(derive_actions(ex).reachable, "synthetic sentence not reachable: {:?}", ex.surfaces());
    }
    corpus
}

const CONCEPTS: &[&str] = &["a", "b", "c", "d"];
const ROLES: &[&str] = &["ARG0", "ARG1", "mod"];

/// Random valid graph with `1..=max_vars` variables from a deliberately tiny
/// concept and role alphabet so that many mappings tie.
pub fn random_graph(rng: &mut impl Rng, max_vars: usize, prefix: &str) -> AmrGraph {
    let n = rng.gen_range(1..=max_vars);
    let vars: Vec<String> = (0..n).map(|i| format!("{prefix}{i}")).collect();
    let mut nodes = IndexMap::new();
    for v in &vars {
        nodes.insert(v.clone(), CONCEPTS[rng.gen_range(0..CONCEPTS.len())].to_string());
    }
    let mut edges = Vec::new();
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        edges.push(Edge {
            source: vars[parent].clone(),
            role: ROLES[rng.gen_range(0..3)].into(),
            target: vars[i].clone(),
        });
    }
    for _ in 0..rng.gen_range(0..=n / 2) {
        let (s, t) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let e = Edge { source: vars[s].clone(), role: ROLES[rng.gen_range(0..3)].into(), target: vars[t].clone() };
        if s != t && !edges.contains(&e) {
            edges.push(e);
        }
    }
    let mut attributes = Vec::new();
    for v in &vars {
        if rng.gen_bool(0.2) {
            attributes.push(Attribute { source: v.clone(), role: "polarity".into(), value: "-".into() });
        }
        if rng.gen_bool(0.15) {
            attributes.push(Attribute {
                source: v.clone(),
                role: "quant".into(),
                value: rng.gen_range(1..3).to_string(),
            });
        }
    }
    let g = AmrGraph { nodes, attributes, edges, root: vars[0].clone() };
    g.validate().unwrap();
    g
}

/// A copy of `g` with variables renamed and some edges and attributes dropped.
pub fn perturb(rng: &mut impl Rng, g: &AmrGraph, prefix: &str) -> AmrGraph {
    let rename = |v: &str| format!("{prefix}{v}");
    let mut out = AmrGraph {
        nodes: g.nodes.iter().map(|(v, c)| (rename(v), c.clone())).collect(),
        attributes: g
            .attributes
            .iter()
            .filter(|_| rng.gen_bool(0.7))
            .map(|a| Attribute { source: rename(&a.source), ..a.clone() })
            .collect(),
        edges: g
            .edges
            .iter()
            .map(|e| Edge { source: rename(&e.source), role: e.role.clone(), target: rename(&e.target) })
            .collect(),
        root: rename(&g.root),
    };
    // Dropping an edge can strand a subtree; those nodes are pruned below.
    let mut kept = Vec::new();
    for e in std::mem::take(&mut out.edges) {
        if rng.gen_bool(0.25) {
            continue;
        }
        kept.push(if rng.gen_bool(0.15) { Edge { role: ROLES[rng.gen_range(0..3)].into(), ..e } } else { e });
    }
    out.edges = kept;
    for c in out.nodes.values_mut() {
        if rng.gen_bool(0.15) {
            *c = CONCEPTS[rng.gen_range(0..CONCEPTS.len())].to_string();
        }
    }
    out.prune_unreachable();
    out
}

/// Independent exhaustive Smatch: best matched-triple count over every
/// partial injection of gold variables into predicted variables.
pub fn exhaustive_matched(gold: &AmrGraph, pred: &AmrGraph) -> usize {
    let gv: Vec<&String> = gold.nodes.keys().collect();
    let pv: Vec<&String> = pred.nodes.keys().collect();
    let mut map: Vec<Option<usize>> = vec![None; gv.len()];
    let mut used = vec![false; pv.len()];
    let mut best = 0;
    search(gold, pred, &gv, &pv, 0, &mut map, &mut used, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    gold: &AmrGraph,
    pred: &AmrGraph,
    gv: &[&String],
    pv: &[&String],
    i: usize,
    map: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    best: &mut usize,
) {
    if i == gv.len() {
        *best = (*best).max(count(gold, pred, gv, pv, map));
        return;
    }
    map[i] = None;
    search(gold, pred, gv, pv, i + 1, map, used, best);
    for j in 0..pv.len() {
        if !used[j] {
            used[j] = true;
            map[i] = Some(j);
            search(gold, pred, gv, pv, i + 1, map, used, best);
            used[j] = false;
            map[i] = None;
        }
    }
}

fn count(gold: &AmrGraph, pred: &AmrGraph, gv: &[&String], pv: &[&String], map: &[Option<usize>]) -> usize {
    let image = |v: &str| gv.iter().position(|g| *g == v).and_then(|i| map[i]).map(|j| pv[j].as_str());
    let mut n = 0;
    for (v, c) in &gold.nodes {
        if image(v).is_some_and(|p| pred.nodes[p] == *c) {
            n += 1;
        }
    }
    if image(&gold.root) == Some(pred.root.as_str()) && gold.nodes[&gold.root] == pred.nodes[&pred.root] {
        n += 1;
    }
    for a in &gold.attributes {
        if let Some(p) = image(&a.source) {
            if pred.attributes.iter().any(|b| b.source == p && b.role == a.role && b.value == a.value) {
                n += 1;
            }
        }
    }
    for e in &gold.edges {
        if let (Some(s), Some(t)) = (image(&e.source), image(&e.target)) {
            if pred.edges.iter().any(|f| f.source == s && f.role == e.role && f.target == t) {
                n += 1;
            }
        }
    }
    n
}

const WORDS: &[&str] = &["the", "boy", "New", "York", "not", "runs", "5", "it", "and", "big"];

pub fn random_sentence(rng: &mut impl Rng, min: usize, max: usize) -> Vec<String> {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

/// Concrete actions worth trying from any state; the legal ones are the
/// rollout's choices.
pub fn candidate_actions() -> Vec<amrstack::Action> {
    use amrstack::Action::*;
    let mut out = vec![
        Shift,
        Reduce,
        Merge,
        Swap,
        Confirm(None),
        Confirm(Some("thing".into())),
        Entity("city".into()),
        Dependent("polarity".into(), "-".into()),
        Dependent("mod".into(), "very".into()),
    ];
    for l in ["ARG0", "ARG1", "mod", "root"] {
        out.push(LeftArc(l.into()));
        out.push(RightArc(l.into()));
    }
    out
}

/// Hand-counted skipped triples for the sentences whose alignments are
/// incomplete; every other sentence must be reachable with nothing skipped.
pub const HAND_SKIPPED: &[(&str, usize)] = &[
    // want-01 unaligned: no root arc, so nothing survives; 3 instances + 3 edges.
    ("unaligned-root", 6),
    // nothing aligned: every triple but TOP.
    ("unaligned-all", 3),
    // leave-11 unaligned: its instance, both its edges, and the stranded boy.
    ("unaligned-middle", 4),
];

pub fn hand_aligned_suite() -> Vec<(String, amrstack::AlignedExample)> {
    let text = read_data("handaligned.amr");
    let ids: Vec<String> = split_blocks(&text)
        .iter()
        .map(|b| b.comments.iter().find_map(|c| metadata_field(c, "id")).unwrap().to_string())
        .collect();
    let corpus = parse_corpus(&text).unwrap();
    assert_eq!(ids.len(), corpus.len());
    ids.into_iter().zip(corpus).collect()
}

/// Writes a small pretrained table covering most of the corpus vocabulary.
pub fn write_embeddings(corpus: &[AlignedExample], dim: usize, path: &std::path::Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut words: Vec<String> =
        corpus.iter().flat_map(|e| e.tokens.iter().map(|t| t.surface.to_lowercase())).collect();
    words.sort();
    words.dedup();
    words.retain(|w| w.len() % 4 != 0);
    let mut text = format!("{} {dim}\n", words.len());
    for w in words {
        let v: Vec<String> = (0..dim).map(|_| format!("{:.4}", rng.gen_range(-0.5..0.5))).collect();
        text.push_str(&format!("{w} {}\n", v.join(" ")));
    }
    std::fs::write(path, text).unwrap();
}
