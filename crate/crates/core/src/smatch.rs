//! Smatch: triple-overlap F1 between AMR graphs, maximised over variable
//! mappings. Hill climbing with restarts is the default scorer; the exhaustive
//! search is the exactness oracle for small graphs.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::amr::{serialize_penman, to_triples, AmrGraph, TripleKind};

pub const DEFAULT_RESTARTS: usize = 4;
/// Largest `min(|gold vars|, |pred vars|)` the exhaustive search accepts.
pub const BRUTE_FORCE_MAX_VARS: usize = 8;
const BRUTE_FORCE_MAX_MAPPINGS: f64 = 5e7;

#[derive(Debug, Clone, PartialEq)]
pub struct MappingSearchResult {
    /// Gold variable to predicted variable; unmapped gold variables are absent.
    pub mapping: BTreeMap<String, String>,
    pub matched: usize,
    pub gold_triples: usize,
    pub pred_triples: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmatchError {
    #[error("exhaustive search refused: {gold} gold and {pred} predicted variables exceed the cap")]
    TooLarge { gold: usize, pred: usize },
    #[error("{gold} gold graphs but {pred} predictions")]
    LengthMismatch { gold: usize, pred: usize },
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Indexed form of one graph pair.
struct Problem {
    gold_vars: Vec<String>,
    pred_vars: Vec<String>,
    /// `unary[g][p]`: instance/attribute triples of `g` matched when `g -> p`.
    unary: Vec<Vec<usize>>,
    /// Gold relation triples as (source, label id, target).
    gold_rel: Vec<(usize, usize, usize)>,
    pred_rel: HashSet<(usize, usize, usize)>,
    /// Indices into `gold_rel` touching each gold variable.
    incident: Vec<Vec<usize>>,
    gold_triples: usize,
    pred_triples: usize,
}

impl Problem {
    fn new(gold: &AmrGraph, pred: &AmrGraph) -> Self {
        let gold_vars: Vec<String> = gold.nodes.keys().cloned().collect();
        let pred_vars: Vec<String> = pred.nodes.keys().cloned().collect();
        let gidx: HashMap<&str, usize> = gold_vars.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        let pidx: HashMap<&str, usize> = pred_vars.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();

        let gold_t = to_triples(gold);
        let pred_t = to_triples(pred);
        let mut labels: HashMap<String, usize> = HashMap::new();
        let mut label_id = |l: &str| {
            let n = labels.len();
            *labels.entry(l.to_string()).or_insert(n)
        };

        let mut gold_unary: Vec<Vec<(String, String)>> = vec![Vec::new(); gold_vars.len()];
        let mut pred_unary: Vec<HashSet<(String, String)>> = vec![HashSet::new(); pred_vars.len()];
        let mut gold_rel = Vec::new();
        let mut pred_rel = HashSet::new();
        for t in &gold_t {
            let a = gidx[t.arg1.as_str()];
            match t.kind {
                TripleKind::Relation => gold_rel.push((a, label_id(&t.relation), gidx[t.arg2.as_str()])),
                _ => gold_unary[a].push((t.relation.clone(), t.arg2.clone())),
            }
        }
        for t in &pred_t {
            let a = pidx[t.arg1.as_str()];
            match t.kind {
                TripleKind::Relation => {
                    pred_rel.insert((a, label_id(&t.relation), pidx[t.arg2.as_str()]));
                }
                _ => {
                    pred_unary[a].insert((t.relation.clone(), t.arg2.clone()));
                }
            }
        }
        let unary = gold_unary
            .iter()
            .map(|gu| pred_unary.iter().map(|pu| gu.iter().filter(|k| pu.contains(*k)).count()).collect())
            .collect();
        let mut incident = vec![Vec::new(); gold_vars.len()];
        for (i, &(a, _, b)) in gold_rel.iter().enumerate() {
            incident[a].push(i);
            if b != a {
                incident[b].push(i);
            }
        }
        Problem {
            gold_vars,
            pred_vars,
            unary,
            gold_rel,
            pred_rel,
            incident,
            gold_triples: gold_t.len(),
            pred_triples: pred_t.len(),
        }
    }

    fn rel_matched(&self, m: &[Option<usize>], r: usize) -> bool {
        let (a, l, b) = self.gold_rel[r];
        match (m[a], m[b]) {
            (Some(pa), Some(pb)) => self.pred_rel.contains(&(pa, l, pb)),
            _ => false,
        }
    }

    fn score(&self, m: &[Option<usize>]) -> usize {
        let unary: usize = m.iter().enumerate().filter_map(|(g, p)| p.map(|p| self.unary[g][p])).sum();
        unary + (0..self.gold_rel.len()).filter(|&r| self.rel_matched(m, r)).count()
    }

    /// Score contribution of the given gold variables (unary plus incident relations).
    fn local(&self, m: &[Option<usize>], vars: &[usize]) -> usize {
        let mut rels: Vec<usize> = vars.iter().flat_map(|&g| self.incident[g].iter().copied()).collect();
        rels.sort_unstable();
        rels.dedup();
        let unary: usize = vars.iter().filter_map(|&g| m[g].map(|p| self.unary[g][p])).sum();
        unary + rels.into_iter().filter(|&r| self.rel_matched(m, r)).count()
    }

    fn result(&self, mapping: &[Option<usize>], matched: usize) -> MappingSearchResult {
        let precision = ratio(matched, self.pred_triples);
        let recall = ratio(matched, self.gold_triples);
        MappingSearchResult {
            mapping: mapping
                .iter()
                .enumerate()
                .filter_map(|(g, p)| p.map(|p| (self.gold_vars[g].clone(), self.pred_vars[p].clone())))
                .collect(),
            matched,
            gold_triples: self.gold_triples,
            pred_triples: self.pred_triples,
            precision,
            recall,
            f1: f1_score(precision, recall),
        }
    }

    /// Greedy seed: gold variables in definition order each take the free
    /// predicted variable that matches the most instance, attribute and
    /// relation triples given the choices made so far. Variables are mapped
    /// even when nothing matches yet, so single moves can later pick up
    /// relations between nodes whose concepts differ.
    fn smart_init(&self) -> Vec<Option<usize>> {
        let mut used = vec![false; self.pred_vars.len()];
        let mut m = vec![None; self.gold_vars.len()];
        for g in 0..self.gold_vars.len() {
            let best = (0..self.pred_vars.len())
                .filter(|&p| !used[p])
                .map(|p| {
                    m[g] = Some(p);
                    let gain = self.local(&m, &[g]);
                    m[g] = None;
                    (gain, p)
                })
                .max_by_key(|&(gain, p)| (gain, std::cmp::Reverse(p)));
            if let Some((_, p)) = best {
                used[p] = true;
                m[g] = Some(p);
            }
        }
        m
    }

    fn random_init(&self, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
        let mut used = vec![false; self.pred_vars.len()];
        let mut m = vec![None; self.gold_vars.len()];
        let mut order: Vec<usize> = (0..self.gold_vars.len()).collect();
        order.shuffle(rng);
        for g in order {
            let good: Vec<usize> = (0..self.pred_vars.len()).filter(|&p| !used[p] && self.unary[g][p] > 0).collect();
            let pick = if !good.is_empty() {
                Some(good[rng.gen_range(0..good.len())])
            } else {
                let free: Vec<usize> = (0..self.pred_vars.len()).filter(|&p| !used[p]).collect();
                (!free.is_empty()).then(|| free[rng.gen_range(0..free.len())])
            };
            if let Some(p) = pick {
                used[p] = true;
            }
            m[g] = pick;
        }
        m
    }

    /// Steepest-ascent hill climbing over reassignments and swaps.
    fn climb(&self, mut m: Vec<Option<usize>>) -> (Vec<Option<usize>>, usize) {
        let mut score = self.score(&m);
        loop {
            let mut used: Vec<Option<usize>> = vec![None; self.pred_vars.len()];
            for (g, p) in m.iter().enumerate() {
                if let Some(p) = p {
                    used[*p] = Some(g);
                }
            }
            let mut best: Option<(isize, Vec<Option<usize>>)> = None;
            let consider = |gain: isize, cand: Vec<Option<usize>>, best: &mut Option<(isize, Vec<Option<usize>>)>| {
                if gain > 0 && best.as_ref().is_none_or(|(b, _)| gain > *b) {
                    *best = Some((gain, cand));
                }
            };
            let n = self.gold_vars.len();
            for g in 0..n {
                let before = self.local(&m, &[g]) as isize;
                // move g to a free pred var or unmap it
                let targets =
                    std::iter::once(None).chain((0..self.pred_vars.len()).filter(|&p| used[p].is_none()).map(Some));
                for p in targets {
                    if p == m[g] {
                        continue;
                    }
                    let mut cand = m.clone();
                    cand[g] = p;
                    let gain = self.local(&cand, &[g]) as isize - before;
                    consider(gain, cand, &mut best);
                }
            }
            for g1 in 0..n {
                for g2 in g1 + 1..n {
                    if m[g1] == m[g2] {
                        continue;
                    }
                    let before = self.local(&m, &[g1, g2]) as isize;
                    let mut cand = m.clone();
                    cand.swap(g1, g2);
                    let gain = self.local(&cand, &[g1, g2]) as isize - before;
                    consider(gain, cand, &mut best);
                }
            }
            match best {
                Some((gain, cand)) => {
                    m = cand;
                    score = (score as isize + gain) as usize;
                }
                None => break,
            }
        }
        debug_assert_eq!(score, self.score(&m));
        (m, score)
    }
}

fn pair_seed(gold: &AmrGraph, pred: &AmrGraph) -> u64 {
    // FNV-1a over both serializations
    let mut h: u64 = 0xcbf29ce484222325;
    for b in serialize_penman(gold).bytes().chain([0u8]).chain(serialize_penman(pred).bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn better(a: &(Vec<Option<usize>>, usize), b: &(Vec<Option<usize>>, usize)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0 < b.0)
}

/// Hill-climbing Smatch. Restart 0 starts from the concept-match mapping,
/// the others from random mappings seeded by the graph pair.
pub fn smatch_score(gold: &AmrGraph, pred: &AmrGraph, restarts: usize) -> MappingSearchResult {
    let problem = Problem::new(gold, pred);
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(gold, pred));
    let mut best = problem.climb(problem.smart_init());
    for _ in 1..restarts.max(1) {
        let cand = problem.climb(problem.random_init(&mut rng));
        if better(&cand, &best) {
            best = cand;
        }
    }
    problem.result(&best.0, best.1)
}

fn injection_count(n: usize, m: usize) -> f64 {
    // sum_k C(n,k) * m!/(m-k)!
    let mut total = 0.0;
    let mut choose = 1.0;
    let mut perm = 1.0;
    for k in 0..=n.min(m) {
        if k > 0 {
            choose *= (n - k + 1) as f64 / k as f64;
            perm *= (m - k + 1) as f64;
        }
        total += choose * perm;
    }
    total
}

/// Exhaustive search over every partial injection of gold into predicted
/// variables.
pub fn brute_force_score(gold: &AmrGraph, pred: &AmrGraph) -> Result<MappingSearchResult, SmatchError> {
    let (n, m) = (gold.nodes.len(), pred.nodes.len());
    if n.min(m) > BRUTE_FORCE_MAX_VARS || injection_count(n, m) > BRUTE_FORCE_MAX_MAPPINGS {
        return Err(SmatchError::TooLarge { gold: n, pred: m });
    }
    let problem = Problem::new(gold, pred);
    let mut current = vec![None; n];
    let mut used = vec![false; m];
    let mut best = (current.clone(), problem.score(&current));
    search(&problem, 0, &mut current, &mut used, &mut best);
    Ok(problem.result(&best.0, best.1))
}

fn search(
    problem: &Problem,
    g: usize,
    current: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    best: &mut (Vec<Option<usize>>, usize),
) {
    if g == current.len() {
        let cand = (current.clone(), problem.score(current));
        if better(&cand, best) {
            *best = cand;
        }
        return;
    }
    current[g] = None;
    search(problem, g + 1, current, used, best);
    for p in 0..used.len() {
        if !used[p] {
            used[p] = true;
            current[g] = Some(p);
            search(problem, g + 1, current, used, best);
            used[p] = false;
        }
    }
    current[g] = None;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusScore {
    pub matched: usize,
    pub gold_triples: usize,
    pub pred_triples: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl CorpusScore {
    pub fn from_counts(matched: usize, gold_triples: usize, pred_triples: usize) -> Self {
        let precision = ratio(matched, pred_triples);
        let recall = ratio(matched, gold_triples);
        CorpusScore { matched, gold_triples, pred_triples, precision, recall, f1: f1_score(precision, recall) }
    }
}

/// Micro-averaged Smatch over aligned gold/prediction lists. A `None`
/// prediction contributes no triples.
pub fn corpus_score(gold: &[AmrGraph], pred: &[Option<AmrGraph>]) -> Result<CorpusScore, SmatchError> {
    corpus_score_with(gold, pred, DEFAULT_RESTARTS)
}

pub fn corpus_score_with(
    gold: &[AmrGraph],
    pred: &[Option<AmrGraph>],
    restarts: usize,
) -> Result<CorpusScore, SmatchError> {
    if gold.len() != pred.len() {
        return Err(SmatchError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    if gold.is_empty() {
        log::warn!("scoring an empty corpus; reporting 0");
    }
    let (mut matched, mut g_total, mut p_total) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        match p {
            Some(p) => {
                let r = smatch_score(g, p, restarts);
                matched += r.matched;
                g_total += r.gold_triples;
                p_total += r.pred_triples;
            }
            None => g_total += to_triples(g).len(),
        }
    }
    Ok(CorpusScore::from_counts(matched, g_total, p_total))
}
