//! Anonymity inference on a leader's view.
//!
//! Every view node carries an interval `[lb, ub]` for the number of
//! processes it represents, plus a flag saying that all of its children in
//! the full history tree are visible. Rules only ever raise lower bounds,
//! lower upper bounds or set flags, so they reach the same fixpoint in any
//! order. The count is certified when the root's interval collapses.
//!
//! Rules:
//! - leader chain: ancestors of the target represent exactly the leader;
//! - tree sums: a node holds its children, hidden ones included;
//! - links: for a complete node `u` and a node `v` on the same level, the
//!   number of links between the two classes is seen from both sides;
//! - temporal: at level `q` the visible nodes cover at least
//!   `min(n, t - q + 1)` processes, because each round of a connected network
//!   lets one more process reach the leader;
//! - cut: a closed set of complete, exactly known nodes around the leader
//!   covers the whole network.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::history_tree::{HistoryTree, InputLabel, NodeIdx, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Basic,
    Generalized,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CountResult {
    Unknown,
    Count(u64),
    /// Level-0 labels with their multiplicities, the leader included.
    Inputs(Vec<(InputLabel, u64)>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CountError {
    #[error("malformed view: {0}")]
    Malformed(String),
}

/// Safety valve against bound loops on corrupted views.
const MAX_PASSES: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InferenceState {
    pub lb: Vec<u64>,
    pub ub: Vec<Option<u64>>,
    /// All children in the full tree are visible.
    pub complete: Vec<bool>,
}

impl InferenceState {
    pub fn exact(&self, v: NodeIdx) -> Option<u64> {
        self.ub[v].filter(|&u| u == self.lb[v])
    }

    /// Per-level table `node a children_complete`.
    pub fn dump(&self, tree: &HistoryTree) -> String {
        let mut out = String::new();
        for q in -1..=tree.depth() {
            let _ = writeln!(out, "level {q}");
            for &v in tree.level(q) {
                let name = tree.node(v).id.map_or(format!("#{v}"), |id| id.to_string());
                let a = match (self.exact(v), self.ub[v]) {
                    (Some(a), _) => a.to_string(),
                    (None, Some(u)) => format!("{}..{}", self.lb[v], u),
                    (None, None) => format!("{}..", self.lb[v]),
                };
                let _ = writeln!(out, "  {name} {a} {}", u8::from(self.complete[v]));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Tree,
    Level,
    Link,
    Temporal,
    Cut,
}

const RULES: [Rule; 5] = [Rule::Tree, Rule::Level, Rule::Link, Rule::Temporal, Rule::Cut];

struct Solver<'a> {
    tree: &'a HistoryTree,
    /// Chain node of the leader at each level `0..=t`.
    chain: Vec<NodeIdx>,
    t: i64,
    st: InferenceState,
    changed: bool,
}

fn malformed(msg: String) -> CountError {
    CountError::Malformed(msg)
}

impl<'a> Solver<'a> {
    fn new(view: &'a View) -> Result<Self, CountError> {
        let tree = &view.tree;
        let len = tree.len();
        let t = tree.node(view.target).level;
        if t < 0 {
            return Err(malformed("target is the root".into()));
        }
        let mut chain = vec![0; t as usize + 1];
        let mut cur = view.target;
        for q in (0..=t).rev() {
            chain[q as usize] = cur;
            cur = tree.node(cur).parent.ok_or_else(|| malformed(format!("node {cur} has no parent")))?;
        }
        let mut s = Solver {
            tree,
            chain,
            t,
            st: InferenceState { lb: vec![1; len], ub: vec![None; len], complete: vec![false; len] },
            changed: false,
        };
        for q in 0..=t {
            let v = s.chain[q as usize];
            s.lower(v, 1)?;
            if q < t {
                s.mark_complete(v);
            }
        }
        Ok(s)
    }

    fn check(&self, v: NodeIdx) -> Result<(), CountError> {
        match self.st.ub[v] {
            Some(u) if self.st.lb[v] > u => {
                Err(malformed(format!("node {v}: lower bound {} exceeds upper bound {u}", self.st.lb[v])))
            }
            _ => Ok(()),
        }
    }

    fn raise(&mut self, v: NodeIdx, x: i128) -> Result<(), CountError> {
        if x > self.st.lb[v] as i128 {
            self.st.lb[v] = u64::try_from(x).map_err(|_| malformed("bound overflow".into()))?;
            self.changed = true;
        }
        self.check(v)
    }

    fn lower(&mut self, v: NodeIdx, x: i128) -> Result<(), CountError> {
        let x = x.max(0) as u64;
        if self.st.ub[v].is_none_or(|u| x < u) {
            self.st.ub[v] = Some(x);
            self.changed = true;
        }
        self.check(v)
    }

    fn mark_complete(&mut self, v: NodeIdx) {
        if self.tree.node(v).level < self.t && !self.st.complete[v] {
            self.st.complete[v] = true;
            self.changed = true;
        }
    }

    fn lb(&self, v: NodeIdx) -> i128 {
        self.st.lb[v] as i128
    }

    fn ub(&self, v: NodeIdx) -> Option<i128> {
        self.st.ub[v].map(|u| u as i128)
    }

    /// Marks every level up to `q` as fully visible.
    fn levels_visible_through(&mut self, q: i64) {
        if q < 0 {
            return;
        }
        self.mark_complete(self.tree.root());
        for r in 0..q.min(self.t) {
            for &v in self.tree.level(r) {
                self.mark_complete(v);
            }
        }
    }

    fn apply(&mut self, rule: Rule, order: &[NodeIdx]) -> Result<(), CountError> {
        match rule {
            Rule::Tree => order.iter().try_for_each(|&v| self.tree_rule(v)),
            Rule::Level => (0..=self.t).try_for_each(|q| self.level_rule(q)),
            Rule::Link => order.iter().try_for_each(|&u| self.link_rule(u)),
            Rule::Temporal => self.temporal_rule(),
            Rule::Cut => self.cut_rule(),
        }
    }

    fn tree_rule(&mut self, u: NodeIdx) -> Result<(), CountError> {
        let tree = self.tree;
        let children = &tree.node(u).children;
        if children.is_empty() {
            return Ok(());
        }
        let sum_lb: i128 = children.iter().map(|&c| self.lb(c)).sum();
        self.raise(u, sum_lb)?;
        if let Some(uu) = self.ub(u) {
            for &c in children {
                self.lower(c, uu - (sum_lb - self.lb(c)))?;
            }
            if uu == sum_lb {
                self.mark_complete(u);
            }
        }
        if self.st.complete[u] {
            let ubs: Option<Vec<i128>> = children.iter().map(|&c| self.ub(c)).collect();
            if let Some(ubs) = ubs {
                let sum_ub: i128 = ubs.iter().sum();
                self.lower(u, sum_ub)?;
                let lbu = self.lb(u);
                for (k, &c) in children.iter().enumerate() {
                    self.raise(c, lbu - (sum_ub - ubs[k]))?;
                }
            } else {
                let missing: Vec<NodeIdx> = children.iter().copied().filter(|&c| self.ub(c).is_none()).collect();
                if let ([c], Some(uu)) = (missing.as_slice(), self.ub(u)) {
                    // Only `c` lacks an upper bound; the parent's bound caps it.
                    let rest_lb = sum_lb - self.lb(*c);
                    self.lower(*c, uu - rest_lb)?;
                }
            }
        }
        Ok(())
    }

    fn level_rule(&mut self, q: i64) -> Result<(), CountError> {
        let root = self.tree.root();
        let nodes = self.tree.level(q);
        let sum_lb: i128 = nodes.iter().map(|&v| self.lb(v)).sum();
        self.raise(root, sum_lb)?;
        if let Some(n) = self.ub(root) {
            for &v in nodes {
                self.lower(v, n - (sum_lb - self.lb(v)))?;
            }
        }
        Ok(())
    }

    fn link_rule(&mut self, u: NodeIdx) -> Result<(), CountError> {
        if !self.st.complete[u] || u == self.tree.root() {
            return Ok(());
        }
        let tree = self.tree;
        let level = tree.node(u).level;
        for &v in tree.level(level) {
            if v == u {
                continue;
            }
            let mut link_lb = 0i128;
            let mut link_ub = Some(0i128);
            for &c in &tree.node(u).children {
                let m = tree.node(c).red.get(&v).copied().unwrap_or(0) as i128;
                if m == 0 {
                    continue;
                }
                link_lb += self.lb(c) * m;
                link_ub = link_ub.zip(self.ub(c)).map(|(s, x)| s + x * m);
            }
            let side: Vec<(NodeIdx, i128)> = tree
                .node(v)
                .children
                .iter()
                .filter_map(|&d| tree.node(d).red.get(&u).map(|&m| (d, m as i128)))
                .filter(|&(_, m)| m > 0)
                .collect();
            if let Some(lu) = link_ub {
                let total: i128 = side.iter().map(|&(d, m)| self.lb(d) * m).sum();
                for &(d, m) in &side {
                    let rest = total - self.lb(d) * m;
                    let residual = lu - rest;
                    if residual < 0 {
                        return Err(malformed(format!("link between {u} and {v} over-subscribed")));
                    }
                    self.lower(d, residual.div_euclid(m))?;
                }
            }
            if self.st.complete[v] {
                if side.is_empty() && link_lb > 0 {
                    return Err(malformed(format!("link between {u} and {v} has no counterpart")));
                }
                let ubs: Option<Vec<i128>> = side.iter().map(|&(d, m)| self.ub(d).map(|x| x * m)).collect();
                match ubs {
                    Some(ubs) => {
                        let total: i128 = ubs.iter().sum();
                        for (k, &(d, m)) in side.iter().enumerate() {
                            let need = link_lb - (total - ubs[k]);
                            if need > 0 {
                                self.raise(d, (need + m - 1).div_euclid(m))?;
                            }
                        }
                    }
                    None => {
                        let missing: Vec<usize> = (0..side.len()).filter(|&k| self.ub(side[k].0).is_none()).collect();
                        if let [k] = missing.as_slice() {
                            let (d, m) = side[*k];
                            let others: i128 = side
                                .iter()
                                .enumerate()
                                .filter(|&(j, _)| j != *k)
                                .map(|(_, &(x, mx))| self.ub(x).expect("only one missing") * mx)
                                .sum();
                            let need = link_lb - others;
                            if need > 0 {
                                self.raise(d, (need + m - 1).div_euclid(m))?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn temporal_rule(&mut self) -> Result<(), CountError> {
        let root = self.tree.root();
        for q in 0..=self.t {
            let ubs: Option<i128> = self.tree.level(q).iter().map(|&v| self.ub(v)).sum();
            if let Some(s) = ubs {
                if s <= (self.t - q) as i128 {
                    self.lower(root, s)?;
                }
            }
        }
        if let Some(n) = self.ub(root) {
            self.levels_visible_through(self.t - n as i64 + 1);
        }
        Ok(())
    }

    fn cut_rule(&mut self) -> Result<(), CountError> {
        for s in 0..self.t {
            let Some(n) = self.cut_at(s) else { continue };
            let root = self.tree.root();
            self.raise(root, n as i128)?;
            self.lower(root, n as i128)?;
            self.levels_visible_through(s);
        }
        Ok(())
    }

    /// Closure of the leader's node at level `s` under red edges of children.
    fn cut_at(&self, s: i64) -> Option<u64> {
        let start = self.chain[s as usize];
        let mut set = BTreeSet::from([start]);
        let mut stack = vec![start];
        let mut total = 0;
        while let Some(c) = stack.pop() {
            if !self.st.complete[c] {
                return None;
            }
            total += self.st.exact(c)?;
            for &ch in &self.tree.node(c).children {
                for &w in self.tree.node(ch).red.keys() {
                    if set.insert(w) {
                        stack.push(w);
                    }
                }
            }
        }
        Some(total)
    }
}

fn solve(view: &View, shuffle: Option<u64>) -> Result<InferenceState, CountError> {
    let mut solver = Solver::new(view)?;
    let mut order: Vec<NodeIdx> = (0..view.tree.len()).collect();
    let mut rules = RULES.to_vec();
    let mut rng = shuffle.map(ChaCha8Rng::seed_from_u64);
    for pass in 0.. {
        if pass > MAX_PASSES {
            return Err(malformed("bounds do not converge".into()));
        }
        if let Some(rng) = rng.as_mut() {
            order.shuffle(rng);
            rules.shuffle(rng);
        }
        solver.changed = false;
        for &rule in &rules {
            solver.apply(rule, &order)?;
        }
        if !solver.changed {
            break;
        }
    }
    Ok(solver.st)
}

/// Runs every rule to a fixpoint.
pub fn infer_anonymities(view: &View) -> Result<InferenceState, CountError> {
    solve(view, None)
}

/// Same fixpoint, computed with rule and node orders shuffled every pass.
pub fn infer_anonymities_shuffled(view: &View, seed: u64) -> Result<InferenceState, CountError> {
    solve(view, Some(seed))
}

/// Size certified by a closed set of exactly known complete nodes, if any.
pub fn cut_certificate(state: &InferenceState, view: &View) -> Option<u64> {
    let mut solver = Solver::new(view).ok()?;
    solver.st = state.clone();
    (0..solver.t).find_map(|s| solver.cut_at(s))
}

pub fn result_from_state(state: &InferenceState, view: &View, mode: CountMode) -> CountResult {
    let tree = &view.tree;
    let root = tree.root();
    match mode {
        CountMode::Basic => {
            state.exact(root).or_else(|| cut_certificate(state, view)).map_or(CountResult::Unknown, CountResult::Count)
        }
        CountMode::Generalized => {
            if !state.complete[root] {
                return CountResult::Unknown;
            }
            let mut inputs = Vec::new();
            for &v in tree.level(0) {
                let (Some(a), Some(label)) = (state.exact(v), tree.node(v).input) else {
                    return CountResult::Unknown;
                };
                inputs.push((label, a));
            }
            inputs.sort();
            CountResult::Inputs(inputs)
        }
    }
}

pub fn count_from_view(view: &View, mode: CountMode) -> Result<CountResult, CountError> {
    let state = infer_anonymities(view)?;
    Ok(result_from_state(&state, view, mode))
}
