//! Leveled history trees: ground-truth construction by indistinguishability
//! refinement, view extraction, canonical forms and generalized-view
//! embedding.
//!
//! Nodes are stored in an arena. Every node at level `t >= 0` has exactly one
//! parent at level `t - 1` (black edge) and a multiset of red edges to nodes
//! at level `t - 1`, aggregated per target node.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::engine::Trace;

pub type NodeIdx = usize;

/// Input carried by a level-0 node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputLabel {
    Leader,
    Value(u64),
}

impl std::fmt::Display for InputLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputLabel::Leader => write!(f, "L"),
            InputLabel::Value(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Node {
    pub id: Option<i64>,
    pub level: i64,
    pub parent: Option<NodeIdx>,
    pub input: Option<InputLabel>,
    /// Red edges to nodes of the previous level, with multiplicities.
    pub red: BTreeMap<NodeIdx, u64>,
    pub children: Vec<NodeIdx>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("trace has {have} rounds but depth {need} was requested")]
    TraceTooShort { need: usize, have: usize },
    #[error("trace is over {trace} processes but {inputs} inputs were given")]
    InputCount { trace: usize, inputs: usize },
    #[error("depth {depth} exceeds tree depth {available}")]
    DepthExceeded { depth: i64, available: i64 },
    #[error("node {0} does not belong to the tree")]
    DanglingNode(NodeIdx),
    #[error("red edge from {from} to {to} does not join adjacent levels")]
    BadRedEdge { from: NodeIdx, to: NodeIdx },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryTree {
    nodes: Vec<Node>,
    /// `levels[t + 1]` lists the nodes of level `t`.
    levels: Vec<Vec<NodeIdx>>,
    by_id: HashMap<i64, NodeIdx>,
}

impl HistoryTree {
    pub fn new(root_id: Option<i64>) -> Self {
        let root =
            Node { id: root_id, level: -1, parent: None, input: None, red: BTreeMap::new(), children: Vec::new() };
        let mut by_id = HashMap::new();
        if let Some(id) = root_id {
            by_id.insert(id, 0);
        }
        HistoryTree { nodes: vec![root], levels: vec![vec![0]], by_id }
    }

    pub fn root(&self) -> NodeIdx {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, idx: NodeIdx) -> &Node {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Deepest level present (`-1` for a bare root).
    pub fn depth(&self) -> i64 {
        self.levels.len() as i64 - 2
    }

    pub fn level(&self, t: i64) -> &[NodeIdx] {
        usize::try_from(t + 1).ok().and_then(|i| self.levels.get(i)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn find_id(&self, id: i64) -> Option<NodeIdx> {
        self.by_id.get(&id).copied()
    }

    pub fn add_node(&mut self, parent: NodeIdx, id: Option<i64>, input: Option<InputLabel>) -> NodeIdx {
        let level = self.nodes[parent].level + 1;
        let idx = self.nodes.len();
        self.nodes.push(Node { id, level, parent: Some(parent), input, red: BTreeMap::new(), children: Vec::new() });
        self.nodes[parent].children.push(idx);
        let slot = (level + 1) as usize;
        if self.levels.len() <= slot {
            self.levels.resize(slot + 1, Vec::new());
        }
        self.levels[slot].push(idx);
        if let Some(id) = id {
            self.by_id.insert(id, idx);
        }
        idx
    }

    /// Adds `mult` to the red edge from `child` to `target`.
    pub fn add_red(&mut self, child: NodeIdx, target: NodeIdx, mult: u64) -> Result<(), HistoryError> {
        if self.nodes[child].level != self.nodes[target].level + 1 {
            return Err(HistoryError::BadRedEdge { from: child, to: target });
        }
        *self.nodes[child].red.entry(target).or_insert(0) += mult;
        Ok(())
    }

    pub fn ancestor_at(&self, mut idx: NodeIdx, level: i64) -> Option<NodeIdx> {
        while self.nodes[idx].level > level {
            idx = self.nodes[idx].parent?;
        }
        (self.nodes[idx].level == level).then_some(idx)
    }

    /// Removes every node at level `>= from_level`, with incident edges.
    pub fn truncate_levels(&mut self, from_level: i64) {
        let keep: Vec<bool> = self.nodes.iter().map(|n| n.level < from_level).collect();
        *self = self.filtered(&keep).0;
    }

    /// Copy of the tree restricted to the nodes flagged in `keep` (which must
    /// be closed under parents). Returns the new tree and the map from new to
    /// old indices.
    pub fn filtered(&self, keep: &[bool]) -> (HistoryTree, Vec<NodeIdx>) {
        let mut order: Vec<NodeIdx> = (0..self.nodes.len()).filter(|&i| keep[i]).collect();
        order.sort_by_key(|&i| (self.nodes[i].level, i));
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut out = HistoryTree::new(self.nodes[0].id);
        out.nodes[0].input = self.nodes[0].input;
        remap[0] = 0;
        let mut origin = vec![0];
        for &old in order.iter().filter(|&&i| i != 0) {
            let n = &self.nodes[old];
            let parent = remap[n.parent.expect("non-root node has a parent")];
            let new = out.add_node(parent, n.id, n.input);
            remap[old] = new;
            origin.push(old);
            for (&t, &m) in &n.red {
                if keep[t] {
                    out.nodes[new].red.insert(remap[t], m);
                }
            }
        }
        (out, origin)
    }

    /// Distinct red edges (ignoring multiplicity) whose child lies in levels
    /// `1..=max_level`.
    pub fn distinct_red_edges(&self, max_level: i64) -> usize {
        self.nodes.iter().filter(|n| n.level >= 1 && n.level <= max_level).map(|n| n.red.len()).sum()
    }

    /// One line per node: `level id parent [input] {(neighbor, mult), ...}`.
    /// Nodes without an ID are printed by arena index prefixed with `#`.
    pub fn dump(&self) -> String {
        let name = |i: NodeIdx| match self.nodes[i].id {
            Some(id) => id.to_string(),
            None => format!("#{i}"),
        };
        let mut out = String::new();
        for level in self.levels.iter() {
            for &i in level {
                let n = &self.nodes[i];
                let parent = n.parent.map(name).unwrap_or_else(|| "-".into());
                let _ = write!(out, "{} {} {}", n.level, name(i), parent);
                if let Some(label) = n.input {
                    let _ = write!(out, " [{label}]");
                }
                let red: Vec<String> = n.red.iter().map(|(&t, m)| format!("({}, {m})", name(t))).collect();
                let _ = writeln!(out, " {{{}}}", red.join(", "));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Ground truth

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub tree: HistoryTree,
    /// Anonymity of every node (root included).
    pub anonymity: Vec<u64>,
    /// `membership[t][p]` is the node representing process `p` at level `t`.
    pub membership: Vec<Vec<NodeIdx>>,
}

impl GroundTruth {
    pub fn node_of(&self, level: usize, process: usize) -> NodeIdx {
        self.membership[level][process]
    }
}

type RoundSignature = (NodeIdx, Vec<(NodeIdx, u64)>);

/// Builds levels `0..=depth` of the history tree of `trace` by refining the
/// input partition one round at a time.
pub fn build_ground_truth(trace: &Trace, inputs: &[InputLabel], depth: usize) -> Result<GroundTruth, HistoryError> {
    if trace.n != inputs.len() {
        return Err(HistoryError::InputCount { trace: trace.n, inputs: inputs.len() });
    }
    if trace.rounds.len() < depth {
        return Err(HistoryError::TraceTooShort { need: depth, have: trace.rounds.len() });
    }
    let n = inputs.len();
    let mut tree = HistoryTree::new(None);
    let mut anonymity = vec![n as u64];

    let mut by_label: BTreeMap<InputLabel, Vec<usize>> = BTreeMap::new();
    for (p, &label) in inputs.iter().enumerate() {
        by_label.entry(label).or_default().push(p);
    }
    let mut class = vec![0; n];
    for (label, members) in by_label {
        let v = tree.add_node(0, None, Some(label));
        anonymity.push(members.len() as u64);
        for p in members {
            class[p] = v;
        }
    }
    let mut membership = vec![class.clone()];

    for round in trace.rounds.iter().take(depth) {
        let mut received: Vec<BTreeMap<NodeIdx, u64>> = vec![BTreeMap::new(); n];
        for (&(i, j), &m) in &round.links {
            if i == j {
                *received[i].entry(class[i]).or_insert(0) += m;
            } else {
                *received[i].entry(class[j]).or_insert(0) += m;
                *received[j].entry(class[i]).or_insert(0) += m;
            }
        }
        // Processes grouped by (current class, received multiset).
        let mut groups: BTreeMap<RoundSignature, Vec<usize>> = BTreeMap::new();
        for p in 0..n {
            let sig: Vec<(NodeIdx, u64)> = received[p].iter().map(|(&c, &m)| (c, m)).collect();
            groups.entry((class[p], sig)).or_default().push(p);
        }
        let mut next = vec![0; n];
        for ((parent, sig), members) in groups {
            let v = tree.add_node(parent, None, None);
            for (target, m) in sig {
                tree.add_red(v, target, m)?;
            }
            anonymity.push(members.len() as u64);
            for p in members {
                next[p] = v;
            }
        }
        class = next;
        membership.push(class.clone());
    }
    Ok(GroundTruth { tree, anonymity, membership })
}

// ---------------------------------------------------------------------------
// Views

#[derive(Clone, Debug)]
pub struct View {
    pub tree: HistoryTree,
    /// Node of `tree` the view was taken for.
    pub target: NodeIdx,
    /// `origin[i]` is the index in the source tree of view node `i`.
    pub origin: Vec<NodeIdx>,
}

/// Subgraph spanned by all shortest root-to-`node` paths.
///
/// Every edge joins adjacent levels and the root is reached from level `t`
/// in exactly `t + 1` steps, so shortest paths only ever move one level up;
/// the view is the closure of `node` under parent and red edges.
pub fn extract_view(ht: &HistoryTree, node: NodeIdx) -> Result<View, HistoryError> {
    if node >= ht.len() {
        return Err(HistoryError::DanglingNode(node));
    }
    let mut keep = vec![false; ht.len()];
    let mut queue = VecDeque::from([node]);
    keep[node] = true;
    while let Some(v) = queue.pop_front() {
        let n = ht.node(v);
        for next in n.parent.into_iter().chain(n.red.keys().copied()) {
            if !keep[next] {
                keep[next] = true;
                queue.push_back(next);
            }
        }
    }
    let (tree, origin) = ht.filtered(&keep);
    let target = origin.iter().position(|&o| o == node).expect("target kept");
    Ok(View { tree, target, origin })
}

// ---------------------------------------------------------------------------
// Canonical forms and isomorphism

/// Per-node signature: parent's canonical index, level-0 input, and red
/// edges as (canonical index, multiplicity).
pub type Signature = (usize, Option<InputLabel>, Vec<(usize, u64)>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonicalForm {
    /// Sorted signatures per level, starting with level -1.
    pub levels: Vec<Vec<Signature>>,
    /// Some level holds two nodes with identical signatures. Equal forms then
    /// no longer imply isomorphism.
    pub has_twins: bool,
}

fn canonical_indices(ht: &HistoryTree, depth: i64) -> (CanonicalForm, Vec<usize>) {
    let mut index = vec![0usize; ht.len()];
    let mut levels = Vec::new();
    let mut has_twins = false;
    for t in -1..=depth {
        let mut sigs: Vec<(Signature, NodeIdx)> = ht
            .level(t)
            .iter()
            .map(|&v| {
                let n = ht.node(v);
                let parent = n.parent.map_or(0, |p| index[p]);
                let label = if n.level == 0 { n.input } else { None };
                let mut red: Vec<(usize, u64)> = n.red.iter().map(|(&u, &m)| (index[u], m)).collect();
                red.sort_unstable();
                ((parent, label, red), v)
            })
            .collect();
        sigs.sort();
        let mut rank = 0;
        for k in 0..sigs.len() {
            if k > 0 {
                if sigs[k].0 != sigs[k - 1].0 {
                    rank += 1;
                } else {
                    has_twins = true;
                }
            }
            index[sigs[k].1] = rank;
        }
        levels.push(sigs.into_iter().map(|(s, _)| s).collect());
    }
    (CanonicalForm { levels, has_twins }, index)
}

/// Canonical label sequence of levels `-1..=depth`. IDs are ignored; level-0
/// inputs are kept.
pub fn canonical_form(ht: &HistoryTree, depth: i64) -> Result<CanonicalForm, HistoryError> {
    if depth > ht.depth() {
        return Err(HistoryError::DepthExceeded { depth, available: ht.depth() });
    }
    Ok(canonical_indices(ht, depth).0)
}

/// Label-preserving isomorphism test on levels `-1..=depth`.
pub fn is_isomorphic(a: &HistoryTree, b: &HistoryTree, depth: i64) -> Result<bool, HistoryError> {
    let ca = canonical_form(a, depth)?;
    let cb = canonical_form(b, depth)?;
    if ca.levels != cb.levels {
        return Ok(false);
    }
    if !ca.has_twins && !cb.has_twins {
        return Ok(true);
    }
    Ok(search_isomorphism(a, b, depth))
}

/// Backtracking isomorphism search, used when twins defeat the canonical
/// form.
fn search_isomorphism(a: &HistoryTree, b: &HistoryTree, depth: i64) -> bool {
    let order: Vec<NodeIdx> = (0..=depth).flat_map(|t| a.level(t).iter().copied()).collect();
    let mut map = vec![usize::MAX; a.len()];
    let mut used = vec![false; b.len()];
    map[0] = 0;
    used[0] = true;
    fn go(
        k: usize,
        order: &[NodeIdx],
        a: &HistoryTree,
        b: &HistoryTree,
        depth: i64,
        map: &mut [usize],
        used: &mut [bool],
    ) -> bool {
        let Some(&v) = order.get(k) else {
            return (0..=depth).all(|t| a.level(t).len() == b.level(t).len());
        };
        let nv = a.node(v);
        let parent = map[nv.parent.expect("non-root")];
        let candidates: Vec<NodeIdx> =
            b.node(parent).children.iter().copied().filter(|&w| !used[w] && same_image(a, b, v, w, map)).collect();
        for w in candidates {
            map[v] = w;
            used[w] = true;
            if go(k + 1, order, a, b, depth, map, used) {
                return true;
            }
            used[w] = false;
            map[v] = usize::MAX;
        }
        false
    }
    if (0..=depth).any(|t| a.level(t).len() != b.level(t).len()) {
        return false;
    }
    go(0, &order, a, b, depth, &mut map, &mut used)
}

/// Whether node `w` of `b` carries exactly the image of `v`'s label and red
/// edges under `map`.
fn same_image(a: &HistoryTree, b: &HistoryTree, v: NodeIdx, w: NodeIdx, map: &[usize]) -> bool {
    let (nv, nw) = (a.node(v), b.node(w));
    if nv.level == 0 && nv.input != nw.input {
        return false;
    }
    if nv.red.len() != nw.red.len() {
        return false;
    }
    nv.red.iter().all(|(&t, &m)| nw.red.get(&map[t]) == Some(&m))
}

/// Finds a label-preserving embedding of `sub` into `full` whose image is
/// closed under shortest paths to the root. Returns the map from `sub` nodes
/// to `full` nodes.
pub fn generalized_view_embedding(sub: &HistoryTree, full: &HistoryTree) -> Option<Vec<NodeIdx>> {
    if sub.depth() > full.depth() {
        return None;
    }
    let order: Vec<NodeIdx> = (0..=sub.depth()).flat_map(|t| sub.level(t).iter().copied()).collect();
    let mut map = vec![usize::MAX; sub.len()];
    let mut used = HashSet::new();
    map[0] = 0;
    used.insert(0);
    fn go(
        k: usize,
        order: &[NodeIdx],
        sub: &HistoryTree,
        full: &HistoryTree,
        map: &mut Vec<usize>,
        used: &mut HashSet<NodeIdx>,
    ) -> bool {
        let Some(&v) = order.get(k) else { return true };
        let parent = map[sub.node(v).parent.expect("non-root")];
        let candidates: Vec<NodeIdx> = full
            .node(parent)
            .children
            .iter()
            .copied()
            .filter(|w| !used.contains(w) && same_image(sub, full, v, *w, map))
            .collect();
        for w in candidates {
            map[v] = w;
            used.insert(w);
            if go(k + 1, order, sub, full, map, used) {
                return true;
            }
            used.remove(&w);
        }
        map[v] = usize::MAX;
        false
    }
    go(0, &order, sub, full, &mut map, &mut used).then_some(map)
}

pub fn is_generalized_view_of(sub: &HistoryTree, full: &HistoryTree) -> bool {
    generalized_view_embedding(sub, full).is_some()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::RoundTopology;

    fn star3_trace(rounds: usize) -> Trace {
        let mut t = RoundTopology::new(3);
        t.add_link(0, 1, 1);
        t.add_link(0, 2, 1);
        Trace::new(3, 1, vec![t; rounds])
    }

    fn leader_inputs(n: usize) -> Vec<InputLabel> {
        (0..n).map(|p| if p == 0 { InputLabel::Leader } else { InputLabel::Value(0) }).collect()
    }

    #[test]
    fn star_refinement_by_hand() {
        let gt = build_ground_truth(&star3_trace(3), &leader_inputs(3), 3).unwrap();
        for t in 0..=3 {
            assert_eq!(gt.tree.level(t).len(), 2);
        }
        let leader1 = gt.node_of(1, 0);
        let other1 = gt.node_of(1, 1);
        assert_eq!(gt.node_of(1, 2), other1);
        let leader0 = gt.node_of(0, 0);
        let other0 = gt.node_of(0, 1);
        assert_eq!(gt.tree.node(leader1).red, BTreeMap::from([(other0, 2)]));
        assert_eq!(gt.tree.node(other1).red, BTreeMap::from([(leader0, 1)]));
        assert_eq!(gt.anonymity[other1], 2);
    }

    #[test]
    fn nine_processes_three_inputs() {
        let inputs: Vec<InputLabel> = (0..9).map(|p| InputLabel::Value(p % 3)).collect();
        let mut t = RoundTopology::new(9);
        for p in 1..9 {
            t.add_link(p - 1, p, 1);
        }
        let gt = build_ground_truth(&Trace::new(9, 1, vec![t; 2]), &inputs, 2).unwrap();
        assert_eq!(gt.tree.level(0).len(), 3);
    }

    #[test]
    fn symmetric_complete_graph_never_splits() {
        let n = 4;
        let mut t = RoundTopology::new(n);
        for i in 0..n {
            for j in i + 1..n {
                t.add_link(i, j, 1);
            }
        }
        let gt = build_ground_truth(&Trace::new(n, 1, vec![t; 5]), &vec![InputLabel::Value(7); n], 5).unwrap();
        for level in 0..=5 {
            assert_eq!(gt.tree.level(level).len(), 1);
        }
    }

    #[test]
    fn short_trace_is_rejected() {
        let err = build_ground_truth(&star3_trace(2), &leader_inputs(3), 3).unwrap_err();
        assert_eq!(err, HistoryError::TraceTooShort { need: 3, have: 2 });
    }

    #[test]
    fn root_view_is_root() {
        let gt = build_ground_truth(&star3_trace(2), &leader_inputs(3), 2).unwrap();
        let v = extract_view(&gt.tree, 0).unwrap();
        assert_eq!(v.tree.len(), 1);
        assert!(extract_view(&gt.tree, 999).is_err());
    }

    #[test]
    fn single_process_chain_view_is_whole_chain() {
        let t = RoundTopology::new(1);
        let gt = build_ground_truth(&Trace::new(1, 1, vec![t; 4]), &[InputLabel::Leader], 4).unwrap();
        let deepest = gt.node_of(4, 0);
        let v = extract_view(&gt.tree, deepest).unwrap();
        assert_eq!(v.tree.len(), gt.tree.len());
    }

    #[test]
    fn views_are_generalized_views() {
        let gt = build_ground_truth(&star3_trace(4), &leader_inputs(3), 4).unwrap();
        let v = extract_view(&gt.tree, gt.node_of(4, 1)).unwrap();
        assert!(is_generalized_view_of(&v.tree, &gt.tree));
        assert!(is_generalized_view_of(&gt.tree, &gt.tree));
        let mut broken = v.tree.clone();
        let victim = broken.level(2)[0];
        let (&t, &m) = broken.node(victim).red.iter().next().unwrap();
        broken.nodes[victim].red.insert(t, m + 1);
        assert!(!is_generalized_view_of(&broken, &gt.tree));
    }

    #[test]
    fn truncation_drops_levels() {
        let gt = build_ground_truth(&star3_trace(4), &leader_inputs(3), 4).unwrap();
        let mut t = gt.tree.clone();
        t.truncate_levels(2);
        assert_eq!(t.depth(), 1);
        assert!(is_generalized_view_of(&t, &gt.tree));
    }

    #[test]
    fn chains_with_different_multiplicities_differ() {
        let mut a = HistoryTree::new(None);
        let a0 = a.add_node(0, None, Some(InputLabel::Leader));
        let a1 = a.add_node(a0, None, None);
        a.add_red(a1, a0, 2).unwrap();
        let mut b = a.clone();
        b.nodes[a1].red.insert(a0, 3);
        assert!(is_isomorphic(&a, &a, 1).unwrap());
        assert!(!is_isomorphic(&a, &b, 1).unwrap());
        assert!(is_isomorphic(&a, &b, 5).is_err());
    }

    #[test]
    fn dump_format() {
        let mut t = HistoryTree::new(Some(-1));
        let l = t.add_node(0, Some(0), Some(InputLabel::Leader));
        let c = t.add_node(l, Some(2), None);
        t.add_red(c, l, 2).unwrap();
        assert_eq!(t.dump(), "-1 -1 - {}\n0 0 -1 [L] {}\n1 2 0 {(0, 2)}\n");
    }
}
