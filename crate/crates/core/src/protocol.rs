//! Per-process Counting automaton.
//!
//! The blocking main loop of the protocol is expressed as an explicit phase
//! register: every round the engine calls [`Automaton::emit`] and then
//! [`Automaton::receive`] with the round's inbox. Broadcast phases last
//! `diam_estimate` rounds; the state transitions that the blocking version
//! performs after a phase are performed on the receive call that ends it.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::counting::{count_from_view, CountMode, CountResult};
use crate::engine::Inbox;
use crate::history_tree::{extract_view, HistoryTree, InputLabel, NodeIdx};
use crate::messages::{max_priority, Message};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Only the leader outputs.
    Basic,
    /// The leader floods `Final(n, c)` and everybody outputs at round `c + n`.
    Simultaneous,
    /// Level 0 is built from the processes' inputs; the leader outputs the
    /// input multiset.
    Generalized,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Output {
    Count(u64),
    /// Non-leader inputs as `(value, multiplicity)`, sorted by value.
    Inputs(Vec<(u64, u64)>),
}

impl std::fmt::Display for Output {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Output::Count(n) => write!(f, "{n}"),
            Output::Inputs(v) => {
                let parts: Vec<String> = v.iter().map(|(x, m)| format!("{x}:{m}")).collect();
                write!(f, "{{{}}}", parts.join(" "))
            }
        }
    }
}

/// Observable state changes, collected by the engine after every round.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    LevelBegun { level: u64 },
    LevelFinalized { level: u64 },
    ErrorEntered { level: u64 },
    ResetApplied { level: u64, new_diam: u64 },
    CountAttempt { level: u64, result: Result<CountResult, String> },
    Output(Output),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Next round sends `Begin(MyID)`.
    Begin,
    Vht {
        remaining: u64,
        top: Message,
    },
    Ack {
        remaining: u64,
        top: Message,
        vht: Message,
    },
    Error {
        top: Message,
    },
    LeaderWait {
        remaining: u64,
    },
    Reset {
        top: Message,
        reset: Message,
        final_round: u64,
    },
    Final {
        msg: Message,
        until: u64,
    },
    Terminated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PhaseKind {
    Begin,
    VhtBroadcast,
    AckBroadcast,
    Error,
    Wait,
    Reset,
    Final,
    Terminated,
}

impl Phase {
    pub fn kind(&self) -> PhaseKind {
        match self {
            Phase::Begin => PhaseKind::Begin,
            Phase::Vht { .. } => PhaseKind::VhtBroadcast,
            Phase::Ack { .. } => PhaseKind::AckBroadcast,
            Phase::Error { .. } => PhaseKind::Error,
            Phase::LeaderWait { .. } => PhaseKind::Wait,
            Phase::Reset { .. } => PhaseKind::Reset,
            Phase::Final { .. } => PhaseKind::Final,
            Phase::Terminated => PhaseKind::Terminated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TempNode {
    pub parent: Option<i64>,
    /// Red edges to roots (previous-level IDs).
    pub red: BTreeMap<i64, u64>,
}

/// Forest of the level under construction. Roots are copies of the previous
/// VHT level.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TempVht {
    pub nodes: BTreeMap<i64, TempNode>,
}

impl TempVht {
    pub fn from_roots(ids: impl IntoIterator<Item = i64>) -> Self {
        TempVht { nodes: ids.into_iter().map(|id| (id, TempNode::default())).collect() }
    }

    pub fn contains(&self, id: i64) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn find_root(&self, id: i64) -> Option<i64> {
        let mut cur = id;
        loop {
            match self.nodes.get(&cur)?.parent {
                Some(p) => cur = p,
                None => return Some(cur),
            }
        }
    }
}

/// Simple graph on previous-level IDs; becomes the spanning tree of the
/// virtual network's class graph.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LevelGraph {
    pub nodes: BTreeSet<i64>,
    pub edges: BTreeSet<(i64, i64)>,
}

impl LevelGraph {
    pub fn from_nodes(ids: impl IntoIterator<Item = i64>) -> Self {
        LevelGraph { nodes: ids.into_iter().collect(), edges: BTreeSet::new() }
    }

    pub fn has_edge(&self, a: i64, b: i64) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn add_edge(&mut self, a: i64, b: i64) {
        self.edges.insert((a.min(b), a.max(b)));
    }

    pub fn connected(&self, a: i64, b: i64) -> bool {
        let mut seen = BTreeSet::from([a]);
        let mut queue = VecDeque::from([a]);
        while let Some(v) = queue.pop_front() {
            if v == b {
                return true;
            }
            for &(x, y) in &self.edges {
                let next = if x == v {
                    y
                } else if y == v {
                    x
                } else {
                    continue;
                };
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        false
    }

    pub fn is_acyclic(&self) -> bool {
        let mut parent: BTreeMap<i64, i64> = self.nodes.iter().map(|&v| (v, v)).collect();
        fn find(parent: &mut BTreeMap<i64, i64>, v: i64) -> i64 {
            let p = *parent.entry(v).or_insert(v);
            if p == v {
                return v;
            }
            let r = find(parent, p);
            parent.insert(v, r);
            r
        }
        for &(a, b) in &self.edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return false;
            }
            parent.insert(ra, rb);
        }
        true
    }

    pub fn is_spanning_tree(&self) -> bool {
        self.is_acyclic() && self.edges.len() + 1 == self.nodes.len().max(1)
    }
}

/// A structurally impossible update; sends the process into the error phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inconsistent;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcessState {
    pub mode: Mode,
    pub leader: bool,
    /// Input value (generalized mode only).
    pub input: u64,
    pub my_id: i64,
    pub next_fresh_id: i64,
    pub current_round: u64,
    pub vht: HistoryTree,
    pub current_level: u64,
    pub temp_vht: TempVht,
    pub obs_list: Vec<(i64, u64)>,
    pub level_graph: LevelGraph,
    pub diam_estimate: u64,
    pub output: Option<Output>,
    pub phase: Phase,
    events: Vec<Event>,
}

/// Label used for non-leader level-0 nodes in basic mode.
pub const NON_LEADER_LABEL: InputLabel = InputLabel::Value(0);

impl ProcessState {
    pub fn init_state(is_leader: bool) -> Self {
        Self::with_mode(Mode::Basic, is_leader, 0)
    }

    pub fn with_mode(mode: Mode, is_leader: bool, input: u64) -> Self {
        let mut s = ProcessState {
            mode,
            leader: is_leader,
            input,
            my_id: if is_leader { 0 } else { 1 },
            next_fresh_id: 2,
            current_round: 0,
            vht: HistoryTree::new(Some(-1)),
            current_level: 1,
            temp_vht: TempVht::default(),
            obs_list: Vec::new(),
            level_graph: LevelGraph::default(),
            diam_estimate: 1,
            output: None,
            phase: Phase::Begin,
            events: Vec::new(),
        };
        s.init_level_zero();
        s
    }

    fn init_level_zero(&mut self) {
        self.vht = HistoryTree::new(Some(-1));
        self.vht.add_node(0, Some(0), Some(InputLabel::Leader));
        self.my_id = if self.leader { 0 } else { 1 };
        self.next_fresh_id = 2;
        if self.mode == Mode::Generalized {
            self.current_level = 0;
            self.phase = Phase::Vht { remaining: self.diam_estimate, top: self.make_vht_message() };
        } else {
            self.vht.add_node(0, Some(1), Some(NON_LEADER_LABEL));
            self.current_level = 1;
            self.phase = Phase::Begin;
        }
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        std::mem::take(&mut self.events)
    }

    pub fn is_error_process(&self) -> bool {
        matches!(self.phase, Phase::Error { .. })
    }

    /// VHT node the process currently belongs to (directly, or through the
    /// root of its temporary tree).
    pub fn my_vht_node(&self) -> Option<NodeIdx> {
        self.vht.find_id(self.my_id).or_else(|| self.temp_vht.find_root(self.my_id).and_then(|r| self.vht.find_id(r)))
    }

    fn input_assigned(&self) -> bool {
        self.vht.find_id(self.my_id).is_some_and(|i| self.vht.node(i).level == 0)
    }

    pub fn emit(&self) -> Option<Message> {
        Some(match &self.phase {
            Phase::Begin => Message::Begin { id: self.my_id as u64 },
            Phase::Vht { top, .. } | Phase::Ack { top, .. } | Phase::Error { top } | Phase::Reset { top, .. } => *top,
            Phase::LeaderWait { .. } => Message::Null,
            Phase::Final { msg, .. } => *msg,
            Phase::Terminated => return None,
        })
    }

    pub fn receive(&mut self, inbox: &Inbox) {
        if self.phase == Phase::Terminated {
            return;
        }
        self.current_round += 1;
        if self.mode == Mode::Simultaneous && !matches!(self.phase, Phase::Final { .. }) {
            let final_msg = inbox.keys().filter(|m| matches!(m, Message::Final { .. })).max().cloned();
            if let Some(msg @ Message::Final { n, round }) = final_msg {
                self.phase = Phase::Final { msg, until: round + n };
            }
        }
        match std::mem::replace(&mut self.phase, Phase::Terminated) {
            Phase::Begin => self.set_up_new_level(inbox),
            Phase::Vht { remaining, top } => {
                let top = broadcast_step(top, inbox);
                if remaining > 1 {
                    self.phase = Phase::Vht { remaining: remaining - 1, top };
                } else if let Some(vht) = self.end_of_phase(top) {
                    let ack = if self.leader { vht } else { Message::Null };
                    self.phase = Phase::Ack { remaining: self.diam_estimate, top: ack, vht };
                }
            }
            Phase::Ack { remaining, top, vht } => {
                let top = broadcast_step(top, inbox);
                if remaining > 1 {
                    self.phase = Phase::Ack { remaining: remaining - 1, top, vht };
                } else if let Some(ack) = self.end_of_phase(top) {
                    if ack != vht {
                        self.broadcast_error();
                    } else {
                        self.apply_accepted(ack);
                    }
                }
            }
            Phase::Error { top } => {
                let top = broadcast_step(top, inbox);
                if matches!(top, Message::Reset { .. }) {
                    self.start_reset(top);
                } else {
                    self.phase = Phase::Error { top };
                }
            }
            Phase::LeaderWait { remaining } => {
                if remaining > 1 {
                    self.phase = Phase::LeaderWait { remaining: remaining - 1 };
                } else {
                    let reset = self.make_reset_message();
                    self.start_reset(reset);
                }
            }
            Phase::Reset { top, reset, final_round } => {
                let top = broadcast_step(top, inbox);
                if self.current_round >= final_round {
                    self.apply_reset(&reset);
                } else {
                    self.phase = Phase::Reset { top, reset, final_round };
                }
            }
            Phase::Final { msg, until } => {
                if self.current_round >= until {
                    if let Message::Final { n, .. } = msg {
                        self.give_output(Output::Count(n));
                    }
                } else {
                    self.phase = Phase::Final { msg, until };
                }
            }
            Phase::Terminated => {}
        }
    }

    /// Handles the begin round: records neighbor IDs and resets the level
    /// under construction.
    pub fn set_up_new_level(&mut self, inbox: &Inbox) {
        if let Some(bad) = inbox.keys().filter(|m| !matches!(m, Message::Begin { .. })).max().cloned() {
            self.handle_error(bad);
            return;
        }
        let mut obs: Vec<(i64, u64)> = inbox
            .iter()
            .filter_map(|(m, &mult)| match m {
                Message::Begin { id } if *id as i64 != self.my_id => Some((*id as i64, mult)),
                _ => None,
            })
            .collect();
        obs.push((self.my_id, 2));
        obs.sort_unstable();
        self.obs_list = obs;
        let prev: Vec<i64> =
            self.vht.level(self.current_level as i64 - 1).iter().filter_map(|&i| self.vht.node(i).id).collect();
        self.temp_vht = TempVht::from_roots(prev.iter().copied());
        self.level_graph = LevelGraph::from_nodes(prev);
        self.events.push(Event::LevelBegun { level: self.current_level });
        self.phase = Phase::Vht { remaining: self.diam_estimate, top: self.make_vht_message() };
    }

    pub fn make_vht_message(&self) -> Message {
        if self.mode == Mode::Generalized && self.current_level == 0 {
            return if self.leader || self.input_assigned() {
                Message::End
            } else {
                Message::Input { value: self.input }
            };
        }
        match self.obs_list.first() {
            Some(&(id2, mult)) => Message::Edge { id1: self.my_id as u64, id2: id2 as u64, mult },
            None if self.vht.find_id(self.my_id).is_some() => Message::End,
            None => Message::Done { id: self.my_id as u64 },
        }
    }

    /// Post-phase dispatch: Error and Reset divert to recovery.
    fn end_of_phase(&mut self, top: Message) -> Option<Message> {
        match top {
            Message::Error { .. } => {
                self.handle_error(top);
                None
            }
            Message::Reset { .. } => {
                self.start_reset(top);
                None
            }
            other => Some(other),
        }
    }

    fn apply_accepted(&mut self, msg: Message) {
        let applied = match msg {
            Message::Edge { id1, id2, mult } => self.update_temp_vht(id1 as i64, id2 as i64, mult),
            Message::Done { id } => self.update_vht(id as i64),
            Message::Input { value } if self.mode == Mode::Generalized && self.current_level == 0 => {
                self.accept_input(value)
            }
            Message::End => {
                self.finalize_level();
                return;
            }
            _ => Err(Inconsistent),
        };
        match applied {
            Ok(()) => self.phase = Phase::Vht { remaining: self.diam_estimate, top: self.make_vht_message() },
            Err(Inconsistent) => self.handle_error(Message::Error { level: self.current_level }),
        }
    }

    fn accept_input(&mut self, value: u64) -> Result<(), Inconsistent> {
        let label = InputLabel::Value(value);
        if self.vht.level(0).iter().any(|&i| self.vht.node(i).input == Some(label)) {
            return Err(Inconsistent);
        }
        let id = self.next_fresh_id;
        self.next_fresh_id += 1;
        self.vht.add_node(self.vht.root(), Some(id), Some(label));
        if !self.leader && self.input == value && !self.input_assigned() {
            self.my_id = id;
        }
        Ok(())
    }

    fn finalize_level(&mut self) {
        let level = self.current_level;
        self.events.push(Event::LevelFinalized { level });
        if self.leader && level >= 1 {
            let result = self
                .my_vht_node()
                .ok_or_else(|| "leader has no node".to_string())
                .and_then(|node| extract_view(&self.vht, node).map_err(|e| e.to_string()))
                .and_then(|view| {
                    let cm = if self.mode == Mode::Generalized { CountMode::Generalized } else { CountMode::Basic };
                    count_from_view(&view, cm).map_err(|e| e.to_string())
                });
            self.events.push(Event::CountAttempt { level, result: result.clone() });
            match (self.mode, result) {
                (Mode::Basic, Ok(CountResult::Count(n))) => return self.give_output(Output::Count(n)),
                (Mode::Simultaneous, Ok(CountResult::Count(n))) => {
                    let c = self.current_round;
                    self.phase = Phase::Final { msg: Message::Final { n, round: c }, until: c + n };
                    return;
                }
                (Mode::Generalized, Ok(CountResult::Inputs(inputs))) => {
                    let values = inputs
                        .into_iter()
                        .filter_map(|(label, count)| match label {
                            InputLabel::Value(v) => Some((v, count)),
                            InputLabel::Leader => None,
                        })
                        .collect();
                    return self.give_output(Output::Inputs(values));
                }
                _ => {}
            }
        }
        self.current_level += 1;
        self.phase = Phase::Begin;
    }

    fn give_output(&mut self, out: Output) {
        self.events.push(Event::Output(out.clone()));
        self.output = Some(out);
        self.phase = Phase::Terminated;
    }

    pub fn update_temp_vht(&mut self, id1: i64, id2: i64, mult: u64) -> Result<(), Inconsistent> {
        let root1 = self.temp_vht.find_root(id1).ok_or(Inconsistent)?;
        let root2 = self.temp_vht.find_root(id2).ok_or(Inconsistent)?;
        let child = self.next_fresh_id;
        self.next_fresh_id += 1;
        self.temp_vht.nodes.insert(child, TempNode { parent: Some(id1), red: BTreeMap::from([(root2, mult)]) });
        if self.my_id == id1 {
            if let Some(pos) = self.obs_list.iter().position(|&p| p == (id2, mult)) {
                self.obs_list.remove(pos);
                self.my_id = child;
            }
        }
        if root1 != root2 && !self.level_graph.has_edge(root1, root2) {
            self.level_graph.add_edge(root1, root2);
            self.prevent_cycles();
        }
        Ok(())
    }

    /// Drops observations whose acceptance would close a cycle in the level
    /// graph.
    pub fn prevent_cycles(&mut self) {
        let Some(root) = self.temp_vht.find_root(self.my_id) else { return };
        let lg = &self.level_graph;
        self.obs_list.retain(|&(id2, _)| {
            id2 == root || !lg.nodes.contains(&id2) || lg.has_edge(root, id2) || !lg.connected(root, id2)
        });
    }

    pub fn update_vht(&mut self, id: i64) -> Result<(), Inconsistent> {
        let root = self.temp_vht.find_root(id).ok_or(Inconsistent)?;
        if root == id || self.vht.find_id(id).is_some() {
            return Err(Inconsistent);
        }
        let parent = self.vht.find_id(root).ok_or(Inconsistent)?;
        let mut red = Vec::new();
        let mut iter = id;
        while iter != root {
            let node = &self.temp_vht.nodes[&iter];
            for (&target, &m) in &node.red {
                red.push((self.vht.find_id(target).ok_or(Inconsistent)?, m));
            }
            iter = node.parent.ok_or(Inconsistent)?;
        }
        let child = self.vht.add_node(parent, Some(id), None);
        for (target, m) in red {
            self.vht.add_red(child, target, m).map_err(|_| Inconsistent)?;
        }
        Ok(())
    }

    pub fn handle_error(&mut self, msg: Message) {
        if let Message::Error { level } = msg {
            if level < self.current_level {
                self.current_level = level;
            }
        }
        if self.leader {
            self.phase = Phase::LeaderWait { remaining: 2 * self.diam_estimate + 1 };
        } else {
            self.broadcast_error();
        }
    }

    fn broadcast_error(&mut self) {
        if self.leader {
            // The leader's acknowledgment is its own broadcast result, so a
            // mismatch only arises from foreign traffic; treat it as an
            // incoming error.
            self.phase = Phase::LeaderWait { remaining: 2 * self.diam_estimate + 1 };
            return;
        }
        self.events.push(Event::ErrorEntered { level: self.current_level });
        self.phase = Phase::Error { top: Message::Error { level: self.current_level } };
    }

    pub fn make_reset_message(&self) -> Message {
        Message::Reset {
            level: self.current_level,
            starting_round: self.current_round,
            new_diam: self.diam_estimate * 2,
        }
    }

    fn start_reset(&mut self, reset: Message) {
        let Message::Reset { starting_round, new_diam, .. } = reset else {
            unreachable!("start_reset takes a Reset message")
        };
        let final_round = starting_round + new_diam;
        if self.current_round >= final_round {
            self.apply_reset(&reset);
        } else {
            self.phase = Phase::Reset { top: reset, reset, final_round };
        }
    }

    fn apply_reset(&mut self, reset: &Message) {
        let Message::Reset { level, new_diam, .. } = *reset else { unreachable!("apply_reset takes a Reset message") };
        self.diam_estimate = new_diam;
        self.events.push(Event::ResetApplied { level, new_diam });
        if self.mode == Mode::Generalized && level == 0 {
            self.init_level_zero();
            return;
        }
        if let Some(node) = self.my_vht_node() {
            let anc = self.vht.ancestor_at(node, level as i64 - 1).unwrap_or(node);
            if let Some(id) = self.vht.node(anc).id {
                self.my_id = id;
            }
        }
        self.vht.truncate_levels(level as i64);
        self.temp_vht = TempVht::default();
        self.level_graph = LevelGraph::default();
        self.obs_list.clear();
        // Processes that spent the aborted level in an error phase skipped
        // some ID allocations; restart the counter from the surviving tree so
        // that everybody agrees on it again.
        self.next_fresh_id = self.vht.nodes().iter().filter_map(|n| n.id).max().map_or(2, |m| (m + 1).max(2));
        self.current_level = level;
        self.phase = Phase::Begin;
    }
}

fn broadcast_step(top: Message, inbox: &Inbox) -> Message {
    inbox.keys().fold(top, |acc, m| max_priority(acc, *m))
}

/// Round-driven process interface used by the engine.
pub trait Automaton {
    fn emit(&mut self) -> Option<Message>;
    fn receive(&mut self, inbox: &Inbox);
    fn output(&self) -> Option<&Output>;
}

impl Automaton for ProcessState {
    fn emit(&mut self) -> Option<Message> {
        ProcessState::emit(self)
    }

    fn receive(&mut self, inbox: &Inbox) {
        ProcessState::receive(self, inbox)
    }

    fn output(&self) -> Option<&Output> {
        self.output.as_ref()
    }
}

/// Runs `inner` on blocks of `t` real rounds: the block's first message is
/// repeated for the whole block and the union of the block's inboxes is
/// delivered as one round.
#[derive(Clone, Debug)]
pub struct TUnion<A> {
    inner: A,
    t: u64,
    step: u64,
    current: Option<Message>,
    acc: Inbox,
}

impl<A: Automaton> TUnion<A> {
    pub fn new(inner: A, t: u64) -> Self {
        assert!(t >= 1, "block length must be at least 1");
        TUnion { inner, t, step: 0, current: None, acc: Inbox::new() }
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut A {
        &mut self.inner
    }

    /// Whether the last `receive` closed a block.
    pub fn block_closed(&self) -> bool {
        self.step == 0
    }
}

impl<A: Automaton> Automaton for TUnion<A> {
    fn emit(&mut self) -> Option<Message> {
        if self.step == 0 {
            self.current = self.inner.emit();
        }
        self.current
    }

    fn receive(&mut self, inbox: &Inbox) {
        for (m, &c) in inbox {
            *self.acc.entry(*m).or_insert(0) += c;
        }
        self.step += 1;
        if self.step == self.t {
            self.step = 0;
            let acc = std::mem::take(&mut self.acc);
            self.inner.receive(&acc);
        }
    }

    fn output(&self) -> Option<&Output> {
        self.inner.output()
    }
}

/// A simulated process: the Counting automaton under the block wrapper
/// (`t = 1` for ordinary connected networks).
pub type Process = TUnion<ProcessState>;

#[cfg(test)]
mod tests {
    use super::*;

    fn inbox(msgs: &[(Message, u64)]) -> Inbox {
        msgs.iter().cloned().collect()
    }

    fn begun(leader: bool, neighbors: &[(Message, u64)]) -> ProcessState {
        let mut p = ProcessState::init_state(leader);
        p.receive(&inbox(neighbors));
        p
    }

    #[test]
    fn initial_values() {
        let l = ProcessState::init_state(true);
        let p = ProcessState::init_state(false);
        assert_eq!((l.my_id, p.my_id), (0, 1));
        assert_eq!(p.next_fresh_id, 2);
        assert_eq!(p.diam_estimate, 1);
        assert_eq!(p.current_level, 1);
        assert_eq!(p.phase, Phase::Begin);
        assert_eq!(p.vht.level(0).len(), 2);
        assert_eq!(p.emit(), Some(Message::Begin { id: 1 }));
    }

    #[test]
    fn begin_round_collects_observations() {
        let p = begun(false, &[(Message::Begin { id: 0 }, 1), (Message::Begin { id: 1 }, 2)]);
        assert_eq!(p.obs_list, vec![(0, 1), (1, 2)]);
        assert!(p.temp_vht.contains(0) && p.temp_vht.contains(1));
        assert_eq!(p.emit(), Some(Message::Edge { id1: 1, id2: 0, mult: 1 }));
        assert_eq!(p.current_round, 1);
    }

    #[test]
    fn foreign_message_in_begin_round_is_an_error() {
        let p = begun(false, &[(Message::Edge { id1: 0, id2: 0, mult: 2 }, 1)]);
        assert_eq!(p.phase, Phase::Error { top: Message::Error { level: 1 } });
        let l = begun(true, &[(Message::Error { level: 1 }, 1)]);
        assert_eq!(l.phase, Phase::LeaderWait { remaining: 3 });
    }

    #[test]
    fn accepted_edge_moves_the_observer() {
        let mut p = begun(false, &[(Message::Begin { id: 0 }, 1)]);
        p.update_temp_vht(1, 0, 1).unwrap();
        assert_eq!(p.my_id, 2);
        assert_eq!(p.next_fresh_id, 3);
        assert_eq!(p.temp_vht.find_root(2), Some(1));
        assert!(p.level_graph.has_edge(0, 1));
        assert!(p.update_temp_vht(9, 0, 1).is_err());
    }

    #[test]
    fn edge_of_another_class_leaves_observer_alone() {
        let mut p = begun(false, &[(Message::Begin { id: 0 }, 1)]);
        p.update_temp_vht(0, 1, 3).unwrap();
        assert_eq!(p.my_id, 1);
        assert_eq!(p.obs_list, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn cycle_closing_observations_are_dropped() {
        let mut p = ProcessState::init_state(false);
        p.my_id = 0;
        p.temp_vht = TempVht::from_roots([0, 1, 2]);
        p.level_graph = LevelGraph::from_nodes([0, 1, 2]);
        p.level_graph.add_edge(0, 1);
        p.level_graph.add_edge(1, 2);
        p.obs_list = vec![(0, 2), (1, 1), (2, 1)];
        p.prevent_cycles();
        assert_eq!(p.obs_list, vec![(0, 2), (1, 1)]);
        assert!(p.level_graph.is_spanning_tree());
    }

    #[test]
    fn level_graph_structure() {
        let mut g = LevelGraph::from_nodes([0, 1, 2]);
        assert!(!g.connected(0, 2));
        g.add_edge(0, 1);
        assert!(!g.is_spanning_tree());
        g.add_edge(1, 2);
        assert!(g.connected(0, 2) && g.is_spanning_tree());
        g.add_edge(2, 0);
        assert!(!g.is_acyclic());
    }

    #[test]
    fn done_adds_node_with_red_edges() {
        let mut p = begun(false, &[(Message::Begin { id: 0 }, 1)]);
        p.update_temp_vht(1, 0, 1).unwrap();
        p.update_vht(2).unwrap();
        let idx = p.vht.find_id(2).unwrap();
        let node = p.vht.node(idx);
        assert_eq!(node.level, 1);
        assert_eq!(node.parent, p.vht.find_id(1));
        assert_eq!(node.red, BTreeMap::from([(p.vht.find_id(0).unwrap(), 1)]));
        assert!(p.update_vht(2).is_err());
        assert!(p.update_vht(0).is_err());
    }

    #[test]
    fn reset_doubles_estimate_and_reverts_id() {
        let mut p = begun(false, &[(Message::Begin { id: 0 }, 1)]);
        p.update_temp_vht(1, 0, 1).unwrap();
        p.handle_error(Message::Error { level: 1 });
        assert!(p.is_error_process());
        let reset = Message::Reset { level: 1, starting_round: 1, new_diam: 2 };
        p.receive(&inbox(&[(reset, 1)]));
        assert!(matches!(p.phase, Phase::Reset { final_round: 3, .. }));
        assert_eq!(p.emit(), Some(reset));
        p.receive(&Inbox::new());
        assert_eq!(p.phase, Phase::Begin);
        assert_eq!(p.diam_estimate, 2);
        assert_eq!(p.my_id, 1);
        assert_eq!(p.next_fresh_id, 2);
        assert!(p.temp_vht.nodes.is_empty());
    }

    #[test]
    fn leader_reset_message() {
        let mut l = begun(true, &[(Message::Begin { id: 1 }, 1)]);
        l.handle_error(Message::Error { level: 1 });
        assert_eq!(l.phase, Phase::LeaderWait { remaining: 3 });
        for _ in 0..3 {
            l.receive(&Inbox::new());
        }
        let Phase::Reset { reset, .. } = &l.phase else { panic!("expected reset, got {:?}", l.phase) };
        assert_eq!(*reset, Message::Reset { level: 1, starting_round: 4, new_diam: 2 });
    }

    #[test]
    fn error_lowers_current_level() {
        let mut p = ProcessState::init_state(false);
        p.current_level = 4;
        p.handle_error(Message::Error { level: 2 });
        assert_eq!(p.current_level, 2);
        assert_eq!(p.emit(), Some(Message::Error { level: 2 }));
    }

    #[test]
    fn two_processes_count_each_other() {
        let mut ps = [ProcessState::init_state(true), ProcessState::init_state(false)];
        for _ in 0..200 {
            let out: Vec<Option<Message>> = ps.iter().map(|p| p.emit()).collect();
            for (i, p) in ps.iter_mut().enumerate() {
                let mut ib = Inbox::new();
                if let Some(m) = out[1 - i] {
                    ib.insert(m, 1);
                }
                p.receive(&ib);
            }
            if ps[0].output.is_some() {
                break;
            }
        }
        assert_eq!(ps[0].output, Some(Output::Count(2)));
    }

    #[derive(Default)]
    struct Tally {
        emitted: u64,
        seen: Vec<Inbox>,
    }

    impl Automaton for Tally {
        fn emit(&mut self) -> Option<Message> {
            self.emitted += 1;
            Some(Message::Begin { id: self.emitted })
        }
        fn receive(&mut self, inbox: &Inbox) {
            self.seen.push(inbox.clone());
        }
        fn output(&self) -> Option<&Output> {
            None
        }
    }

    #[test]
    fn t_union_repeats_and_merges() {
        let mut w = TUnion::new(Tally::default(), 3);
        let mut sent = Vec::new();
        for r in 0..6u64 {
            sent.push(w.emit());
            w.receive(&inbox(&[(Message::Begin { id: r % 2 }, 1)]));
            assert_eq!(w.block_closed(), r % 3 == 2);
        }
        assert_eq!(sent[0], sent[2]);
        assert_ne!(sent[2], sent[3]);
        assert_eq!(w.inner().seen.len(), 2);
        assert_eq!(w.inner().seen[0], inbox(&[(Message::Begin { id: 0 }, 2), (Message::Begin { id: 1 }, 1)]));
    }

    #[test]
    fn t_union_of_one_is_identity() {
        let mut w = TUnion::new(Tally::default(), 1);
        let m = w.emit();
        assert_eq!(m, Some(Message::Begin { id: 1 }));
        w.receive(&Inbox::new());
        assert!(w.block_closed());
        assert_eq!(w.inner().seen.len(), 1);
    }
}
