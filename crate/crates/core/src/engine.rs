//! Synchronous round engine: per-round multigraphs, schedulers, message
//! delivery and the lock-step driver.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::messages::{bit_size, Message};
use crate::protocol::{Automaton, Event, Mode, Output, Process, ProcessState};

/// Aggregated multiset of received messages.
pub type Inbox = BTreeMap<Message, u64>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("expected {expected} outgoing messages, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("link ({0}, {1}) is out of range")]
    LinkOutOfRange(usize, usize),
    #[error("round carries {links} links, over the bound {bound}")]
    TooManyLinks { links: u64, bound: u64 },
    #[error("T must be at least 1")]
    InvalidT,
    #[error("n must be at least 1")]
    EmptyNetwork,
    #[error("replayed trace has {have} processes, configuration has {want}")]
    TraceSize { have: usize, want: usize },
    #[error("replayed trace ran out after {0} rounds")]
    TraceExhausted(usize),
    #[error("generalized mode needs {want} inputs, got {have}")]
    InputCount { have: usize, want: usize },
    #[error("malformed trace: {0}")]
    Parse(String),
}

/// Undirected multigraph of one round. Keys are `(i, j)` with `i <= j`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RoundTopology {
    pub n: usize,
    pub links: BTreeMap<(usize, usize), u64>,
}

impl RoundTopology {
    pub fn new(n: usize) -> Self {
        RoundTopology { n, links: BTreeMap::new() }
    }

    pub fn add_link(&mut self, i: usize, j: usize, mult: u64) {
        if mult > 0 {
            *self.links.entry((i.min(j), i.max(j))).or_insert(0) += mult;
        }
    }

    pub fn link_count(&self) -> u64 {
        self.links.values().sum()
    }

    pub fn union(&self, other: &RoundTopology) -> RoundTopology {
        let mut out = self.clone();
        for (&(i, j), &m) in &other.links {
            out.add_link(i, j, m);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in self.links.keys() {
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }

    pub fn validate(&self, bound: u64) -> Result<(), EngineError> {
        for &(i, j) in self.links.keys() {
            if j >= self.n {
                return Err(EngineError::LinkOutOfRange(i, j));
            }
        }
        let links = self.link_count();
        if links > bound {
            return Err(EngineError::TooManyLinks { links, bound });
        }
        Ok(())
    }
}

/// Default per-round link bound, `n^3`.
pub fn default_link_bound(n: usize) -> u64 {
    (n as u64).pow(3).max(1)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub n: usize,
    /// Declared union-connectivity window.
    pub t: usize,
    pub rounds: Vec<RoundTopology>,
}

impl Trace {
    pub fn new(n: usize, t: usize, rounds: Vec<RoundTopology>) -> Self {
        Trace { n, t, rounds }
    }

    /// Whether every window of `t` consecutive rounds has a connected union.
    pub fn is_t_union_connected(&self, t: usize) -> bool {
        if t == 0 || self.rounds.len() < t {
            return t != 0 && self.rounds.is_empty();
        }
        self.rounds.windows(t).all(|w| w.iter().fold(RoundTopology::new(self.n), |acc, r| acc.union(r)).is_connected())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("n {} T {}\n", self.n, self.t);
        for (k, round) in self.rounds.iter().enumerate() {
            let _ = writeln!(out, "round {}", k + 1);
            for (&(i, j), &m) in &round.links {
                let _ = writeln!(out, "{i} {j} {m}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Trace, EngineError> {
        let bad = |line: usize, what: &str| EngineError::Parse(format!("line {line}: {what}"));
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (k, header) = lines.next().ok_or_else(|| bad(1, "missing header"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let (n, t) = match h.as_slice() {
            ["n", n, "T", t] => {
                (n.parse::<usize>().map_err(|_| bad(k, "bad n"))?, t.parse::<usize>().map_err(|_| bad(k, "bad T"))?)
            }
            _ => return Err(bad(k, "expected `n <n> T <T>`")),
        };
        let mut rounds: Vec<RoundTopology> = Vec::new();
        for (k, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["round", r] => {
                    let r: usize = r.parse().map_err(|_| bad(k, "bad round number"))?;
                    if r != rounds.len() + 1 {
                        return Err(bad(k, "rounds must be numbered consecutively from 1"));
                    }
                    rounds.push(RoundTopology::new(n));
                }
                [i, j, m] => {
                    let round = rounds.last_mut().ok_or_else(|| bad(k, "link before first round"))?;
                    let p = |s: &str| s.parse::<u64>().map_err(|_| bad(k, "bad number"));
                    let (i, j, m) = (p(i)? as usize, p(j)? as usize, p(m)?);
                    if i >= n || j >= n {
                        return Err(bad(k, "process index out of range"));
                    }
                    if m == 0 {
                        return Err(bad(k, "multiplicity must be positive"));
                    }
                    round.add_link(i, j, m);
                }
                _ => return Err(bad(k, "unrecognized line")),
            }
        }
        Ok(Trace { n, t, rounds })
    }
}

/// Delivers one round. `None` marks a terminated process, which neither
/// sends nor receives.
pub fn step_round(topology: &RoundTopology, outgoing: &[Option<Message>]) -> Result<Vec<Inbox>, EngineError> {
    if outgoing.len() != topology.n {
        return Err(EngineError::SizeMismatch { expected: topology.n, got: outgoing.len() });
    }
    let mut inboxes = vec![Inbox::new(); topology.n];
    for (&(i, j), &m) in &topology.links {
        if j >= topology.n {
            return Err(EngineError::LinkOutOfRange(i, j));
        }
        if i == j {
            if let Some(msg) = &outgoing[i] {
                *inboxes[i].entry(*msg).or_insert(0) += m;
            }
            continue;
        }
        if let (Some(a), Some(b)) = (&outgoing[i], &outgoing[j]) {
            *inboxes[i].entry(*b).or_insert(0) += m;
            *inboxes[j].entry(*a).or_insert(0) += m;
        }
    }
    Ok(inboxes)
}

// ---------------------------------------------------------------------------
// Schedulers

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    /// Star centered at process 0.
    Star,
    /// Path `0 - 1 - ... - n-1`.
    Path,
    Ring,
    Complete,
}

impl GraphKind {
    pub fn build(self, n: usize) -> RoundTopology {
        let mut t = RoundTopology::new(n);
        match self {
            GraphKind::Star => (1..n).for_each(|p| t.add_link(0, p, 1)),
            GraphKind::Path => (1..n).for_each(|p| t.add_link(p - 1, p, 1)),
            GraphKind::Ring => {
                (1..n).for_each(|p| t.add_link(p - 1, p, 1));
                if n > 2 {
                    t.add_link(n - 1, 0, 1);
                }
            }
            GraphKind::Complete => {
                for i in 0..n {
                    for j in i + 1..n {
                        t.add_link(i, j, 1);
                    }
                }
            }
        }
        t
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Star => "star",
            GraphKind::Path => "path",
            GraphKind::Ring => "ring",
            GraphKind::Complete => "complete",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchedulerSpec {
    Static(GraphKind),
    RandomConnected,
    Alternating(Vec<GraphKind>),
    /// Blocks of `t` rounds; each block slices one random connected graph.
    TUnion {
        t: usize,
    },
    /// A freshly permuted Hamiltonian path every round.
    PermutedPath,
    /// A static path for the first `switch` rounds, then a static star. The
    /// long early diameter forces estimate doublings and faulty broadcasts.
    PathThenStar {
        switch: u64,
    },
    Replay(Trace),
}

impl SchedulerSpec {
    pub fn name(&self) -> String {
        match self {
            SchedulerSpec::Static(g) => g.name().to_string(),
            SchedulerSpec::RandomConnected => "random-connected".into(),
            SchedulerSpec::Alternating(gs) => {
                let names: Vec<&str> = gs.iter().map(|g| g.name()).collect();
                format!("alternating:{}", names.join("+"))
            }
            SchedulerSpec::TUnion { t } => format!("t-union:{t}"),
            SchedulerSpec::PermutedPath => "permuted-path".into(),
            SchedulerSpec::PathThenStar { switch } => format!("path-then-star:{switch}"),
            SchedulerSpec::Replay(_) => "replay".into(),
        }
    }

    /// Rounds per virtual round when the processes run under the block
    /// wrapper.
    pub fn block_length(&self) -> usize {
        match self {
            SchedulerSpec::TUnion { t } => *t,
            SchedulerSpec::Replay(trace) => trace.t.max(1),
            _ => 1,
        }
    }
}

impl std::str::FromStr for GraphKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "star" => GraphKind::Star,
            "path" => GraphKind::Path,
            "ring" => GraphKind::Ring,
            "complete" => GraphKind::Complete,
            _ => return Err(EngineError::Parse(format!("unknown graph `{s}`"))),
        })
    }
}

/// Parses the names produced by [`SchedulerSpec::name`], except `replay`,
/// which needs a trace.
impl std::str::FromStr for SchedulerSpec {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let number = |v: &str| v.parse::<u64>().map_err(|_| EngineError::Parse(format!("bad number in `{s}`")));
        Ok(match s.split_once(':') {
            None => match s {
                "random-connected" => SchedulerSpec::RandomConnected,
                "permuted-path" => SchedulerSpec::PermutedPath,
                _ => SchedulerSpec::Static(s.parse()?),
            },
            Some(("alternating", gs)) => {
                SchedulerSpec::Alternating(gs.split('+').map(str::parse).collect::<Result<_, _>>()?)
            }
            Some(("t-union", t)) => SchedulerSpec::TUnion { t: number(t)? as usize },
            Some(("path-then-star", k)) => SchedulerSpec::PathThenStar { switch: number(k)? },
            _ => return Err(EngineError::Parse(format!("unknown scheduler `{s}`"))),
        })
    }
}

pub trait Scheduler: Send {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError>;
}

struct Static(RoundTopology);

impl Scheduler for Static {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        Ok(self.0.clone())
    }
}

struct Alternating {
    graphs: Vec<RoundTopology>,
    next: usize,
}

impl Scheduler for Alternating {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        let g = self.graphs[self.next % self.graphs.len()].clone();
        self.next += 1;
        Ok(g)
    }
}

/// Uniform labeled spanning tree via a random Prüfer sequence, plus each
/// non-tree pair with probability `extra`.
pub fn random_connected_graph(n: usize, extra: f64, rng: &mut impl Rng) -> RoundTopology {
    let mut t = RoundTopology::new(n);
    if n < 2 {
        return t;
    }
    if n == 2 {
        t.add_link(0, 1, 1);
        return t;
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &s in &seq {
        degree[s] += 1;
    }
    for &s in &seq {
        let leaf = (0..n).find(|&v| degree[v] == 1).expect("a leaf exists");
        t.add_link(leaf, s, 1);
        degree[leaf] -= 1;
        degree[s] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    t.add_link(rest[0], rest[1], 1);
    for i in 0..n {
        for j in i + 1..n {
            if !t.links.contains_key(&(i, j)) && rng.gen_bool(extra) {
                t.add_link(i, j, 1);
            }
        }
    }
    t
}

pub const EXTRA_EDGE_PROBABILITY: f64 = 0.2;

struct RandomConnected {
    n: usize,
    rng: ChaCha8Rng,
}

impl Scheduler for RandomConnected {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        Ok(random_connected_graph(self.n, EXTRA_EDGE_PROBABILITY, &mut self.rng))
    }
}

struct TUnion {
    n: usize,
    t: usize,
    rng: ChaCha8Rng,
    pending: VecDeque<RoundTopology>,
    previous: Vec<RoundTopology>,
}

impl Scheduler for TUnion {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        if self.pending.is_empty() {
            let g = random_connected_graph(self.n, EXTRA_EDGE_PROBABILITY, &mut self.rng);
            let mut edges: Vec<(usize, usize)> = g.links.keys().copied().collect();
            edges.shuffle(&mut self.rng);
            let mut slices = vec![RoundTopology::new(self.n); self.t];
            for (k, (i, j)) in edges.into_iter().enumerate() {
                slices[k % self.t].add_link(i, j, 1);
            }
            // Position `i` of a block repeats slice `i` of the previous block,
            // so windows straddling two blocks still cover a whole graph.
            let rounds = slices.iter().zip(&self.previous).map(|(s, p)| s.union(p)).collect::<Vec<_>>();
            self.pending.extend(if self.previous.is_empty() { slices.clone() } else { rounds });
            self.previous = slices;
        }
        Ok(self.pending.pop_front().expect("block refilled"))
    }
}

struct PermutedPath {
    n: usize,
    rng: ChaCha8Rng,
}

impl Scheduler for PermutedPath {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        let mut t = RoundTopology::new(self.n);
        for w in order.windows(2) {
            t.add_link(w[0], w[1], 1);
        }
        Ok(t)
    }
}

struct PathThenStar {
    path: RoundTopology,
    star: RoundTopology,
    switch: u64,
    round: u64,
}

impl Scheduler for PathThenStar {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        self.round += 1;
        Ok(if self.round <= self.switch { self.path.clone() } else { self.star.clone() })
    }
}

struct Replay {
    rounds: Vec<RoundTopology>,
    next: usize,
}

impl Scheduler for Replay {
    fn next_round(&mut self) -> Result<RoundTopology, EngineError> {
        let r = self.rounds.get(self.next).cloned().ok_or(EngineError::TraceExhausted(self.next))?;
        self.next += 1;
        Ok(r)
    }
}

pub fn scheduler_static(graph: RoundTopology) -> Box<dyn Scheduler> {
    Box::new(Static(graph))
}

pub fn scheduler_alternating(graphs: Vec<RoundTopology>) -> Box<dyn Scheduler> {
    assert!(!graphs.is_empty(), "alternating scheduler needs at least one graph");
    Box::new(Alternating { graphs, next: 0 })
}

pub fn scheduler_random_connected(n: usize, seed: u64) -> Box<dyn Scheduler> {
    Box::new(RandomConnected { n, rng: ChaCha8Rng::seed_from_u64(seed) })
}

pub fn scheduler_t_union(n: usize, t: usize, seed: u64) -> Result<Box<dyn Scheduler>, EngineError> {
    if t < 1 {
        return Err(EngineError::InvalidT);
    }
    Ok(Box::new(TUnion { n, t, rng: ChaCha8Rng::seed_from_u64(seed), pending: VecDeque::new(), previous: Vec::new() }))
}

pub fn scheduler_permuted_path(n: usize, seed: u64) -> Box<dyn Scheduler> {
    Box::new(PermutedPath { n, rng: ChaCha8Rng::seed_from_u64(seed) })
}

pub fn make_scheduler(spec: &SchedulerSpec, n: usize, seed: u64) -> Result<Box<dyn Scheduler>, EngineError> {
    if n == 0 {
        return Err(EngineError::EmptyNetwork);
    }
    Ok(match spec {
        SchedulerSpec::Static(g) => scheduler_static(g.build(n)),
        SchedulerSpec::Alternating(gs) => {
            if gs.is_empty() {
                return Err(EngineError::Parse("alternating needs at least one graph".into()));
            }
            scheduler_alternating(gs.iter().map(|g| g.build(n)).collect())
        }
        SchedulerSpec::RandomConnected => scheduler_random_connected(n, seed),
        SchedulerSpec::TUnion { t } => scheduler_t_union(n, *t, seed)?,
        SchedulerSpec::PermutedPath => scheduler_permuted_path(n, seed),
        SchedulerSpec::PathThenStar { switch } => Box::new(PathThenStar {
            path: GraphKind::Path.build(n),
            star: GraphKind::Star.build(n),
            switch: *switch,
            round: 0,
        }),
        SchedulerSpec::Replay(trace) => {
            if trace.n != n {
                return Err(EngineError::TraceSize { have: trace.n, want: n });
            }
            Box::new(Replay { rounds: trace.rounds.clone(), next: 0 })
        }
    })
}

/// Worst-case round bound for a connected network of `n` processes:
/// `64 n^3 (log2 n + 2)`, rounded up.
pub fn round_bound(n: usize) -> u64 {
    let n = n.max(1) as f64;
    (64.0 * n.powi(3) * (n.log2() + 2.0)).ceil() as u64
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub n: usize,
    pub scheduler: SchedulerSpec,
    pub mode: Mode,
    pub seed: u64,
    /// Real-round budget.
    pub budget: u64,
    pub record_trace: bool,
    /// Per-process inputs for generalized mode; the leader's entry is ignored.
    pub inputs: Vec<u64>,
    pub link_bound: u64,
}

impl RunConfig {
    pub fn new(n: usize, scheduler: SchedulerSpec) -> Self {
        let t = scheduler.block_length().max(1) as u64;
        RunConfig {
            n,
            mode: Mode::Basic,
            seed: 0,
            budget: 2 * t * round_bound(n) + 1000,
            record_trace: false,
            inputs: Vec::new(),
            link_bound: default_link_bound(n),
            scheduler,
        }
    }

    pub fn mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn record_trace(mut self, on: bool) -> Self {
        self.record_trace = on;
        self
    }

    pub fn inputs(mut self, inputs: Vec<u64>) -> Self {
        self.inputs = inputs;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunMetrics {
    /// Real rounds until the run stopped.
    pub rounds: u64,
    pub resets: u64,
    pub max_diam_estimate: u64,
    /// Distinct red edges in the leader's final VHT.
    pub distinct_red_edges: usize,
    pub max_msg_bits: usize,
    pub max_param: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Terminated,
    BudgetExhausted,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub outputs: Vec<Option<Output>>,
    /// Real round at which each process produced its output.
    pub output_rounds: Vec<Option<u64>>,
    pub metrics: RunMetrics,
    pub trace: Option<Trace>,
    pub outcome: Outcome,
    /// Final state of every process.
    pub states: Vec<ProcessState>,
}

impl RunReport {
    pub fn leader_output(&self) -> Option<&Output> {
        self.outputs.first().and_then(|o| o.as_ref())
    }
}

/// Observer called once per virtual round (a block of `T` real rounds).
pub trait Monitor {
    fn on_virtual_round(
        &mut self,
        _real_round: u64,
        _topology: &RoundTopology,
        _states: &[&ProcessState],
        _events: &[(usize, Event)],
    ) {
    }
}

pub struct NoMonitor;

impl Monitor for NoMonitor {}

pub fn run(config: &RunConfig) -> Result<RunReport, EngineError> {
    run_with_monitor(config, &mut NoMonitor)
}

pub fn run_with_monitor(config: &RunConfig, monitor: &mut dyn Monitor) -> Result<RunReport, EngineError> {
    let scheduler = make_scheduler(&config.scheduler, config.n, config.seed)?;
    run_with_scheduler(config, scheduler, monitor)
}

/// Runs the processes against an explicit scheduler; `config.scheduler` only
/// supplies the block length.
pub fn run_with_scheduler(
    config: &RunConfig,
    mut scheduler: Box<dyn Scheduler>,
    monitor: &mut dyn Monitor,
) -> Result<RunReport, EngineError> {
    let n = config.n;
    if n == 0 {
        return Err(EngineError::EmptyNetwork);
    }
    let t = config.scheduler.block_length();
    if t == 0 {
        return Err(EngineError::InvalidT);
    }
    if config.mode == Mode::Generalized && config.inputs.len() != n {
        return Err(EngineError::InputCount { have: config.inputs.len(), want: n });
    }
    let mut procs: Vec<Process> = (0..n)
        .map(|i| {
            let input = config.inputs.get(i).copied().unwrap_or(0);
            Process::new(ProcessState::with_mode(config.mode, i == 0, input), t as u64)
        })
        .collect();
    let mut metrics = RunMetrics { max_diam_estimate: 1, ..RunMetrics::default() };
    let mut trace = config.record_trace.then(|| Trace::new(n, t, Vec::new()));
    let mut output_rounds = vec![None; n];
    let mut block = RoundTopology::new(n);
    let mut round = 0u64;
    let done = |procs: &[Process]| match config.mode {
        Mode::Simultaneous => procs.iter().all(|p| p.output().is_some()),
        _ => procs[0].output().is_some(),
    };
    while !done(&procs) && round < config.budget {
        let topology = scheduler.next_round()?;
        if topology.n != n {
            return Err(EngineError::SizeMismatch { expected: n, got: topology.n });
        }
        topology.validate(config.link_bound)?;
        let outgoing: Vec<Option<Message>> = procs.iter_mut().map(|p| p.emit()).collect();
        for m in outgoing.iter().flatten() {
            metrics.max_msg_bits = metrics.max_msg_bits.max(bit_size(m));
            metrics.max_param = metrics.max_param.max(m.max_param());
        }
        let inboxes = step_round(&topology, &outgoing)?;
        for (p, inbox) in procs.iter_mut().zip(&inboxes) {
            p.receive(inbox);
        }
        round += 1;
        block = block.union(&topology);
        if let Some(tr) = trace.as_mut() {
            tr.rounds.push(topology);
        }
        if procs[0].block_closed() {
            let mut events = Vec::new();
            for (i, p) in procs.iter_mut().enumerate() {
                for e in p.inner_mut().take_events() {
                    if i == 0 && matches!(e, Event::ResetApplied { .. }) {
                        metrics.resets += 1;
                    }
                    if matches!(e, Event::Output(_)) {
                        output_rounds[i] = Some(round);
                    }
                    events.push((i, e));
                }
                metrics.max_diam_estimate = metrics.max_diam_estimate.max(p.inner().diam_estimate);
            }
            let states: Vec<&ProcessState> = procs.iter().map(|p| p.inner()).collect();
            monitor.on_virtual_round(round, &block, &states, &events);
            block = RoundTopology::new(n);
        }
    }
    metrics.rounds = round;
    let leader = procs[0].inner();
    metrics.distinct_red_edges = leader.vht.distinct_red_edges(leader.vht.depth());
    Ok(RunReport {
        outputs: procs.iter().map(|p| p.output().cloned()).collect(),
        output_rounds,
        metrics,
        trace,
        outcome: if done(&procs) { Outcome::Terminated } else { Outcome::BudgetExhausted },
        states: procs.iter().map(|p| p.inner().clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn begin(id: u64) -> Option<Message> {
        Some(Message::Begin { id })
    }

    #[test]
    fn path_delivery() {
        let g = GraphKind::Path.build(3);
        let inboxes = step_round(&g, &[begin(0), begin(1), begin(2)]).unwrap();
        assert_eq!(inboxes[0], Inbox::from([(Message::Begin { id: 1 }, 1)]));
        assert_eq!(inboxes[1], Inbox::from([(Message::Begin { id: 0 }, 1), (Message::Begin { id: 2 }, 1)]));
    }

    #[test]
    fn multiplicities_and_self_loops_add_up() {
        let mut g = RoundTopology::new(2);
        g.add_link(0, 1, 2);
        g.add_link(1, 0, 1);
        g.add_link(1, 1, 2);
        let inboxes = step_round(&g, &[begin(5), begin(5)]).unwrap();
        assert_eq!(inboxes[0][&Message::Begin { id: 5 }], 3);
        assert_eq!(inboxes[1][&Message::Begin { id: 5 }], 5);
    }

    #[test]
    fn terminated_processes_are_silent_and_deaf() {
        let g = GraphKind::Star.build(3);
        let inboxes = step_round(&g, &[None, begin(1), begin(2)]).unwrap();
        assert!(inboxes.iter().all(|i| i.is_empty()));
    }

    #[test]
    fn delivery_rejects_bad_shapes() {
        let g = GraphKind::Path.build(3);
        assert_eq!(step_round(&g, &[begin(0)]), Err(EngineError::SizeMismatch { expected: 3, got: 1 }));
        let mut big = RoundTopology::new(2);
        big.add_link(0, 1, 9);
        assert_eq!(big.validate(8), Err(EngineError::TooManyLinks { links: 9, bound: 8 }));
    }

    #[test]
    fn round_bound_values() {
        assert_eq!(round_bound(1), 128);
        assert_eq!(round_bound(2), 1536);
        assert_eq!(round_bound(4), 64 * 64 * 4);
    }

    #[test]
    fn trace_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rounds = (0..4).map(|_| random_connected_graph(5, 0.3, &mut rng)).collect();
        let trace = Trace::new(5, 1, rounds);
        assert_eq!(Trace::from_text(&trace.to_text()).unwrap(), trace);
    }

    #[test]
    fn trace_parse_errors() {
        for text in [
            "",
            "n 2\n",
            "n 2 T 1\n0 1 1\n",
            "n 2 T 1\nround 2\n",
            "n 2 T 1\nround 1\n0 5 1\n",
            "n 2 T 1\nround 1\n0 1 0\n",
        ] {
            assert!(matches!(Trace::from_text(text), Err(EngineError::Parse(_))), "{text:?}");
        }
    }

    #[test]
    fn t_union_connectivity_of_traces() {
        let mut a = RoundTopology::new(3);
        a.add_link(0, 1, 1);
        let mut b = RoundTopology::new(3);
        b.add_link(1, 2, 1);
        let trace = Trace::new(3, 2, vec![a.clone(), b.clone(), a]);
        assert!(!trace.is_t_union_connected(1));
        assert!(trace.is_t_union_connected(2));
    }

    #[test]
    fn t_union_scheduler_blocks_are_connected() {
        let mut s = scheduler_t_union(7, 3, 11).unwrap();
        let rounds: Vec<RoundTopology> = (0..30).map(|_| s.next_round().unwrap()).collect();
        assert!(Trace::new(7, 3, rounds).is_t_union_connected(3));
        assert!(scheduler_t_union(7, 0, 0).is_err());
    }

    #[test]
    fn empty_network_is_rejected() {
        let cfg = RunConfig::new(0, SchedulerSpec::Static(GraphKind::Star));
        assert_eq!(run(&cfg).unwrap_err(), EngineError::EmptyNetwork);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let cfg = RunConfig::new(5, SchedulerSpec::Static(GraphKind::Path)).budget(3);
        let report = run(&cfg).unwrap();
        assert_eq!(report.outcome, Outcome::BudgetExhausted);
        assert_eq!(report.metrics.rounds, 3);
        assert!(report.leader_output().is_none());
    }

    #[test]
    fn runs_are_deterministic_and_replayable() {
        let cfg = RunConfig::new(5, SchedulerSpec::RandomConnected).seed(4).record_trace(true);
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.leader_output(), Some(&Output::Count(5)));
        let trace = a.trace.clone().unwrap();
        assert_eq!(trace.rounds.len() as u64, a.metrics.rounds);
        let replay = run(&RunConfig::new(5, SchedulerSpec::Replay(trace))).unwrap();
        assert_eq!(replay.metrics, a.metrics);
        assert_eq!(replay.outputs, a.outputs);
    }

    #[test]
    fn short_replay_runs_out() {
        let trace = Trace::new(3, 1, vec![GraphKind::Path.build(3)]);
        let err = run(&RunConfig::new(3, SchedulerSpec::Replay(trace))).unwrap_err();
        assert_eq!(err, EngineError::TraceExhausted(1));
    }

    #[test]
    fn scheduler_names_round_trip() {
        for name in [
            "star",
            "ring",
            "random-connected",
            "permuted-path",
            "alternating:star+path",
            "t-union:3",
            "path-then-star:40",
        ] {
            assert_eq!(name.parse::<SchedulerSpec>().unwrap().name(), name);
        }
        for bad in ["", "tree", "t-union:x", "alternating:star+cube"] {
            assert!(bad.parse::<SchedulerSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn path_then_star_switches() {
        let mut s = make_scheduler(&SchedulerSpec::PathThenStar { switch: 2 }, 4, 0).unwrap();
        let rounds: Vec<RoundTopology> = (0..3).map(|_| s.next_round().unwrap()).collect();
        assert_eq!(rounds[1], GraphKind::Path.build(4));
        assert_eq!(rounds[2], GraphKind::Star.build(4));
    }

    proptest! {
        #[test]
        fn random_graphs_are_connected(n in 1usize..20, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_connected_graph(n, EXTRA_EDGE_PROBABILITY, &mut rng);
            prop_assert!(g.is_connected());
            prop_assert!(g.validate(default_link_bound(n)).is_ok());
        }

        #[test]
        fn delivery_conserves_messages(n in 1usize..10, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_connected_graph(n, 0.5, &mut rng);
            let out: Vec<Option<Message>> = (0..n as u64).map(begin).collect();
            let inboxes = step_round(&g, &out).unwrap();
            let received: u64 = inboxes.iter().flat_map(|i| i.values()).sum();
            prop_assert_eq!(received, 2 * g.link_count());
            for (v, inbox) in inboxes.iter().enumerate() {
                let deg: u64 = g.links.iter().filter(|(&(i, j), _)| i == v || j == v).map(|(_, &m)| m).sum();
                prop_assert_eq!(inbox.values().sum::<u64>(), deg);
            }
        }
    }
}
