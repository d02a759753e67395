//! Experiment runner and runtime invariant monitor.
//!
//! The monitor only reads process snapshots handed out by the engine after
//! every virtual round. It rebuilds the virtual network from the begin-round
//! topologies and the finalized level graphs, derives the ideal VHT from it,
//! and checks the effective VHT against it whenever the leader finalizes a
//! level.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::counting::{infer_anonymities, result_from_state, CountMode, CountResult};
use crate::engine::{
    make_scheduler, round_bound, run_with_scheduler, EngineError, Monitor, Outcome, RoundTopology, RunConfig,
    RunReport, Scheduler, Trace,
};
use crate::history_tree::{build_ground_truth, extract_view, is_generalized_view_of, HistoryTree, InputLabel};
use crate::messages::varint_bits;
use crate::protocol::{Event, Mode, Output, PhaseKind, ProcessState, NON_LEADER_LABEL};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    /// Name of the violated invariant.
    pub check: &'static str,
    /// Real round at which it was first observed.
    pub round: u64,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at round {}: {}", self.check, self.round, self.detail)
    }
}

pub const DIAM_AGREEMENT: &str = "diam-agreement";
pub const STATE_AGREEMENT: &str = "state-agreement";
pub const PHASE_LOCKSTEP: &str = "phase-lockstep";
pub const DIAM_BOUND: &str = "diam-bound";
pub const RESET_BOUND: &str = "reset-bound";
pub const VHT_VIEW: &str = "vht-generalized-view";
pub const RED_EDGE_BOUND: &str = "red-edge-bound";
pub const VIRTUAL_CONNECTIVITY: &str = "virtual-network-connected";
pub const LEVEL_GRAPH_TREE: &str = "level-graph-acyclic";
pub const ROUND_BOUND: &str = "round-bound";
pub const MESSAGE_SIZE: &str = "message-size";
pub const COUNT_SOUNDNESS: &str = "count-soundness";
pub const COUNT_COMPLETENESS: &str = "count-completeness";
pub const TERMINATION: &str = "termination";

/// Largest admissible number of resets for `n` processes.
pub fn reset_bound(n: usize) -> f64 {
    (n.max(1) as f64).log2() + 3.0
}

/// Bound on distinct red edges in the first `m` levels of the ideal VHT.
pub fn red_edge_bound(n: usize, m: usize) -> usize {
    2 * n * (m + n)
}

pub fn message_bit_bound(max_param: u64) -> usize {
    3 + 3 * varint_bits(max_param)
}

pub fn param_bound(n: usize) -> u64 {
    64 * (n.max(1) as u64).pow(4)
}

/// Level-0 labels of the processes for a configuration.
pub fn input_labels(config: &RunConfig) -> Vec<InputLabel> {
    (0..config.n)
        .map(|p| match (p, config.mode) {
            (0, _) => InputLabel::Leader,
            (_, Mode::Generalized) => InputLabel::Value(config.inputs[p]),
            _ => NON_LEADER_LABEL,
        })
        .collect()
}

pub fn expected_output(config: &RunConfig) -> Output {
    match config.mode {
        Mode::Generalized => {
            let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
            for &v in &config.inputs[1..] {
                *counts.entry(v).or_insert(0) += 1;
            }
            Output::Inputs(counts.into_iter().collect())
        }
        _ => Output::Count(config.n as u64),
    }
}

struct BeginRecord {
    topology: RoundTopology,
    ids: Vec<i64>,
    participants: Vec<bool>,
}

/// Invariant monitor; attach to a run through [`Monitor`].
pub struct InvariantMonitor {
    n: usize,
    mode: Mode,
    inputs: Vec<InputLabel>,
    begin: Option<BeginRecord>,
    /// Rounds `N_1, N_2, ...` of the virtual network.
    pub virtual_rounds: Vec<RoundTopology>,
    pub violations: Vec<Violation>,
    /// Level at which the leader's count first came back as a number.
    pub count_level: Option<u64>,
    /// Largest distinct red edge count seen in the first `3n` ideal levels.
    pub max_red_edges: usize,
    pub resets: u64,
    pub levels_checked: u64,
    prev_kinds: Vec<PhaseKind>,
    seen: BTreeSet<&'static str>,
}

impl InvariantMonitor {
    pub fn new(config: &RunConfig) -> Self {
        InvariantMonitor {
            n: config.n,
            mode: config.mode,
            inputs: input_labels(config),
            begin: None,
            virtual_rounds: Vec::new(),
            violations: Vec::new(),
            count_level: None,
            max_red_edges: 0,
            resets: 0,
            levels_checked: 0,
            prev_kinds: Vec::new(),
            seen: BTreeSet::new(),
        }
    }

    /// Records a violation; only the first occurrence of each check is kept.
    fn fail(&mut self, check: &'static str, round: u64, detail: String) {
        if self.seen.insert(check) {
            self.violations.push(Violation { check, round, detail });
        }
    }

    fn check_agreement(&mut self, round: u64, states: &[&ProcessState]) {
        let non_error: Vec<&ProcessState> = states
            .iter()
            .copied()
            .filter(|s| !matches!(s.phase.kind(), PhaseKind::Error | PhaseKind::Terminated))
            .collect();
        // A process in a reset phase may carry the estimate from before a
        // reset it missed; the reset it is propagating overwrites it.
        let settled: Vec<&ProcessState> =
            non_error.iter().copied().filter(|s| s.phase.kind() != PhaseKind::Reset).collect();
        if let Some(first) = settled.first() {
            if let Some(other) = settled.iter().find(|s| s.diam_estimate != first.diam_estimate) {
                let detail = format!("estimates {} and {}", first.diam_estimate, other.diam_estimate);
                self.fail(DIAM_AGREEMENT, round, detail);
            }
        }
        let leader = states[0];
        let leader_kind = leader.phase.kind();
        if matches!(
            leader_kind,
            PhaseKind::Begin | PhaseKind::VhtBroadcast | PhaseKind::AckBroadcast | PhaseKind::Reset
        ) {
            if let Some(p) = non_error.iter().position(|s| s.phase.kind() != leader_kind) {
                let detail = format!("leader in {leader_kind:?}, a process in {:?}", non_error[p].phase.kind());
                self.fail(PHASE_LOCKSTEP, round, detail);
            }
        }
        // Structures change only at phase boundaries; compare them when some
        // process has just switched phase.
        let kinds: Vec<PhaseKind> = states.iter().map(|s| s.phase.kind()).collect();
        let switched = kinds != self.prev_kinds;
        self.prev_kinds = kinds;
        let building: Vec<&ProcessState> = states
            .iter()
            .copied()
            .filter(|s| matches!(s.phase.kind(), PhaseKind::Begin | PhaseKind::VhtBroadcast | PhaseKind::AckBroadcast))
            .collect();
        if leader_kind == PhaseKind::Wait {
            // The waiting leader may already have lowered its level while the
            // others finish their phase.
            return;
        }
        let Some(first) = building.first() else { return };
        for s in &building[1..] {
            let what = if s.current_level != first.current_level {
                "CurrentLevel"
            } else if s.next_fresh_id != first.next_fresh_id {
                "NextFreshID"
            } else if switched && s.vht != first.vht {
                "VHT"
            } else if switched && s.temp_vht != first.temp_vht {
                "TempVHT"
            } else if switched && s.level_graph != first.level_graph {
                "LevelGraph"
            } else {
                continue;
            };
            self.fail(STATE_AGREEMENT, round, format!("non-error processes disagree on {what}"));
            return;
        }
    }

    fn on_level_begun(&mut self, topology: &RoundTopology, states: &[&ProcessState], events: &[(usize, Event)]) {
        let level = states[0].current_level;
        let participants: Vec<bool> =
            (0..self.n).map(|p| events.iter().any(|(q, e)| *q == p && *e == Event::LevelBegun { level })).collect();
        self.begin = Some(BeginRecord {
            topology: topology.clone(),
            ids: states.iter().map(|s| s.my_id).collect(),
            participants,
        });
    }

    fn on_level_finalized(&mut self, round: u64, level: u64, leader: &ProcessState) {
        if level >= 1 {
            let Some(begin) = self.begin.take() else {
                self.fail(VHT_VIEW, round, format!("level {level} finalized without a begin round"));
                return;
            };
            match self.virtual_round(&begin, leader, level) {
                Ok(net) => {
                    if !net.is_connected() {
                        self.fail(VIRTUAL_CONNECTIVITY, round, format!("virtual round {level} is disconnected"));
                    }
                    self.virtual_rounds.truncate(level as usize - 1);
                    self.virtual_rounds.push(net);
                }
                Err(detail) => {
                    self.fail(VHT_VIEW, round, detail);
                    return;
                }
            }
            if !leader.level_graph.is_acyclic() {
                self.fail(LEVEL_GRAPH_TREE, round, format!("level graph of level {level} has a cycle"));
            }
        }
        let ideal = match self.ideal_vht(level as usize) {
            Ok(tree) => tree,
            Err(e) => return self.fail(VHT_VIEW, round, e),
        };
        let effective = self.effective_vht(&leader.vht);
        if !is_generalized_view_of(&effective, &ideal) {
            self.fail(
                VHT_VIEW,
                round,
                format!("effective VHT is not a generalized view of the ideal one at level {level}"),
            );
        }
        let m = 3 * self.n;
        let red = ideal.distinct_red_edges(m as i64);
        self.max_red_edges = self.max_red_edges.max(red);
        if red > red_edge_bound(self.n, m) {
            self.fail(RED_EDGE_BOUND, round, format!("{red} distinct red edges in the first {m} levels"));
        }
        self.levels_checked += 1;
    }

    /// Virtual round of `level`: links of the begin round between classes
    /// joined by the level graph, plus one cycle per class.
    fn virtual_round(&self, begin: &BeginRecord, leader: &ProcessState, level: u64) -> Result<RoundTopology, String> {
        let gt = build_ground_truth(&self.trace(level as usize - 1), &self.inputs, level as usize - 1)
            .map_err(|e| e.to_string())?;
        let class: Vec<usize> = (0..self.n).map(|p| gt.node_of(level as usize - 1, p)).collect();
        let mut id_class: BTreeMap<i64, usize> = BTreeMap::new();
        for p in (0..self.n).filter(|&p| begin.participants[p]) {
            if let Some(&c) = id_class.get(&begin.ids[p]) {
                if c != class[p] {
                    return Err(format!("ID {} spans two classes at level {level}", begin.ids[p]));
                }
            }
            id_class.insert(begin.ids[p], class[p]);
        }
        let mut links_between: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(i, j) in begin.topology.links.keys() {
            let (a, b) = (class[i], class[j]);
            if a != b {
                links_between.insert((a.min(b), a.max(b)));
            }
        }
        // Spanning tree: the level graph's edges first, then arbitrary class
        // links to join classes that no participating process represents.
        let mut parent: BTreeMap<usize, usize> = class.iter().map(|&c| (c, c)).collect();
        fn find(parent: &mut BTreeMap<usize, usize>, v: usize) -> usize {
            let p = parent[&v];
            if p == v {
                return v;
            }
            let r = find(parent, p);
            parent.insert(v, r);
            r
        }
        let mut tree_edges = BTreeSet::new();
        let from_graph =
            leader.level_graph.edges.iter().map(|&(x, y)| (id_class.get(&x).copied(), id_class.get(&y).copied()));
        let mut candidates = Vec::new();
        for (a, b) in from_graph {
            let (Some(a), Some(b)) = (a, b) else {
                return Err(format!("level graph of level {level} names an unknown ID"));
            };
            candidates.push((a.min(b), a.max(b)));
        }
        candidates.extend(links_between.iter().copied());
        for (a, b) in candidates {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent.insert(ra, rb);
                tree_edges.insert((a, b));
            }
        }
        let mut net = RoundTopology::new(self.n);
        for (&(i, j), &m) in &begin.topology.links {
            let (a, b) = (class[i], class[j]);
            if a != b && tree_edges.contains(&(a.min(b), a.max(b))) {
                net.add_link(i, j, m);
            }
        }
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (p, &c) in class.iter().enumerate() {
            members.entry(c).or_default().push(p);
        }
        for ps in members.values() {
            match ps.as_slice() {
                [p] => net.add_link(*p, *p, 2),
                [p, q] => net.add_link(*p, *q, 2),
                _ => {
                    for k in 0..ps.len() {
                        net.add_link(ps[k], ps[(k + 1) % ps.len()], 1);
                    }
                }
            }
        }
        Ok(net)
    }

    fn trace(&self, rounds: usize) -> Trace {
        Trace::new(self.n, 1, self.virtual_rounds[..rounds.min(self.virtual_rounds.len())].to_vec())
    }

    fn ideal_vht(&self, depth: usize) -> Result<HistoryTree, String> {
        build_ground_truth(&self.trace(depth), &self.inputs, depth).map(|gt| gt.tree).map_err(|e| e.to_string())
    }

    /// Effective VHT without the basic-mode level-0 node that represents no
    /// process when the leader is alone.
    fn effective_vht(&self, vht: &HistoryTree) -> HistoryTree {
        if self.mode == Mode::Generalized || self.n > 1 {
            return vht.clone();
        }
        let keep: Vec<bool> = (0..vht.len())
            .map(|i| vht.ancestor_at(i, 0).is_none_or(|a| vht.node(a).input != Some(NON_LEADER_LABEL)))
            .collect();
        vht.filtered(&keep).0
    }

    /// Ideal VHT over every recorded virtual round.
    pub fn final_ideal_vht(&self) -> Result<crate::history_tree::GroundTruth, String> {
        let depth = self.virtual_rounds.len();
        build_ground_truth(&self.trace(depth), &self.inputs, depth).map_err(|e| e.to_string())
    }

    pub fn inputs(&self) -> &[InputLabel] {
        &self.inputs
    }
}

impl Monitor for InvariantMonitor {
    fn on_virtual_round(
        &mut self,
        real_round: u64,
        topology: &RoundTopology,
        states: &[&ProcessState],
        events: &[(usize, Event)],
    ) {
        self.check_agreement(real_round, states);
        for s in states {
            if s.diam_estimate > 4 * self.n as u64 {
                self.fail(DIAM_BOUND, real_round, format!("estimate {} exceeds 4n", s.diam_estimate));
            }
        }
        for (_, e) in events.iter().filter(|(p, _)| *p == 0) {
            match e {
                Event::LevelBegun { .. } => self.on_level_begun(topology, states, events),
                Event::LevelFinalized { level } => self.on_level_finalized(real_round, *level, states[0]),
                Event::ResetApplied { level, .. } => {
                    self.resets += 1;
                    if self.resets as f64 > reset_bound(self.n) {
                        self.fail(RESET_BOUND, real_round, format!("{} resets", self.resets));
                    }
                    self.virtual_rounds.truncate((*level as usize).saturating_sub(1));
                    self.begin = None;
                }
                Event::CountAttempt { level, result } => match result {
                    Ok(CountResult::Count(c)) => {
                        if *c != self.n as u64 {
                            self.fail(COUNT_SOUNDNESS, real_round, format!("counted {c} at level {level}"));
                        }
                        self.count_level.get_or_insert(*level);
                    }
                    Ok(CountResult::Inputs(got)) => {
                        let mut want: BTreeMap<InputLabel, u64> = BTreeMap::new();
                        for &label in &self.inputs {
                            *want.entry(label).or_insert(0) += 1;
                        }
                        if *got != want.into_iter().collect::<Vec<_>>() {
                            self.fail(COUNT_SOUNDNESS, real_round, format!("wrong input multiset at level {level}"));
                        }
                        self.count_level.get_or_insert(*level);
                    }
                    Ok(CountResult::Unknown) => {}
                    Err(e) => self.fail(COUNT_SOUNDNESS, real_round, format!("malformed view at level {level}: {e}")),
                },
                _ => {}
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Experiments

pub const CSV_HEADER: [&str; 12] = [
    "n",
    "seed",
    "scheduler",
    "mode",
    "rounds",
    "resets",
    "max_diam_estimate",
    "distinct_red_edges",
    "max_msg_bits",
    "max_param",
    "output",
    "correct",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentRow {
    pub n: usize,
    pub seed: u64,
    pub scheduler: String,
    pub mode: String,
    pub rounds: u64,
    pub resets: u64,
    pub max_diam_estimate: u64,
    pub distinct_red_edges: usize,
    pub max_msg_bits: usize,
    pub max_param: u64,
    pub output: String,
    pub correct: bool,
}

impl ExperimentRow {
    pub fn record(&self) -> [String; 12] {
        [
            self.n.to_string(),
            self.seed.to_string(),
            self.scheduler.clone(),
            self.mode.clone(),
            self.rounds.to_string(),
            self.resets.to_string(),
            self.max_diam_estimate.to_string(),
            self.distinct_red_edges.to_string(),
            self.max_msg_bits.to_string(),
            self.max_param.to_string(),
            self.output.clone(),
            self.correct.to_string(),
        ]
    }
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Basic => "basic",
        Mode::Simultaneous => "simultaneous",
        Mode::Generalized => "generalized",
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub row: ExperimentRow,
    pub report: RunReport,
    /// Empty when the run was not monitored.
    pub violations: Vec<Violation>,
    pub count_level: Option<u64>,
    pub max_red_edges: usize,
    pub virtual_rounds: Vec<RoundTopology>,
    pub inputs: Vec<InputLabel>,
}

impl ExperimentResult {
    pub fn passed(&self) -> bool {
        self.row.correct && self.violations.is_empty()
    }
}

pub fn run_experiment(config: &RunConfig, check: bool) -> Result<ExperimentResult, EngineError> {
    let scheduler = make_scheduler(&config.scheduler, config.n, config.seed)?;
    run_experiment_with(config, scheduler, check)
}

/// Runs one experiment against an explicit scheduler.
pub fn run_experiment_with(
    config: &RunConfig,
    scheduler: Box<dyn Scheduler>,
    check: bool,
) -> Result<ExperimentResult, EngineError> {
    if config.mode == Mode::Generalized && config.inputs.len() != config.n {
        return Err(EngineError::InputCount { have: config.inputs.len(), want: config.n });
    }
    let mut monitor = InvariantMonitor::new(config);
    let report = if check {
        run_with_scheduler(config, scheduler, &mut monitor)?
    } else {
        run_with_scheduler(config, scheduler, &mut crate::engine::NoMonitor)?
    };
    let expected = expected_output(config);
    let correct = match config.mode {
        Mode::Simultaneous => {
            report.outputs.iter().all(|o| o.as_ref() == Some(&expected))
                && report.output_rounds.windows(2).all(|w| w[0] == w[1])
        }
        _ => report.leader_output() == Some(&expected),
    };
    let m = &report.metrics;
    if check {
        let last = m.rounds;
        if report.outcome != Outcome::Terminated {
            monitor.fail(TERMINATION, last, format!("no output within {} rounds", config.budget));
        }
        let t = config.scheduler.block_length() as u64;
        let bound = t * round_bound(config.n);
        if m.rounds > bound {
            monitor.fail(ROUND_BOUND, last, format!("{} rounds, bound {bound}", m.rounds));
        }
        if m.max_msg_bits > message_bit_bound(m.max_param) || m.max_param > param_bound(config.n) {
            let detail = format!("{} bits, largest parameter {}", m.max_msg_bits, m.max_param);
            monitor.fail(MESSAGE_SIZE, last, detail);
        }
        match monitor.count_level {
            Some(level) if level > 3 * config.n as u64 => {
                monitor.fail(COUNT_COMPLETENESS, last, format!("first count at level {level}"));
            }
            None if report.outcome == Outcome::Terminated => {
                monitor.fail(COUNT_COMPLETENESS, last, "terminated without a count".into());
            }
            None if report.states[0].vht.depth() >= 3 * config.n as i64 => {
                let detail = format!("no count with {} levels built", report.states[0].vht.depth());
                monitor.fail(COUNT_COMPLETENESS, last, detail);
            }
            _ => {}
        }
    }
    let output = match config.mode {
        Mode::Simultaneous => report.outputs.iter().flatten().next(),
        _ => report.leader_output(),
    }
    .map_or_else(|| "timeout".to_string(), |o| o.to_string());
    let row = ExperimentRow {
        n: config.n,
        seed: config.seed,
        scheduler: config.scheduler.name(),
        mode: mode_name(config.mode).to_string(),
        rounds: m.rounds,
        resets: m.resets,
        max_diam_estimate: m.max_diam_estimate,
        distinct_red_edges: m.distinct_red_edges,
        max_msg_bits: m.max_msg_bits,
        max_param: m.max_param,
        output,
        correct,
    };
    Ok(ExperimentResult {
        row,
        report,
        violations: monitor.violations,
        count_level: monitor.count_level,
        max_red_edges: monitor.max_red_edges,
        virtual_rounds: monitor.virtual_rounds,
        inputs: monitor.inputs,
    })
}

/// Configurations of the full invariant suite up to `max_n` processes:
/// static star and path, `seeds` random-connected runs, star/path
/// alternation, permuted paths and a path-then-star fault schedule in basic
/// mode; simultaneous, generalized and T-union runs for `n <= 8`.
pub fn suite_configs(max_n: usize, seeds: u64) -> Vec<RunConfig> {
    use crate::engine::{GraphKind, SchedulerSpec};
    let mut out = Vec::new();
    for n in 1..=max_n {
        out.push(RunConfig::new(n, SchedulerSpec::Static(GraphKind::Star)));
        out.push(RunConfig::new(n, SchedulerSpec::Static(GraphKind::Path)));
        out.push(RunConfig::new(n, SchedulerSpec::Alternating(vec![GraphKind::Star, GraphKind::Path])));
        out.push(RunConfig::new(n, SchedulerSpec::PathThenStar { switch: 8 * n as u64 }));
        for seed in 0..seeds {
            out.push(RunConfig::new(n, SchedulerSpec::RandomConnected).seed(seed));
            out.push(RunConfig::new(n, SchedulerSpec::PermutedPath).seed(seed));
        }
    }
    for n in 1..=max_n.min(8) {
        out.push(RunConfig::new(n, SchedulerSpec::RandomConnected).mode(Mode::Simultaneous).seed(n as u64));
        let inputs = (0..n as u64).map(|p| (p * 7 + 3) % 3).collect();
        out.push(RunConfig::new(n, SchedulerSpec::RandomConnected).mode(Mode::Generalized).inputs(inputs));
        for t in [2, 3] {
            out.push(RunConfig::new(n, SchedulerSpec::TUnion { t }).seed(n as u64));
        }
    }
    out
}

/// Runs every configuration in parallel; results keep the input order.
pub fn sweep(configs: &[RunConfig], check: bool) -> Result<Vec<ExperimentResult>, EngineError> {
    configs.par_iter().map(|c| run_experiment(c, check)).collect()
}

pub fn write_csv<W: Write>(rows: &[ExperimentRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// View audits

#[derive(Clone, Debug, Default)]
pub struct ViewAudit {
    pub views: usize,
    /// Views on which the count came back as a number.
    pub numeric: usize,
    pub failures: Vec<String>,
}

impl ViewAudit {
    pub fn merge(&mut self, other: ViewAudit) {
        self.views += other.views;
        self.numeric += other.numeric;
        self.failures.extend(other.failures);
    }
}

/// Runs the counting inference on the leader's view of every prefix of the
/// ideal history tree of `virtual_rounds` and compares each inferred bound
/// with the true anonymities.
pub fn audit_prefix_views(virtual_rounds: &[RoundTopology], inputs: &[InputLabel], mode: CountMode) -> ViewAudit {
    let n = inputs.len();
    let mut audit = ViewAudit::default();
    let full = Trace::new(n, 1, virtual_rounds.to_vec());
    let Ok(gt) = build_ground_truth(&full, inputs, virtual_rounds.len()) else {
        audit.failures.push("ground truth could not be built".into());
        return audit;
    };
    let mut numeric_since: Option<usize> = None;
    for depth in 0..=virtual_rounds.len() {
        // Levels above `depth` never influence a view taken at `depth`.
        let view = match extract_view(&gt.tree, gt.node_of(depth, 0)) {
            Ok(v) => v,
            Err(e) => {
                audit.failures.push(format!("depth {depth}: {e}"));
                continue;
            }
        };
        audit.views += 1;
        let state = match infer_anonymities(&view) {
            Ok(s) => s,
            Err(e) => {
                audit.failures.push(format!("depth {depth}: {e}"));
                continue;
            }
        };
        for (i, &o) in view.origin.iter().enumerate() {
            let a = gt.anonymity[o];
            if state.lb[i] > a || state.ub[i].is_some_and(|u| u < a) {
                audit.failures.push(format!(
                    "depth {depth}: node {o} has {a} processes, inferred {:?}",
                    (state.lb[i], state.ub[i])
                ));
            }
            if state.complete[i] && gt.tree.node(o).children.iter().any(|c| !view.origin.contains(c)) {
                audit.failures.push(format!("depth {depth}: node {o} marked complete with hidden children"));
            }
        }
        let result = result_from_state(&state, &view, mode);
        let numeric = match &result {
            CountResult::Unknown => false,
            CountResult::Count(c) => {
                if *c != n as u64 {
                    audit.failures.push(format!("depth {depth}: counted {c}, true size {n}"));
                }
                true
            }
            CountResult::Inputs(got) => {
                let want: Vec<(InputLabel, u64)> = gt
                    .tree
                    .level(0)
                    .iter()
                    .map(|&v| (gt.tree.node(v).input.expect("level-0 label"), gt.anonymity[v]))
                    .collect();
                let mut want = want;
                want.sort();
                if *got != want {
                    audit.failures.push(format!("depth {depth}: inputs {got:?}, expected {want:?}"));
                }
                true
            }
        };
        if numeric {
            audit.numeric += 1;
            numeric_since.get_or_insert(depth);
        } else if let Some(d) = numeric_since {
            audit.failures.push(format!("depth {depth}: unknown after a count at depth {d}"));
        }
    }
    audit
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{GraphKind, SchedulerSpec};

    fn checked(config: RunConfig) -> ExperimentResult {
        let r = run_experiment(&config, true).unwrap();
        assert!(r.passed(), "{:?}", r.violations);
        r
    }

    #[test]
    fn virtual_rounds_keep_classes_closed_and_connected() {
        let r = checked(RunConfig::new(6, SchedulerSpec::RandomConnected).seed(2));
        let inputs = r.inputs.clone();
        assert!(!r.virtual_rounds.is_empty());
        for (k, net) in r.virtual_rounds.iter().enumerate() {
            assert!(net.is_connected(), "N_{} disconnected", k + 1);
            let trace = Trace::new(6, 1, r.virtual_rounds[..k].to_vec());
            let gt = build_ground_truth(&trace, &inputs, k).unwrap();
            let class: Vec<usize> = (0..6).map(|p| gt.node_of(k, p)).collect();
            let mut own = [0u64; 6];
            let mut pairs = BTreeSet::new();
            for (&(i, j), &m) in &net.links {
                if class[i] == class[j] {
                    own[i] += m;
                    if i != j {
                        own[j] += m;
                    }
                } else {
                    pairs.insert((class[i].min(class[j]), class[i].max(class[j])));
                }
            }
            assert!(own.iter().all(|&c| c == 2), "round {}: {own:?}", k + 1);
            let classes: BTreeSet<usize> = class.iter().copied().collect();
            assert_eq!(pairs.len() + 1, classes.len(), "class links of N_{} are not a tree", k + 1);
        }
    }

    #[test]
    fn monitored_schedulers_pass() {
        for spec in [
            SchedulerSpec::Static(GraphKind::Star),
            SchedulerSpec::Static(GraphKind::Path),
            SchedulerSpec::PermutedPath,
            SchedulerSpec::Alternating(vec![GraphKind::Star, GraphKind::Path]),
        ] {
            let r = checked(RunConfig::new(5, spec));
            assert!(r.count_level.unwrap() <= 15);
            assert!(r.max_red_edges <= red_edge_bound(5, 15));
        }
    }

    #[test]
    fn extension_modes_pass() {
        checked(RunConfig::new(4, SchedulerSpec::RandomConnected).mode(Mode::Simultaneous));
        let r = checked(
            RunConfig::new(5, SchedulerSpec::RandomConnected).mode(Mode::Generalized).inputs(vec![0, 3, 3, 9, 3]),
        );
        assert_eq!(r.report.leader_output(), Some(&Output::Inputs(vec![(3, 3), (9, 1)])));
        checked(RunConfig::new(4, SchedulerSpec::TUnion { t: 2 }));
    }

    #[test]
    fn prefix_views_are_sound() {
        let r = checked(RunConfig::new(5, SchedulerSpec::Static(GraphKind::Path)));
        let audit = audit_prefix_views(&r.virtual_rounds, &r.inputs, CountMode::Basic);
        assert!(audit.failures.is_empty(), "{:?}", audit.failures);
        assert_eq!(audit.views, r.virtual_rounds.len() + 1);
        assert!(audit.numeric > 0);
    }

    #[test]
    fn unmonitored_runs_still_report_correctness() {
        let r = run_experiment(&RunConfig::new(3, SchedulerSpec::Static(GraphKind::Star)), false).unwrap();
        assert!(r.row.correct && r.violations.is_empty());
    }

    #[test]
    fn ring_gap_is_reported() {
        let config = RunConfig::new(4, SchedulerSpec::Static(GraphKind::Ring)).budget(3000);
        let r = run_experiment(&config, true).unwrap();
        assert!(!r.passed());
        let names: Vec<&str> = r.violations.iter().map(|v| v.check).collect();
        assert!(names.contains(&TERMINATION) && names.contains(&COUNT_COMPLETENESS), "{names:?}");
    }

    #[test]
    fn bounds() {
        assert_eq!(reset_bound(8), 6.0);
        assert_eq!(red_edge_bound(3, 9), 72);
        assert_eq!(param_bound(2), 1024);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = run_experiment(&RunConfig::new(2, SchedulerSpec::Static(GraphKind::Path)), false).unwrap();
        let mut buf = Vec::new();
        write_csv(&[r.row.clone(), r.row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert!(lines[1].starts_with("2,0,path,basic,"));
    }
}
