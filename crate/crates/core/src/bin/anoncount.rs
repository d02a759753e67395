use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use anoncount::counting::CountMode;
use anoncount::engine::{make_scheduler, RunConfig, SchedulerSpec, Trace};
use anoncount::harness::{
    audit_prefix_views, run_experiment, suite_configs, sweep, write_csv, ExperimentResult, ViewAudit,
};
use anoncount::protocol::Mode;

#[derive(Parser)]
#[command(name = "anoncount", version, about = "Counting in congested anonymous dynamic networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its outcome.
    Run(RunArgs),
    /// Run a range of sizes and seeds and write one CSV row per run.
    Sweep(SweepArgs),
    /// Run the full invariant suite.
    Verify(VerifyArgs),
    /// Write or read topology traces.
    #[command(subcommand)]
    Trace(TraceCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Basic,
    Simultaneous,
    Generalized,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Basic => Mode::Basic,
            ModeArg::Simultaneous => Mode::Simultaneous,
            ModeArg::Generalized => Mode::Generalized,
        }
    }
}

#[derive(Args, Clone)]
struct SchedulerArgs {
    /// star, path, ring, complete, random-connected, permuted-path,
    /// alternating:G+G..., t-union[:T], path-then-star:K, or replay:FILE.
    #[arg(long, default_value = "random-connected")]
    scheduler: String,
    /// Block length for `t-union` without an explicit `:T`.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    t: u64,
    #[arg(long, value_enum, default_value = "basic")]
    mode: ModeArg,
    /// Comma-separated inputs for generalized mode, one per process (the
    /// leader's entry is ignored). Defaults to `p mod 3`.
    #[arg(long, value_delimiter = ',')]
    inputs: Option<Vec<u64>>,
    /// Real-round budget; defaults to twice the round bound.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    budget: Option<u64>,
    /// Skip the invariant monitor.
    #[arg(long)]
    no_check: bool,
}

impl SchedulerArgs {
    fn spec(&self) -> Result<SchedulerSpec, String> {
        if let Some(path) = self.scheduler.strip_prefix("replay:") {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            return Trace::from_text(&text).map(SchedulerSpec::Replay).map_err(|e| e.to_string());
        }
        if self.scheduler == "t-union" {
            return Ok(SchedulerSpec::TUnion { t: self.t as usize });
        }
        self.scheduler.parse().map_err(|e: anoncount::engine::EngineError| e.to_string())
    }

    fn config(&self, n: usize, seed: u64) -> Result<RunConfig, String> {
        let mut config = RunConfig::new(n, self.spec()?).seed(seed).mode(self.mode.into());
        if let Some(b) = self.budget {
            config = config.budget(b);
        }
        if config.mode == Mode::Generalized {
            let inputs = match &self.inputs {
                Some(v) if v.len() != n => return Err(format!("--inputs has {} entries, need {n}", v.len())),
                Some(v) => v.clone(),
                None => (0..n as u64).map(|p| p % 3).collect(),
            };
            config = config.inputs(inputs);
        }
        Ok(config)
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    sched: SchedulerArgs,
    /// Also write the topology trace of the run to this file.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    n_min: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_max: u64,
    /// Seeds 0..seeds for every size.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    seeds: u64,
    #[command(flatten)]
    sched: SchedulerArgs,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    max_n: u64,
    /// Random seeds per size for the randomized schedulers.
    #[arg(long, default_value_t = 2)]
    seeds: u64,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Generate rounds from a scheduler and write them as a trace file.
    Dump {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value = "random-connected")]
        scheduler: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        rounds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse a trace file and report its shape and connectivity.
    Load { path: PathBuf },
}

fn print_result(r: &ExperimentResult) {
    let m = &r.report.metrics;
    println!("output {}", r.row.output);
    println!("correct {}", r.row.correct);
    println!(
        "rounds {}  resets {}  max_diam_estimate {}  distinct_red_edges {}  max_msg_bits {}  max_param {}",
        m.rounds, m.resets, m.max_diam_estimate, m.distinct_red_edges, m.max_msg_bits, m.max_param
    );
    if let Some(level) = r.count_level {
        println!("count_level {level}");
    }
    for v in &r.violations {
        println!("FAIL {v}");
    }
}

fn cmd_run(args: RunArgs) -> Result<bool, String> {
    let mut config = args.sched.config(args.n as usize, args.seed)?;
    config = config.record_trace(args.trace_out.is_some());
    let r = run_experiment(&config, !args.sched.no_check).map_err(|e| e.to_string())?;
    print_result(&r);
    if let (Some(path), Some(trace)) = (&args.trace_out, &r.report.trace) {
        std::fs::write(path, trace.to_text()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(r.passed())
}

fn cmd_sweep(args: SweepArgs) -> Result<bool, String> {
    if args.n_min > args.n_max {
        return Err("--n-min exceeds --n-max".into());
    }
    let mut configs = Vec::new();
    for n in args.n_min..=args.n_max {
        for seed in 0..args.seeds {
            configs.push(args.sched.config(n as usize, seed)?);
        }
    }
    let results = sweep(&configs, !args.sched.no_check).map_err(|e| e.to_string())?;
    let rows: Vec<_> = results.iter().map(|r| r.row.clone()).collect();
    let written = match &args.out {
        Some(path) => {
            File::create(path).map_err(|e| e.to_string()).and_then(|f| write_csv(&rows, f).map_err(|e| e.to_string()))
        }
        None => write_csv(&rows, io::stdout().lock()).map_err(|e| e.to_string()),
    };
    written?;
    for (c, r) in configs.iter().zip(&results) {
        for v in &r.violations {
            eprintln!("n {} seed {}: FAIL {v}", c.n, c.seed);
        }
    }
    Ok(results.iter().all(ExperimentResult::passed))
}

fn cmd_verify(args: VerifyArgs) -> Result<bool, String> {
    let configs = suite_configs(args.max_n as usize, args.seeds);
    let results = sweep(&configs, true).map_err(|e| e.to_string())?;
    let mut audit = ViewAudit::default();
    let mut ok = true;
    for (c, r) in configs.iter().zip(&results) {
        let mode = if c.mode == Mode::Generalized { CountMode::Generalized } else { CountMode::Basic };
        audit.merge(audit_prefix_views(&r.virtual_rounds, &r.inputs, mode));
        if !r.passed() {
            ok = false;
            println!("FAIL n {} seed {} {} {}: output {}", c.n, c.seed, c.scheduler.name(), r.row.mode, r.row.output);
            for v in &r.violations {
                println!("  {v}");
            }
        }
    }
    for f in &audit.failures {
        println!("FAIL view audit: {f}");
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    println!("runs {passed}/{} passed", results.len());
    println!("views {} audited, {} counted, {} unsound", audit.views, audit.numeric, audit.failures.len());
    Ok(ok && audit.failures.is_empty())
}

fn cmd_trace(cmd: TraceCommand) -> Result<bool, String> {
    match cmd {
        TraceCommand::Dump { n, scheduler, seed, rounds, out } => {
            let spec: SchedulerSpec = scheduler.parse().map_err(|e: anoncount::engine::EngineError| e.to_string())?;
            let mut s = make_scheduler(&spec, n as usize, seed).map_err(|e| e.to_string())?;
            let mut topologies = Vec::with_capacity(rounds);
            for _ in 0..rounds {
                topologies.push(s.next_round().map_err(|e| e.to_string())?);
            }
            let text = Trace::new(n as usize, spec.block_length(), topologies).to_text();
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))?,
                None => io::stdout().write_all(text.as_bytes()).map_err(|e| e.to_string())?,
            }
            Ok(true)
        }
        TraceCommand::Load { path } => {
            let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let trace = Trace::from_text(&text).map_err(|e| e.to_string())?;
            let connected = trace.is_t_union_connected(trace.t.max(1));
            println!("n {} T {} rounds {}", trace.n, trace.t, trace.rounds.len());
            println!("t-union-connected {connected}");
            Ok(connected)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Trace(c) => cmd_trace(c),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
