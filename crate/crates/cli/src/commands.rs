use std::error::Error;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Subcommand, ValueEnum};

use edgeclock::checker::{build_causal_order, check_liveness, check_safety, classify_stalls};
use edgeclock::reduction::{IncidenceSystem, ReductionBasis};
use edgeclock::sim::{run_mode, Mode, Scenario, Trace, DEFAULT_STEP_CAP};

type CmdResult = Result<ExitCode, Box<dyn Error>>;

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
pub enum ModeArg {
    Edge,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Edge => Mode::Edge,
            ModeArg::Baseline => Mode::Baseline,
        }
    }
}

#[derive(Args)]
pub struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Seed for per-channel delay streams; overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Protocol override; defaults to the scenario's mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Directory for trace.txt and metrics.txt.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Abort a run after this many events.
    #[arg(long, default_value_t = DEFAULT_STEP_CAP)]
    step_cap: u64,
}

#[derive(Subcommand)]
pub enum Command {
    /// Print the share graph, augmented edges, and per-replica/per-client
    /// clock sizes, including the reduced basis and its coefficients.
    Analyze {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Simulate a scenario deterministically and write trace and metrics.
    Run(RunArgs),
    /// Verify a trace file against its scenario: causal safety, liveness,
    /// and stall classification. Exits nonzero when violations exist.
    Check {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Run both protocols on identical per-channel delay draws and print a
    /// side-by-side stall and message table.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_STEP_CAP)]
        step_cap: u64,
    },
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> CmdResult {
    match cmd {
        Command::Analyze { scenario } => analyze(&scenario, out),
        Command::Run(args) => run_cmd(&args, out),
        Command::Check { scenario, trace } => check_cmd(&scenario, &trace, out),
        Command::Compare {
            scenario,
            seed,
            step_cap,
        } => compare_cmd(&scenario, seed, step_cap, out),
    }
}

fn load_scenario(path: &Path) -> Result<Scenario, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("reading {}: {e}", path.display()))?;
    Ok(Scenario::parse(&text)?)
}

fn effective_seed(sc: &Scenario, cli_seed: Option<u64>) -> u64 {
    cli_seed.unwrap_or(sc.network.seed)
}

fn analyze(path: &Path, out: &mut dyn Write) -> CmdResult {
    let sc = load_scenario(path)?;
    let topo = &sc.topology;
    writeln!(out, "share graph")?;
    for (edge, vars) in topo.share.edges() {
        let names: Vec<String> = vars.iter().map(|v| v.to_string()).collect();
        writeln!(out, "  {edge} {{{}}}", names.join(","))?;
    }
    let augmented_only = topo.augmented.augmented_only();
    writeln!(out, "augmented-only edges")?;
    if augmented_only.is_empty() {
        writeln!(out, "  (none)")?;
    }
    for edge in augmented_only {
        writeln!(out, "  {edge}")?;
    }
    writeln!(out, "replica |E_i| |basis_i| edges")?;
    for (replica, edges) in topo.replica_edges.iter() {
        let sys = IncidenceSystem::build(&topo.share, &topo.replica_edges, replica);
        let basis = ReductionBasis::compute(&sys);
        let rendered: Vec<String> = edges.directed.iter().map(|e| e.to_string()).collect();
        writeln!(
            out,
            "  {replica} {} {} [{}]",
            edges.directed.len(),
            basis.reduced_len(),
            rendered.join(",")
        )?;
    }
    writeln!(out, "client |C_p| edges")?;
    for (client, edges) in topo.client_edges.iter() {
        let rendered: Vec<String> = edges.iter().map(|e| e.to_string()).collect();
        writeln!(out, "  {client} {} [{}]", edges.len(), rendered.join(","))?;
    }
    writeln!(out, "reduction coefficients (dropped counter = sum of basis counters)")?;
    let mut any = false;
    for (replica, _) in topo.replica_edges.iter() {
        let sys = IncidenceSystem::build(&topo.share, &topo.replica_edges, replica);
        let basis = ReductionBasis::compute(&sys);
        for (edge, equation) in basis.equations() {
            writeln!(out, "  at {replica}: ts[{edge}] = {equation}")?;
            any = true;
        }
    }
    if !any {
        writeln!(out, "  (all counters independent)")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_cmd(args: &RunArgs, out: &mut dyn Write) -> CmdResult {
    let sc = load_scenario(&args.scenario)?;
    let seed = effective_seed(&sc, args.seed);
    let mode = args.mode.map(Mode::from).unwrap_or(sc.mode);
    let (trace, metrics) = run_mode(&sc, seed, mode, args.step_cap);
    fs::create_dir_all(&args.out)?;
    let trace_path = args.out.join("trace.txt");
    let metrics_path = args.out.join("metrics.txt");
    fs::write(&trace_path, trace.render())?;
    fs::write(&metrics_path, metrics.render())?;
    writeln!(
        out,
        "mode={} seed={seed} events={} quiescent={} stalls={}",
        mode.name(),
        trace.events.len(),
        trace.quiescent,
        metrics.stall_count
    )?;
    writeln!(out, "wrote {}", trace_path.display())?;
    writeln!(out, "wrote {}", metrics_path.display())?;
    if !trace.quiescent {
        writeln!(out, "warning: run did not reach quiescence")?;
    }
    Ok(ExitCode::SUCCESS)
}

fn check_cmd(scenario: &Path, trace_path: &Path, out: &mut dyn Write) -> CmdResult {
    let sc = load_scenario(scenario)?;
    let text = fs::read_to_string(trace_path)
        .map_err(|e| format!("reading {}: {e}", trace_path.display()))?;
    let trace = Trace::parse(&text)?;
    let order = build_causal_order(&trace)?;
    let mut violations = check_safety(&trace, &order, &sc.topology.assign);
    violations.extend(check_liveness(&trace, &sc.topology.assign));
    let (true_stalls, false_stalls) = classify_stalls(&trace, &order, &sc.topology.assign);
    writeln!(
        out,
        "events={} quiescent={} true_stalls={true_stalls} false_stalls={false_stalls}",
        trace.events.len(),
        trace.quiescent
    )?;
    for v in &violations {
        writeln!(out, "{v}")?;
    }
    if violations.is_empty() {
        writeln!(out, "ok: no violations")?;
        Ok(ExitCode::SUCCESS)
    } else {
        writeln!(out, "{} violation(s)", violations.len())?;
        Ok(ExitCode::FAILURE)
    }
}

fn compare_cmd(
    scenario: &Path,
    seed: Option<u64>,
    step_cap: u64,
    out: &mut dyn Write,
) -> CmdResult {
    let sc = load_scenario(scenario)?;
    let seed = effective_seed(&sc, seed);
    writeln!(
        out,
        "# both runs draw delays from the same per-channel streams (seed {seed})"
    )?;
    let (edge_trace, edge_metrics) = run_mode(&sc, seed, Mode::Edge, step_cap);
    let (base_trace, base_metrics) = run_mode(&sc, seed, Mode::Baseline, step_cap);
    let edge_order = build_causal_order(&edge_trace)?;
    let base_order = build_causal_order(&base_trace)?;
    let (edge_true, edge_false) = classify_stalls(&edge_trace, &edge_order, &sc.topology.assign);
    let (base_true, base_false) = classify_stalls(&base_trace, &base_order, &sc.topology.assign);
    writeln!(out, "metric edge baseline")?;
    writeln!(
        out,
        "stalls {} {}",
        edge_metrics.stall_count, base_metrics.stall_count
    )?;
    writeln!(out, "true_stalls {edge_true} {base_true}")?;
    writeln!(out, "false_stalls {edge_false} {base_false}")?;
    writeln!(
        out,
        "stall_duration {} {}",
        edge_metrics.total_stall_duration, base_metrics.total_stall_duration
    )?;
    writeln!(
        out,
        "events {} {}",
        edge_trace.events.len(),
        base_trace.events.len()
    )?;
    writeln!(
        out,
        "quiescent {} {}",
        edge_trace.quiescent, base_trace.quiescent
    )?;
    let edge_gossip = edge_metrics.message_counts.get("GossipSend").copied().unwrap_or(0);
    let base_gossip = base_metrics.message_counts.get("GossipSend").copied().unwrap_or(0);
    writeln!(out, "gossip_messages {edge_gossip} {base_gossip}")?;
    Ok(ExitCode::SUCCESS)
}
