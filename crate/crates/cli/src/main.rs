use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qkdnet::netgraph::{self, link_budget, required_links, BudgetPath, MeshKind, Topology};
use qkdnet::scenario::{self, Action, MetricsReport, OutputFormat, RunError, Scenario};

/// Exit status for a scenario or topology that fails validation.
const EXIT_INVALID: u8 = 1;
/// Exit status for a run that broke a runtime invariant.
const EXIT_INVARIANT: u8 = 2;

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "Simulate trusted-relay QKD networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its metrics.
    Run(RunArgs),
    /// Re-check the invariants of an emitted records file.
    Verify {
        /// A records.jsonl written by `run --format records`.
        records: PathBuf,
    },
    /// List the built-in topologies, or print one as TOML.
    Presets { name: Option<String> },
    /// Optical loss of links and switch paths.
    Budget(BudgetArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    /// Run a preset topology with every link started at t = 0.
    #[arg(long)]
    preset: Option<String>,
    /// Simulated seconds when running a preset.
    #[arg(long, default_value_t = 60.0, requires = "preset")]
    duration: f64,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Records,
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, default_value = "cambridge", conflicts_with = "topology")]
    preset: String,
    /// Topology file instead of a preset.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// A single link; all links when omitted.
    #[arg(long)]
    link: Option<String>,
    /// Switch path from `--tx` to `--rx`, configured as a link or not.
    #[arg(long, requires_all = ["tx", "rx"])]
    switch: Option<String>,
    #[arg(long)]
    tx: Option<String>,
    #[arg(long)]
    rx: Option<String>,
    /// Also compare link counts for this many enclaves.
    #[arg(long)]
    enclaves: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_INVALID)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Verify { records } => cmd_verify(&records),
        Command::Presets { name } => cmd_presets(name.as_deref()),
        Command::Budget(a) => cmd_budget(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

type Failure = (u8, String);

fn invalid(e: impl ToString) -> Failure {
    (EXIT_INVALID, e.to_string())
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let mut sc = match (&a.scenario, &a.preset) {
        (Some(path), _) => Scenario::from_file(path).map_err(invalid)?,
        (None, Some(name)) => {
            let topo = netgraph::preset(name).map_err(invalid)?;
            let mut sc = Scenario::new(topo, a.duration, 0).at(0.0, Action::StartQkd { tx: None, rx: None });
            sc.name = format!("{name}-all-links");
            sc
        }
        (None, None) => return Err(invalid("give --scenario <file> or --preset <name>")),
    };
    if let Some(seed) = a.seed {
        sc.seed = seed;
    }
    let report = match scenario::run(&sc) {
        Ok(r) => r,
        Err(e @ RunError::Invalid(_)) => return Err(invalid(e)),
        Err(e @ RunError::Invariant(_)) => return Err((EXIT_INVARIANT, e.to_string())),
    };
    let format = match a.format {
        Format::Csv => OutputFormat::Csv,
        Format::Records => OutputFormat::Records,
    };
    let files = scenario::emit(&report, format, &a.out).map_err(invalid)?;
    print_summary(&report);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn print_summary(r: &MetricsReport) {
    if let Some(h) = &r.header {
        println!(
            "{} on {} ({} s, seed {})",
            if h.scenario.is_empty() { "scenario" } else { &h.scenario },
            h.topology,
            h.duration_s,
            h.seed
        );
    }
    println!("{:<14} {:>12} {:>8} {:>12}", "link", "sifted bits", "QBER", "secret b/s");
    for l in r.links.iter().filter(|l| l.frames > 0) {
        let q = l.mean_qber.map_or("-".to_owned(), |q| format!("{:.4}", q));
        println!(
            "{:<14} {:>12} {:>8} {:>12.1}",
            l.link_id.as_str(),
            l.sifted_bits,
            q,
            l.secret_bps
        );
    }
    if !r.relays.is_empty() {
        let delivered = r
            .relays
            .iter()
            .filter(|s| s.status == qkdnet::keyrelay::SessionStatus::Delivered)
            .count();
        println!("relay sessions: {delivered}/{} delivered", r.relays.len());
    }
    for t in &r.health {
        println!(
            "{:>10.3} s  {} {:?} -> {:?} ({})",
            t.time.as_secs(),
            t.link,
            t.from,
            t.to,
            t.cause
        );
    }
}

fn cmd_verify(path: &Path) -> Result<(), Failure> {
    let report = scenario::load_records(path).map_err(invalid)?;
    match scenario::verify_report(&report) {
        Ok(s) => {
            println!(
                "ok: {} audit records over {} streams, {} blocks, {} switch events, {} delivered relays",
                s.audit_records, s.streams, s.blocks, s.switch_events, s.delivered_relays
            );
            Ok(())
        }
        Err(errors) => {
            for e in &errors {
                eprintln!("violation: {e}");
            }
            Err((EXIT_INVARIANT, format!("{} invariant violation(s)", errors.len())))
        }
    }
}

fn cmd_presets(name: Option<&str>) -> Result<(), Failure> {
    match name {
        None => {
            for n in netgraph::preset_names() {
                let t = netgraph::preset(n).map_err(invalid)?;
                println!(
                    "{n:<10} {} nodes, {} links, {} switches",
                    t.nodes.len(),
                    t.links.len(),
                    t.switches.len()
                );
            }
        }
        Some(n) => print!(
            "{}",
            netgraph::preset_source(n).ok_or_else(|| invalid(format!("unknown preset `{n}`")))?
        ),
    }
    Ok(())
}

fn load(a: &BudgetArgs) -> Result<Topology, Failure> {
    match &a.topology {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            netgraph::load_topology(&text).map_err(invalid)
        }
        None => netgraph::preset(&a.preset).map_err(invalid),
    }
}

fn cmd_budget(a: BudgetArgs) -> Result<(), Failure> {
    let topo = load(&a)?;
    let paths: Vec<(String, BudgetPath)> = match (&a.link, &a.switch) {
        (Some(l), _) => vec![(l.clone(), BudgetPath::Link(l.as_str().into()))],
        (None, Some(s)) => {
            let (tx, rx) = (a.tx.clone().unwrap_or_default(), a.rx.clone().unwrap_or_default());
            vec![(
                format!("{tx}->{rx} via {s}"),
                BudgetPath::Switched {
                    switch: s.as_str().into(),
                    tx: tx.as_str().into(),
                    rx: rx.as_str().into(),
                },
            )]
        }
        (None, None) => topo
            .links
            .keys()
            .map(|l| (l.to_string(), BudgetPath::Link(l.clone())))
            .collect(),
    };
    for (label, path) in paths {
        let db = link_budget(&topo, &path).map_err(invalid)?;
        println!("{label:<24} {db:>8.3} dB");
    }
    if let Some(n) = a.enclaves {
        let mesh = required_links(n, MeshKind::FullMesh).map_err(invalid)?;
        let star = required_links(n, MeshKind::Star).map_err(invalid)?;
        println!("{n} enclaves: {mesh} links as a full mesh, {star} through a relay hub");
    }
    Ok(())
}
