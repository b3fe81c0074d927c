//! Command-line front end: graph partitioning, experiment runs, privacy
//! budget queries, consolidated reports, and synthetic fixture generation.
//!
//! Exit codes: 0 on success, 1 for runtime or data errors, 2 for usage
//! errors (bad flags or invalid argument values).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use feddep::error::{Error, Result};
use feddep::fed::{
    budget_to_text, comm_report, ledger_to_text, load_config, metrics_to_text, parse_budget,
    parse_config, parse_ledger, parse_metrics, run_training_on, ExperimentConfig, RunOutput,
};
use feddep::graph::{load_graph, louvain_partition, write_graph, GraphData};
use feddep::privacy::{feddep_budget, AccountantInput, DeltaMode, PrivacyBudget};
use feddep::synthetic::{synthetic_graph, SyntheticConfig};

#[derive(Parser)]
#[command(name = "feddep", version, about = "Subgraph federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition a graph into client subgraphs and report cut statistics.
    Partition(PartitionArgs),
    /// Run a federated experiment from a config file.
    Train(TrainArgs),
    /// Print the three-stage privacy budget trace for given parameters.
    Privacy(PrivacyArgs),
    /// Consolidate completed runs into a comparison table.
    Report(ReportArgs),
    /// Generate a synthetic community graph in the text format.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PartitionArgs {
    /// Input graph file.
    graph: PathBuf,
    /// Number of clients.
    #[arg(short, long)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for subgraph files and stats.
    #[arg(long, default_value = "partition_out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "run_out")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PrivacyArgs {
    /// Minimum retained degree D (flag mode).
    #[arg(short = 'D', long)]
    degree: Option<usize>,
    /// Sampling fanout d.
    #[arg(short = 'd', long, default_value_t = 5)]
    fanout: usize,
    /// Embedding depth L.
    #[arg(short = 'l', long, default_value_t = 2)]
    depth: usize,
    /// Training epochs N.
    #[arg(short = 'n', long, default_value_t = 50)]
    epochs: usize,
    /// Bernoulli rate r.
    #[arg(short = 'r', long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    delta_prime: f64,
    /// Reproduce the printed composed-delta formula instead of the
    /// standard one.
    #[arg(long)]
    strict_paper_delta: bool,
    /// Derive D from a graph + config instead of --degree.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding one or more completed run directories.
    run_dir: PathBuf,
    /// Where to write the machine-readable summary (defaults inside run_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output graph file.
    #[arg(long, default_value = "synthetic.graph")]
    out: PathBuf,
    #[arg(long, default_value_t = 90)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    communities: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition(args) => cmd_partition(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Privacy(args) => cmd_privacy(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Synth(args) => cmd_synth(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn cmd_partition(args: &PartitionArgs) -> Result<()> {
    let (g, report) = load_graph(&args.graph)?;
    let (subs, stats) = louvain_partition(&g, args.m, args.seed)?;
    fs::create_dir_all(&args.out)?;

    let mut table = format!(
        "{:<8} {:>8} {:>8}\n",
        "client", "nodes", "edges"
    );
    let mut stats_text = String::new();
    for (i, sub) in subs.iter().enumerate() {
        let path = args.out.join(format!("subgraph_{}.graph", i));
        fs::write(&path, write_graph(sub, g.num_classes(), g.feature_dim()))?;
        table.push_str(&format!(
            "{:<8} {:>8} {:>8}\n",
            i, stats.subgraph_nodes[i], stats.subgraph_edges[i]
        ));
        stats_text.push_str(&format!(
            "client={} nodes={} edges={}\n",
            i, stats.subgraph_nodes[i], stats.subgraph_edges[i]
        ));
    }
    stats_text.push_str(&format!(
        "cross_edges={} total_edges={} cross_edge_fraction={:.6}\n",
        stats.cross_edges,
        stats.total_edges,
        stats.cross_edge_fraction()
    ));
    fs::write(args.out.join("stats.txt"), &stats_text)?;

    println!(
        "loaded {} nodes, {} edges ({} duplicate edge lines ignored)",
        g.node_count(),
        g.edge_count(),
        report.duplicate_edges_dropped
    );
    print!("{}", table);
    println!(
        "cross edges: {} of {} ({:.4} of total)",
        stats.cross_edges,
        stats.total_edges,
        stats.cross_edge_fraction()
    );
    println!("wrote {} subgraph files to {}", subs.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let snapshot = fs::read_to_string(&args.config)?;
    let mut cfg = parse_config(&snapshot)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if cfg.dataset.is_empty() {
        return Err(Error::Argument("config is missing a dataset path".into()));
    }
    let (g, _) = load_graph(&cfg.dataset)?;
    fs::create_dir_all(&args.out)?;
    // auditability: the snapshot is the input file, byte for byte
    fs::write(args.out.join("config_snapshot.cfg"), &snapshot)?;

    let seeds: Vec<u64> = (0..cfg.repetitions as u64).map(|i| cfg.seed + i).collect();
    let mut manifest = String::new();
    manifest.push_str(&format!("config=config_snapshot.cfg\n"));
    manifest.push_str(&format!(
        "seeds={}\n",
        seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
    ));
    manifest.push_str(&format!("out_dir={}\n", args.out.display()));

    let mut final_accs = Vec::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let mut rep_cfg = cfg.clone();
        rep_cfg.seed = seed;
        let out: RunOutput = run_training_on(&g, &rep_cfg)?;
        let metrics_path = format!("metrics_rep{}.txt", i);
        let ledger_path = format!("ledger_rep{}.txt", i);
        let budget_path = format!("budget_rep{}.txt", i);
        fs::write(args.out.join(&metrics_path), metrics_to_text(&out.round_logs))?;
        fs::write(args.out.join(&ledger_path), ledger_to_text(&out.ledger))?;
        let budget_text = match (&out.budget, &out.budget_note) {
            (Some(b), _) => budget_to_text(b),
            (None, Some(note)) => format!("note={}\n", note),
            (None, None) => "note=no budget computed\n".to_string(),
        };
        fs::write(args.out.join(&budget_path), budget_text)?;
        manifest.push_str(&format!(
            "rep={} metrics={} ledger={} budget={}\n",
            i, metrics_path, ledger_path, budget_path
        ));
        println!(
            "rep {} (seed {}): val {:.4}  test {:.4}",
            i, seed, out.val_accuracy, out.test_accuracy
        );
        if i == 0 {
            print!("{}", comm_report(&out.ledger));
            if let Some(b) = &out.budget {
                println!("privacy: epsilon {:.4}, delta {:.3e}", b.epsilon, b.delta);
            }
        }
        final_accs.push(out.test_accuracy);
    }
    fs::write(args.out.join("manifest.txt"), &manifest)?;

    let (mean, std) = mean_std(&final_accs);
    let summary = format!(
        "variant={} repetitions={} mean_test_accuracy={:.6} std_test_accuracy={:.6}\n",
        cfg.variant.as_str(),
        cfg.repetitions,
        mean,
        std
    );
    fs::write(args.out.join("summary.txt"), &summary)?;
    println!(
        "{}: test accuracy {:.4} \u{00b1} {:.4} over {} repetition(s)",
        cfg.variant.as_str(),
        mean,
        std,
        cfg.repetitions
    );
    Ok(())
}

fn cmd_privacy(args: &PrivacyArgs) -> Result<()> {
    let delta_mode = if args.strict_paper_delta {
        DeltaMode::StrictPaperText
    } else {
        DeltaMode::Standard
    };
    let budget: PrivacyBudget = match (&args.graph, args.degree) {
        (Some(path), _) => {
            let (g, _) = load_graph(path)?;
            let cfg = match &args.config {
                Some(c) => load_config(c.to_str().unwrap_or_default())?,
                None => ExperimentConfig::default(),
            };
            // worst case over clients, matching the training-time accounting
            let (subs, _) = louvain_partition(&g, cfg.m, args.seed)?;
            let mut worst: Option<PrivacyBudget> = None;
            for sub in &subs {
                let view = feddep::graph::impair(sub, cfg.h, args.seed)?;
                let b = feddep::privacy::budget_for_graph(
                    &view,
                    cfg.fanout,
                    cfg.depth,
                    cfg.epochs,
                    cfg.rate,
                    cfg.delta_prime,
                    cfg.delta_mode(),
                )?;
                if worst.as_ref().map_or(true, |w| b.epsilon > w.epsilon) {
                    worst = Some(b);
                }
            }
            worst.expect("at least one client")
        }
        (None, Some(degree)) => feddep_budget(&AccountantInput {
            d_min: degree,
            fanout: args.fanout,
            depth: args.depth,
            epochs: args.epochs,
            rate: args.rate,
            delta_prime: args.delta_prime,
            delta_mode,
        })?,
        (None, None) => {
            return Err(Error::Argument(
                "either --degree or --graph is required".into(),
            ))
        }
    };

    println!("{:<12} {:>14} {:>14}", "stage", "epsilon", "delta");
    for (stage, e, d) in &budget.trace {
        println!("{:<12} {:>14.6} {:>14.6e}", stage, e, d);
    }
    println!("{:<12} {:>14.6} {:>14.6e}", "final", budget.epsilon, budget.delta);
    Ok(())
}

struct RunRow {
    variant: String,
    mean: f64,
    std: f64,
    comm_values: u64,
    epsilon: Option<f64>,
    delta: Option<f64>,
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut run_dirs: Vec<PathBuf> = Vec::new();
    if args.run_dir.join("manifest.txt").is_file() {
        run_dirs.push(args.run_dir.clone());
    } else {
        for entry in fs::read_dir(&args.run_dir)? {
            let path = entry?.path();
            if path.join("manifest.txt").is_file() {
                run_dirs.push(path);
            }
        }
    }
    run_dirs.sort();
    if run_dirs.is_empty() {
        return Err(Error::State(format!(
            "no completed runs under {}",
            args.run_dir.display()
        )));
    }

    let mut rows = Vec::new();
    for dir in &run_dirs {
        rows.push(report_row(dir)?);
    }
    rows.sort_by(|a, b| b.mean.partial_cmp(&a.mean).unwrap());

    let mut table = format!(
        "{:<18} {:>10} {:>8} {:>14} {:>12} {:>12}\n",
        "variant", "accuracy", "std", "comm_values", "epsilon", "delta"
    );
    let mut machine = String::new();
    for row in &rows {
        let (eps, del) = match (row.epsilon, row.delta) {
            (Some(e), Some(d)) => (format!("{:.4}", e), format!("{:.3e}", d)),
            _ => ("-".to_string(), "-".to_string()),
        };
        table.push_str(&format!(
            "{:<18} {:>10.4} {:>8.4} {:>14} {:>12} {:>12}\n",
            row.variant, row.mean, row.std, row.comm_values, eps, del
        ));
        machine.push_str(&format!(
            "variant={} mean={:.9} std={:.9} comm_values={} epsilon={} delta={}\n",
            row.variant,
            row.mean,
            row.std,
            row.comm_values,
            row.epsilon.map_or("-".to_string(), |e| format!("{:.9}", e)),
            row.delta.map_or("-".to_string(), |d| format!("{:.9}", d)),
        ));
    }
    print!("{}", table);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run_dir.join("report.txt"));
    fs::write(&out, &machine)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn report_row(dir: &Path) -> Result<RunRow> {
    let snapshot = fs::read_to_string(dir.join("config_snapshot.cfg"))?;
    let cfg = parse_config(&snapshot)?;

    // recompute accuracy from the raw per-round metrics, not the summary
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut finals = Vec::new();
    let mut comm_values = 0u64;
    let mut epsilon = None;
    let mut delta = None;
    for line in manifest.lines() {
        if !line.starts_with("rep=") {
            continue;
        }
        let fields: BTreeMap<&str, &str> = line
            .split_whitespace()
            .filter_map(|p| p.split_once('='))
            .collect();
        let need = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::State(format!("manifest line missing '{}'", k)))
        };
        let logs = parse_metrics(&fs::read_to_string(dir.join(need("metrics")?))?)?;
        let last = logs
            .last()
            .ok_or_else(|| Error::State("empty metrics file".into()))?;
        finals.push(last.test_accuracy);
        if finals.len() == 1 {
            let ledger = parse_ledger(&fs::read_to_string(dir.join(need("ledger")?))?)?;
            comm_values = ledger.total_values();
            if let Some((e, d)) =
                parse_budget(&fs::read_to_string(dir.join(need("budget")?))?)?
            {
                epsilon = Some(e);
                delta = Some(d);
            }
        }
    }
    if finals.is_empty() {
        return Err(Error::State(format!(
            "run {} has no repetitions",
            dir.display()
        )));
    }
    let (mean, std) = mean_std(&finals);
    Ok(RunRow {
        variant: cfg.variant.as_str().to_string(),
        mean,
        std,
        comm_values,
        epsilon,
        delta,
    })
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        nodes: args.nodes,
        communities: args.communities,
        classes: args.classes,
        feature_dim: args.feature_dim,
        seed: args.seed,
        ..Default::default()
    };
    let g = synthetic_graph(&cfg)?;
    fs::write(&args.out, write_graph(&g, g.num_classes(), g.feature_dim()))?;
    println!(
        "wrote {} ({} nodes, {} edges, {} classes)",
        args.out.display(),
        g.node_count(),
        g.edge_count(),
        g.num_classes()
    );
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}
