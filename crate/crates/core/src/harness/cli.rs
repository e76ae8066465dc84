use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;

use super::config::{LoadedConfig, RunManifest};
use super::heatmap::export_heatmaps;
use super::synthetic::{gen_synthetic_tasks, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::graph::{CommTopology, EdgeMatrices};
use crate::optimizer::Stage;
use crate::rng::rng_for;
use crate::runtime::agents::{Agent, InputAttackAgent, ResponseAttackAgent};
use crate::runtime::write_tasks;
use crate::trainer::{
    config_hash, evaluate, redundancy_report, train, Checkpoint, EvalReport, TrainOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "commprune",
    version,
    about = "Learn and prune multi-agent communication graphs"
)]
pub struct Cli {
    /// Cap on concurrent rollouts.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AttackKind {
    /// The replaced agent ignores everything but its own context.
    Input,
    /// The replaced agent asserts a wrong answer as evidence.
    Response,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the staged training pipeline.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the evaluation tasks.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "fully_connected")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate the fully connected graph instead of a checkpoint.
        #[arg(long)]
        fully_connected: bool,
        /// Second checkpoint to report the token delta against.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Write the full report (with per-task traces) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate with one agent replaced by an adversary.
    AttackEval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "fully_connected")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fully_connected: bool,
        #[arg(long, value_enum)]
        attack: AttackKind,
        /// Node to replace; random by seed when omitted.
        #[arg(long)]
        attack_node: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export logit heatmaps from a training trace.
    ExportHeatmaps {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Config used for the run, to detect traces cut short between records.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic task file.
    GenTasks {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        n_tasks: usize,
        /// Number of text agents; higher ids are visual.
        #[arg(long)]
        n_text: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        signal: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        noise: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Label each active edge of a small graph as redundant or not.
    RedundancyReport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Topological orders averaged per edge.
        #[arg(long, default_value_t = 8)]
        orders: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Exit code for an error: 1 for usage and configuration problems, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidTopology(_) => 1,
        _ => 2,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return 1;
        }
        // a second call in the same process (tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_checkpoint_for(cfg: &LoadedConfig, path: &Path) -> Result<(CommTopology, EdgeMatrices)> {
    let topology = cfg.topology()?;
    let (ck_topo, m) = Checkpoint::load(path)?.matrices()?;
    if ck_topo.text_roles() != topology.text_roles()
        || ck_topo.visual_roles() != topology.visual_roles()
    {
        return Err(Error::InvalidTopology(format!(
            "{} was trained on roles {:?}/{:?}, config has {:?}/{:?}",
            path.display(),
            ck_topo.text_roles(),
            ck_topo.visual_roles(),
            topology.text_roles(),
            topology.visual_roles()
        )));
    }
    Ok((topology, m))
}

fn graph_for(
    cfg: &LoadedConfig,
    checkpoint: Option<&Path>,
    fully_connected: bool,
) -> Result<(CommTopology, EdgeMatrices)> {
    match (checkpoint, fully_connected) {
        (Some(p), false) => load_checkpoint_for(cfg, p),
        (None, true) => {
            let t = cfg.topology()?;
            let m = t.fully_connected();
            Ok((t, m))
        }
        _ => Err(Error::Config(
            "pass exactly one of --checkpoint or --fully-connected".into(),
        )),
    }
}

fn print_report(label: &str, r: &EvalReport) {
    println!("{label}");
    if let Some(em) = r.exact_match {
        println!("  exact_match        {em:.4}");
    }
    println!("  mean_utility       {:.4}", r.mean_utility);
    println!("  prompt_tokens      {}", r.totals.prompt_tokens);
    println!("  completion_tokens  {}", r.totals.completion_tokens);
    println!("  total_tokens       {}", r.totals.total_tokens());
    println!("  message_tokens     {}", r.totals.message_tokens);
    println!("  failed_calls       {}", r.totals.failed_invocations);
    let total: usize = r.active_edges.values().sum();
    println!("  active_edges       {total}");
    for (id, n) in &r.active_edges {
        println!("    {id:<24} {n}");
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            checkpoint,
            out,
        } => cmd_train(&config, seed, checkpoint.as_deref(), out.as_deref()),
        Command::Eval {
            config,
            checkpoint,
            seed,
            fully_connected,
            compare,
            out,
        } => {
            let cfg = LoadedConfig::load(&config)?;
            let (topology, m) = graph_for(&cfg, checkpoint.as_deref(), fully_connected)?;
            let registry = cfg.registry(&topology)?;
            let utility = cfg.utility()?;
            let tasks = cfg.eval_tasks()?;
            let seed = seed.unwrap_or(cfg.config.trainer.rng_seed);
            let rounds = cfg.config.trainer.rounds;
            let report = evaluate(&topology, &m, &registry, &utility, &tasks, rounds, seed)?;
            print_report("evaluation", &report);
            if let Some(other) = compare {
                let (_, m2) = load_checkpoint_for(&cfg, &other)?;
                let base = evaluate(&topology, &m2, &registry, &utility, &tasks, rounds, seed)?;
                print_report(&format!("comparison ({})", other.display()), &base);
                println!("token_delta_pct      {:+.2}", report.token_delta_pct(&base));
            }
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_vec_pretty(&report)?)
                    .map_err(|e| Error::io(&p, e))?;
            }
            Ok(())
        }
        Command::AttackEval {
            config,
            checkpoint,
            fully_connected,
            attack,
            attack_node,
            seed,
        } => {
            let cfg = LoadedConfig::load(&config)?;
            let (topology, m) = graph_for(&cfg, checkpoint.as_deref(), fully_connected)?;
            let seed = seed.unwrap_or(cfg.config.trainer.rng_seed);
            let node = match attack_node {
                Some(n) if n < topology.len() => n,
                Some(n) => {
                    return Err(Error::Config(format!(
                        "--attack-node {n} out of range for {} agents",
                        topology.len()
                    )))
                }
                None => rng_for(seed, &[0x6174_7461_636b]).random_range(0..topology.len()),
            };
            let registry = cfg.registry(&topology)?;
            let mut attacked = registry.clone();
            let agent: Arc<dyn Agent> = match attack {
                AttackKind::Input => Arc::new(InputAttackAgent),
                AttackKind::Response => Arc::new(ResponseAttackAgent),
            };
            attacked.replace(node, agent)?;
            let utility = cfg.utility()?;
            let tasks = cfg.eval_tasks()?;
            let rounds = cfg.config.trainer.rounds;
            let clean = evaluate(&topology, &m, &registry, &utility, &tasks, rounds, seed)?;
            let hit = evaluate(&topology, &m, &attacked, &utility, &tasks, rounds, seed)?;
            println!(
                "attack {:?} on node {node} ({})",
                attack,
                topology.node(node).role
            );
            print_report("clean", &clean);
            print_report("attacked", &hit);
            println!(
                "utility_drop         {:.4}",
                clean.mean_utility - hit.mean_utility
            );
            Ok(())
        }
        Command::ExportHeatmaps { trace, out, config } => {
            let expected = match config {
                Some(c) => {
                    let cfg = LoadedConfig::load(&c)?;
                    let t = &cfg.config.trainer;
                    Some(BTreeMap::from([
                        (Stage::IntraText, t.stage1_steps),
                        (Stage::IntraVisual, t.stage1_steps),
                        (Stage::Inter, t.stage2_steps),
                    ]))
                }
                None => None,
            };
            let summary = export_heatmaps(&trace, &out, expected.as_ref())?;
            for f in &summary.files {
                println!("{}", f.display());
            }
            println!("{} rows", summary.rows);
            if summary.partial {
                eprintln!("warning: partial export: {}", summary.notes.join("; "));
            }
            let p = out.join("export.json");
            std::fs::write(&p, serde_json::to_vec_pretty(&summary)?)
                .map_err(|e| Error::io(&p, e))?;
            Ok(())
        }
        Command::GenTasks {
            out,
            n_tasks,
            n_text,
            signal,
            noise,
            seed,
        } => {
            let spec = SyntheticTaskSpec::new(n_tasks, n_text, signal, noise, seed);
            let tasks = gen_synthetic_tasks(&spec)?;
            write_tasks(&out, &tasks)?;
            println!("wrote {} tasks to {}", tasks.len(), out.display());
            Ok(())
        }
        Command::RedundancyReport {
            config,
            checkpoint,
            delta,
            orders,
            seed,
        } => {
            let cfg = LoadedConfig::load(&config)?;
            let (topology, m) = load_checkpoint_for(&cfg, &checkpoint)?;
            let registry = cfg.registry(&topology)?;
            let utility = cfg.utility()?;
            let tasks = cfg.eval_tasks()?;
            let seed = seed.unwrap_or(cfg.config.trainer.rng_seed);
            let rep = redundancy_report(
                &topology,
                &m,
                &registry,
                &utility,
                &tasks,
                delta,
                cfg.config.trainer.rounds,
                orders,
                seed,
            )?;
            println!(
                "{:<9} {:<14} {:<14} {:>8} {:>8} redundant",
                "kind", "from", "to", "with", "without"
            );
            for e in rep {
                println!(
                    "{:<9} {:<14} {:<14} {:>8.4} {:>8.4} {}",
                    e.kind.name(),
                    topology.node(e.from).role,
                    topology.node(e.to).role,
                    e.utility_with,
                    e.utility_without,
                    e.redundant
                );
            }
            Ok(())
        }
    }
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = LoadedConfig::load(config)?;
    let mut tcfg = cfg.config.trainer.clone();
    if let Some(s) = seed {
        tcfg.rng_seed = s;
    }
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir());
    let manifest_path = out_dir.join("manifest.json");
    // never leave a manifest from an earlier run next to a failed one
    if manifest_path.exists() {
        std::fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }
    let topology = cfg.topology()?;
    let registry = cfg.registry(&topology)?;
    let utility = cfg.utility()?;
    let tasks = cfg.train_tasks()?;
    let opts = TrainOptions {
        out_dir: Some(out_dir.clone()),
        resume: resume.map(Checkpoint::load).transpose()?,
        stop_after: None,
    };
    let outcome = train(&topology, &registry, &utility, &tasks, &tcfg, &opts)?;

    let mut artifacts = BTreeMap::new();
    if let Some(p) = &outcome.trace_path {
        artifacts.insert("trace".to_string(), p.clone());
    }
    if let Some(p) = &outcome.final_checkpoint {
        artifacts.insert("final_checkpoint".to_string(), p.clone());
    }
    for p in &outcome.checkpoints {
        if Some(p) != outcome.final_checkpoint.as_ref() {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            artifacts.insert(name, p.clone());
        }
    }
    let mut metrics = BTreeMap::new();
    if let Some(u) = outcome.trace.iter().rev().find_map(|r| r.mean_utility) {
        metrics.insert("final_train_utility".to_string(), u);
    }
    metrics.insert(
        "active_edges".to_string(),
        outcome.matrices.active_edge_count().total() as f64,
    );
    metrics.insert(
        "steps".to_string(),
        outcome
            .trace
            .iter()
            .filter(|r| r.mean_utility.is_some())
            .count() as f64,
    );
    let manifest = RunManifest {
        command: "train".into(),
        config_hash: format!("{}:{}", cfg.file_hash, config_hash(&tcfg)),
        seed: tcfg.rng_seed,
        artifacts,
        metrics,
    };
    manifest.write(&manifest_path)?;
    println!(
        "trace       {}",
        outcome
            .trace_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    if let Some(p) = &outcome.final_checkpoint {
        println!("checkpoint  {}", p.display());
    }
    println!("manifest    {}", manifest_path.display());
    println!(
        "active edges {}",
        outcome.matrices.active_edge_count().total()
    );
    Ok(())
}
