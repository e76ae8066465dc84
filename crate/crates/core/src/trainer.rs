//! Staged training: text intra edges, visual intra edges, then the
//! cross-modal edges with the intra blocks frozen.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{
    rows_of, sample_dag_scoped, Block, CommTopology, EdgeKind, EdgeMatrices, GumbelConfig,
    Inclusion, MatrixId, SampleScope, TopologyFile,
};
use crate::objective::{alignment_loss, nuclear_norm, ObjectiveWeights, UtilityFn};
use crate::optimizer::{
    apply_update, estimate_policy_gradient, prune_step, rollout_utility, schedule_rate,
    total_objective_gradient, RolloutEnv, Stage, TrainerConfig,
};
use crate::rng::{derive_seed, rng_for};
use crate::runtime::{
    run_dialogue_on, AgentOutput, AgentRegistry, DialogueContext, TaskInstance, UtilityReport,
};

const CHECKPOINT_VERSION: u32 = 1;
pub const REDUNDANCY_EDGE_LIMIT: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: Vec<MatrixId>,
    pub steps: usize,
    pub weights: ObjectiveWeights,
}

pub fn stage_plans(cfg: &TrainerConfig) -> Vec<StagePlan> {
    Stage::ORDER
        .iter()
        .map(|&stage| StagePlan {
            stage,
            trainable: stage.trainable(),
            steps: if stage == Stage::Inter {
                cfg.stage2_steps
            } else {
                cfg.stage1_steps
            },
            weights: cfg.weights.clone(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEvent {
    /// Logits right after a stage's initialisation.
    Init,
    Step,
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub event: TraceEvent,
    pub stage: Stage,
    pub step: usize,
    pub global_step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_utility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility_variance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_rate: Option<f64>,
    pub nuclear_norms: BTreeMap<MatrixId, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment_loss: Option<f64>,
    pub active_edges: BTreeMap<MatrixId, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<UtilityReport>,
    /// Logits of the stage's trainable matrices after the step.
    pub logits: BTreeMap<MatrixId, Vec<Vec<f64>>>,
    /// Role lists, carried by init records so the trace is self-describing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roles: Option<RoleLists>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleLists {
    pub text: Vec<String>,
    pub visual: Vec<String>,
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::CorruptState(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub rng_seed: u64,
    /// Index into the stage order of the stage in progress.
    pub stage_index: usize,
    /// Steps of that stage already applied.
    pub steps_done: usize,
    pub prune_rate: f64,
    pub global_step: usize,
    /// Trace records emitted up to this point.
    pub trace_len: usize,
    pub state: TopologyFile,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::CorruptState(format!(
                "{}: checkpoint version {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn matrices(&self) -> Result<(CommTopology, EdgeMatrices)> {
        EdgeMatrices::from_file(&self.state)
    }
}

pub fn config_hash(cfg: &TrainerConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `trace.jsonl` and checkpoints; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this many optimizer steps in total (counting resumed ones).
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub matrices: EdgeMatrices,
    pub trace: Vec<TraceRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    pub trace_path: Option<PathBuf>,
    pub completed: bool,
}

struct TraceSink {
    records: Vec<TraceRecord>,
    file: Option<BufWriter<File>>,
    path: Option<PathBuf>,
}

impl TraceSink {
    fn open(out_dir: Option<&Path>, keep: Option<usize>) -> Result<Self> {
        let Some(dir) = out_dir else {
            return Ok(TraceSink {
                records: Vec::new(),
                file: None,
                path: None,
            });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("trace.jsonl");
        let mut records = Vec::new();
        if let Some(n) = keep {
            // resume: keep the first n records of an existing trace
            if path.exists() {
                records = read_trace(&path)?;
                if records.len() < n {
                    return Err(Error::CorruptState(format!(
                        "{} has {} records but the checkpoint expects {n}",
                        path.display(),
                        records.len()
                    )));
                }
                records.truncate(n);
            }
        }
        let mut file = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for r in &records {
            writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(&path, e))?;
        }
        Ok(TraceSink {
            records,
            file: Some(file),
            path: Some(path),
        })
    }

    fn push(&mut self, r: TraceRecord) -> Result<()> {
        if let (Some(f), Some(p)) = (&mut self.file, &self.path) {
            writeln!(f, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(p, e))?;
            f.flush().map_err(|e| Error::io(p, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

fn snapshot(
    m: &EdgeMatrices,
    stage: Stage,
    event: TraceEvent,
    step: usize,
    global_step: usize,
    weights: &ObjectiveWeights,
) -> Result<TraceRecord> {
    let trainable = stage.trainable();
    let mut nuclear_norms = BTreeMap::new();
    let mut logits = BTreeMap::new();
    for &id in &trainable {
        let l = &m.block(id).logits;
        nuclear_norms.insert(id, nuclear_norm(l)?);
        logits.insert(id, rows_of(l));
    }
    let alignment = if stage == Stage::Inter {
        let mut total = 0.0;
        for kind in EdgeKind::ALL {
            total += alignment_loss(
                &m.block(MatrixId::new(kind, Block::TextVisual)).logits,
                &m.block(MatrixId::new(kind, Block::VisualText)).logits,
                weights.align_normalization,
            )?;
        }
        Some(total)
    } else {
        None
    };
    Ok(TraceRecord {
        event,
        stage,
        step,
        global_step,
        mean_utility: None,
        utility_variance: None,
        prune_rate: None,
        nuclear_norms,
        alignment_loss: alignment,
        active_edges: m.active_edge_count().0,
        tokens: None,
        logits,
        roles: None,
    })
}

fn init_stage(m: &mut EdgeMatrices, stage: Stage, cfg: &TrainerConfig) -> Result<()> {
    let gumbel = GumbelConfig {
        temperature: cfg.temperature,
        rng_seed: derive_seed(cfg.rng_seed, &[0x696e_6974, stage.index()]),
    };
    m.init_logits(&stage.trainable(), &gumbel)
}

/// Run every stage, writing the trace and checkpoints under `opts.out_dir`.
/// Training starts from the fully adjacent graph unless resuming.
pub fn train(
    topology: &CommTopology,
    registry: &AgentRegistry,
    utility: &UtilityFn,
    tasks: &[TaskInstance],
    cfg: &TrainerConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if tasks.is_empty() {
        return Err(Error::Config("training needs at least one task".into()));
    }
    cfg.validate()?;
    registry.check_covers(topology)?;
    let hash = config_hash(cfg);

    let plans = stage_plans(cfg);
    let (mut m, mut stage_index, mut steps_done, mut p_prev, mut global_step) = match &opts.resume {
        Some(ck) => {
            if ck.config_hash != hash || ck.rng_seed != cfg.rng_seed {
                return Err(Error::Config(
                    "checkpoint was written with a different training config".into(),
                ));
            }
            let (ck_topo, m) = ck.matrices()?;
            if ck_topo.text_roles() != topology.text_roles()
                || ck_topo.visual_roles() != topology.visual_roles()
            {
                return Err(Error::InvalidTopology(
                    "checkpoint roles do not match the configured topology".into(),
                ));
            }
            (
                m,
                ck.stage_index,
                ck.steps_done,
                ck.prune_rate,
                ck.global_step,
            )
        }
        None => (topology.full_adjacency(), 0, 0, cfg.initial_prune_rate, 0),
    };
    let mut sink = TraceSink::open(
        opts.out_dir.as_deref(),
        opts.resume.as_ref().map(|c| c.trace_len),
    )?;

    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut rng_for(cfg.rng_seed, &[0x7461_736b]));

    let env = RolloutEnv {
        topology,
        registry,
        utility,
        rounds: cfg.rounds,
    };
    let mut checkpoints = Vec::new();
    let mut last_checkpoint: Option<PathBuf> = None;

    let write_checkpoint = |m: &EdgeMatrices,
                            stage_index: usize,
                            steps_done: usize,
                            p: f64,
                            global_step: usize,
                            trace_len: usize,
                            name: &str|
     -> Result<Option<PathBuf>> {
        let Some(dir) = &opts.out_dir else {
            return Ok(None);
        };
        let path = dir.join(name);
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash.clone(),
            rng_seed: cfg.rng_seed,
            stage_index,
            steps_done,
            prune_rate: p,
            global_step,
            trace_len,
            state: m.to_file(topology, cfg.rng_seed),
        }
        .save(&path)?;
        Ok(Some(path))
    };

    while stage_index < plans.len() {
        let plan = &plans[stage_index];
        let stage = plan.stage;
        if steps_done == 0 {
            init_stage(&mut m, stage, cfg)?;
            p_prev = cfg.initial_prune_rate;
            let mut rec = snapshot(&m, stage, TraceEvent::Init, 0, global_step, &plan.weights)?;
            rec.roles = Some(RoleLists {
                text: topology.text_roles(),
                visual: topology.visual_roles(),
            });
            sink.push(rec)?;
            log::info!("stage {} initialised", stage.name());
        }
        while steps_done < plan.steps {
            if opts.stop_after.is_some_and(|n| global_step >= n) {
                return Ok(TrainOutcome {
                    matrices: m,
                    trace: sink.records,
                    checkpoints,
                    final_checkpoint: last_checkpoint,
                    trace_path: sink.path,
                    completed: false,
                });
            }
            let t = steps_done + 1;
            let batch: Vec<TaskInstance> = (0..cfg.batch_size.min(tasks.len()))
                .map(|j| tasks[order[(global_step * cfg.batch_size + j) % tasks.len()]].clone())
                .collect();
            let seed = derive_seed(cfg.rng_seed, &[0x7374_6570, stage.index(), t as u64]);
            let est =
                estimate_policy_gradient(&env, &m, &batch, stage.sampled_blocks(), cfg, seed)?;
            let step_no = global_step + 1;
            let last_ck = last_checkpoint.clone();
            let diverged = |reason: String| Error::Diverged {
                step: step_no,
                reason,
                last_checkpoint: last_ck.clone(),
            };
            if !est.mean_utility.is_finite() {
                return Err(diverged(format!("utility {}", est.mean_utility)));
            }
            let grads = total_objective_gradient(&m, &est, &plan.weights, stage)
                .map_err(|e| diverged(e.to_string()))?;
            let updated = apply_update(&m, &grads, cfg.learning_rate).map_err(|e| match e {
                Error::Numerical(r) => diverged(r),
                other => other,
            })?;
            let p_t = schedule_rate(p_prev, t, plan.steps);
            let (pruned, _mask) = prune_step(&updated, &plan.trainable, p_t, t);
            m = pruned;
            p_prev = p_t;
            steps_done = t;
            global_step += 1;

            let mut rec = snapshot(&m, stage, TraceEvent::Step, t, global_step, &plan.weights)
                .map_err(|e| diverged(e.to_string()))?;
            if rec.nuclear_norms.values().any(|v| !v.is_finite()) {
                return Err(diverged("non-finite nuclear norm".into()));
            }
            rec.mean_utility = Some(est.mean_utility);
            rec.utility_variance = Some(est.utility_variance);
            rec.prune_rate = Some(p_t);
            rec.tokens = Some(est.report.clone());
            sink.push(rec)?;
            log::info!(
                "{} step {t}/{}: utility {:.3}, p {:.4}, edges {}",
                stage.name(),
                plan.steps,
                est.mean_utility,
                p_t,
                m.active_edge_count().total()
            );

            if cfg.checkpoint_every > 0 && global_step % cfg.checkpoint_every == 0 {
                let name = format!("checkpoint-{global_step:05}.json");
                if let Some(p) = write_checkpoint(
                    &m,
                    stage_index,
                    steps_done,
                    p_prev,
                    global_step,
                    sink.records.len(),
                    &name,
                )? {
                    checkpoints.push(p.clone());
                    last_checkpoint = Some(p);
                }
            }
        }
        stage_index += 1;
        steps_done = 0;
    }

    let final_checkpoint = write_checkpoint(
        &m,
        plans.len(),
        0,
        p_prev,
        global_step,
        sink.records.len(),
        "checkpoint-final.json",
    )?;
    if let Some(p) = &final_checkpoint {
        checkpoints.push(p.clone());
    }
    Ok(TrainOutcome {
        matrices: m,
        trace: sink.records,
        checkpoints,
        final_checkpoint,
        trace_path: sink.path,
        completed: true,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskTrace {
    pub index: usize,
    pub prediction: String,
    pub utility: f64,
    pub report: UtilityReport,
    pub invocations: Vec<AgentOutput>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_utility: f64,
    /// Exact-match accuracy when every task has a gold answer.
    pub exact_match: Option<f64>,
    pub totals: UtilityReport,
    pub active_edges: BTreeMap<MatrixId, usize>,
    pub tasks: Vec<TaskTrace>,
}

impl EvalReport {
    /// Percentage change of total tokens relative to `base`.
    pub fn token_delta_pct(&self, base: &EvalReport) -> f64 {
        let b = base.totals.total_tokens() as f64;
        if b == 0.0 {
            return 0.0;
        }
        100.0 * (self.totals.total_tokens() as f64 - b) / b
    }
}

/// Run each task once on a graph sampled from the (fixed) matrices.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    topology: &CommTopology,
    matrices: &EdgeMatrices,
    registry: &AgentRegistry,
    utility: &UtilityFn,
    tasks: &[TaskInstance],
    rounds: usize,
    seed: u64,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    matrices.validate()?;
    let ctx = DialogueContext { topology, registry };
    let all_gold = tasks.iter().all(|t| t.gold_answer.is_some());
    let mut totals = UtilityReport::default();
    let mut traces = Vec::with_capacity(tasks.len());
    let mut sum_u = 0.0;
    let mut sum_em = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let s = derive_seed(seed, &[0x6576_616c, i as u64]);
        let sample = sample_dag_scoped(matrices, &SampleScope::default(), s)?;
        let res = run_dialogue_on(&ctx, matrices, &sample, task, rounds, s)?;
        let u = utility.score(&res.final_answer.content, task)?;
        if all_gold {
            sum_em += UtilityFn::ExactMatch.score(&res.final_answer.content, task)?;
        }
        sum_u += u;
        let mut report = res.report.clone();
        report.utility = Some(u);
        totals.absorb(&report);
        traces.push(TaskTrace {
            index: i,
            prediction: res.final_answer.content.clone(),
            utility: u,
            report,
            invocations: res.invocations().cloned().collect(),
        });
    }
    let n = tasks.len() as f64;
    totals.utility = Some(sum_u / n);
    Ok(EvalReport {
        mean_utility: sum_u / n,
        exact_match: all_gold.then_some(sum_em / n),
        totals,
        active_edges: matrices.active_edge_count().0,
        tasks: traces,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyEntry {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
    pub utility_with: f64,
    pub utility_without: f64,
    pub redundant: bool,
}

/// Brute-force redundancy labels: every active edge is removed in turn and
/// the mean utility over `tasks` and `orders` fixed topological orders is
/// compared with the intact graph. All active edges are used (no sampling).
#[allow(clippy::too_many_arguments)]
pub fn redundancy_report(
    topology: &CommTopology,
    matrices: &EdgeMatrices,
    registry: &AgentRegistry,
    utility: &UtilityFn,
    tasks: &[TaskInstance],
    delta: f64,
    rounds: usize,
    orders: usize,
    seed: u64,
) -> Result<Vec<RedundancyEntry>> {
    if tasks.is_empty() {
        return Err(Error::Config(
            "redundancy report needs at least one task".into(),
        ));
    }
    let active = matrices.active_edge_count().total();
    if active > REDUNDANCY_EDGE_LIMIT {
        return Err(Error::TooManyEdges {
            active,
            limit: REDUNDANCY_EDGE_LIMIT,
        });
    }
    let env = RolloutEnv {
        topology,
        registry,
        utility,
        rounds,
    };
    let orders = orders.max(1);
    let score = |m: &EdgeMatrices| -> Result<f64> {
        let mut total = 0.0;
        for o in 0..orders {
            let s = derive_seed(seed, &[0x7265_6475, o as u64]);
            let scope = SampleScope {
                blocks: &Block::ALL,
                order: None,
                inclusion: Inclusion::Support,
            };
            let sample = sample_dag_scoped(m, &scope, s)?;
            total += rollout_utility(&env, m, &sample, tasks, s)?.0;
        }
        Ok(total / orders as f64)
    };
    let base = score(matrices)?;
    let n = matrices.n_nodes();
    let mut out = Vec::new();
    for kind in EdgeKind::ALL {
        for from in 0..n {
            for to in 0..n {
                if !matrices.adjacent(kind, from, to) {
                    continue;
                }
                let mut without = matrices.clone();
                without.set_edge(kind, from, to, false, 0.0);
                let u = score(&without)?;
                out.push(RedundancyEntry {
                    kind,
                    from,
                    to,
                    utility_with: base,
                    utility_without: u,
                    redundant: base - u <= delta,
                });
            }
        }
    }
    Ok(out)
}
