//! Dialogue execution over a sampled communication graph.
//!
//! Each round visits agents in the sample's topological order. An agent sees
//! the question, the contexts routed to it, its own memory, and one
//! aggregated message: spatial inputs from earlier agents of this round and
//! temporal inputs from the previous round, each weighted by a softmax of
//! the edge logits over the active predecessors.

pub mod agents;
pub mod registry;
pub mod remote;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    sample_dag_scoped, AgentNode, CommTopology, DagSample, EdgeKind, EdgeMatrices, Modality,
    SampleScope,
};

pub use agents::{Agent, AgentError, AgentReply, AgentRequest, TokenUsage};
pub use registry::{register_agent_backends, AgentRegistry, BackendSpec, RegistrySpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextItem {
    pub modality: Modality,
    pub content: String,
    /// Node ids this item was retrieved for; `None` means every agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible_to: Option<Vec<usize>>,
}

impl ContextItem {
    pub fn visible(&self, node: usize) -> bool {
        self.visible_to.as_ref().is_none_or(|v| v.contains(&node))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub question: String,
    #[serde(default)]
    pub contexts: Vec<ContextItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl TaskInstance {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(Error::Config("task question must be non-empty".into()));
        }
        Ok(())
    }
}

/// Load a line-delimited task file (one JSON object per non-blank line).
pub fn load_tasks(path: &Path) -> Result<Vec<TaskInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskInstance = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentMemory {
    entries: Vec<(usize, String)>,
}

impl AgentMemory {
    /// Rounds must be appended contiguously starting at 1.
    pub fn push(&mut self, round: usize, entry: String) {
        assert_eq!(
            round,
            self.entries.len() + 1,
            "memory rounds must be contiguous from 1"
        );
        self.entries.push((round, entry));
    }

    pub fn entries(&self) -> &[(usize, String)] {
        &self.entries
    }

    pub fn last(&self) -> Option<&str> {
        self.entries.last().map(|(_, s)| s.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: usize,
    pub role: String,
    pub weight: f64,
    pub content: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregatedMessage {
    pub spatial: Vec<Message>,
    pub temporal: Vec<Message>,
    pub rendered: String,
}

impl AggregatedMessage {
    pub fn is_empty(&self) -> bool {
        self.spatial.is_empty() && self.temporal.is_empty()
    }

    pub fn all(&self) -> impl Iterator<Item = &Message> {
        self.spatial.iter().chain(&self.temporal)
    }

    /// Messages are listed by weight (descending), then sender id.
    pub fn new(mut spatial: Vec<Message>, mut temporal: Vec<Message>) -> Self {
        let order =
            |a: &Message, b: &Message| b.weight.total_cmp(&a.weight).then(a.sender.cmp(&b.sender));
        spatial.sort_by(order);
        temporal.sort_by(order);
        let mut rendered = String::new();
        for (channel, list) in [("spatial", &spatial), ("temporal", &temporal)] {
            for m in list {
                let _ = writeln!(
                    rendered,
                    "[{channel}] {} (w={:.3}): {}",
                    m.role, m.weight, m.content
                );
            }
        }
        AggregatedMessage {
            spatial,
            temporal,
            rendered,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentOutput {
    pub agent: usize,
    pub round: usize,
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Tokens of message content delivered to this invocation.
    pub message_tokens: u64,
    pub messages_received: usize,
    #[serde(default)]
    pub failed: bool,
}

/// Token and message accounting for one or more dialogues.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<f64>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub message_tokens: u64,
    pub messages_delivered: u64,
    pub invocations: u64,
    pub failed_invocations: u64,
}

impl UtilityReport {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    pub fn record(&mut self, out: &AgentOutput) {
        self.prompt_tokens += out.prompt_tokens;
        self.completion_tokens += out.completion_tokens;
        self.message_tokens += out.message_tokens;
        self.messages_delivered += out.messages_received as u64;
        self.invocations += 1;
        self.failed_invocations += u64::from(out.failed);
    }

    pub fn absorb(&mut self, other: &UtilityReport) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.message_tokens += other.message_tokens;
        self.messages_delivered += other.messages_delivered;
        self.invocations += other.invocations;
        self.failed_invocations += other.failed_invocations;
    }
}

pub fn count_tokens(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

/// Softmax of `logits[p]` over the predecessor indices `p`.
pub fn aggregation_weights(logits: &[f64], predecessors: &[usize]) -> Vec<f64> {
    if predecessors.is_empty() {
        return Vec::new();
    }
    let vals: Vec<f64> = predecessors.iter().map(|&p| logits[p]).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Everything a dialogue needs besides the edge state.
pub struct DialogueContext<'a> {
    pub topology: &'a CommTopology,
    pub registry: &'a AgentRegistry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DialogueResult {
    pub final_answer: AgentOutput,
    pub report: UtilityReport,
    pub rounds: Vec<Vec<AgentOutput>>,
    pub topo_order: Vec<usize>,
}

impl DialogueResult {
    pub fn invocations(&self) -> impl Iterator<Item = &AgentOutput> {
        self.rounds
            .iter()
            .flatten()
            .chain(std::iter::once(&self.final_answer))
    }
}

fn incoming_logits(matrices: &EdgeMatrices, kind: EdgeKind, to: usize) -> Vec<f64> {
    (0..matrices.n_nodes())
        .map(|from| matrices.logit(kind, from, to))
        .collect()
}

fn collect_messages(
    topology: &CommTopology,
    matrices: &EdgeMatrices,
    kind: EdgeKind,
    to: usize,
    preds: &[usize],
    contents: impl Fn(usize) -> String,
) -> Vec<Message> {
    let logits = incoming_logits(matrices, kind, to);
    aggregation_weights(&logits, preds)
        .into_iter()
        .zip(preds)
        .map(|(weight, &sender)| Message {
            sender,
            role: topology.node(sender).role.clone(),
            weight,
            content: contents(sender),
        })
        .collect()
}

fn invoke(agent: &dyn Agent, req: &AgentRequest<'_>) -> AgentOutput {
    let message_tokens: u64 = req.message.all().map(|m| count_tokens(&m.content)).sum();
    let messages_received = req.message.spatial.len() + req.message.temporal.len();
    match agent.respond(req) {
        Ok(reply) => {
            let usage = reply.usage.unwrap_or_else(|| TokenUsage {
                prompt: count_tokens(&req.node.prompt_template)
                    + count_tokens(&req.render_user_prompt()),
                completion: count_tokens(&reply.content),
            });
            AgentOutput {
                agent: req.node.id,
                round: req.round,
                content: reply.content,
                prompt_tokens: usage.prompt,
                completion_tokens: usage.completion,
                message_tokens,
                messages_received,
                failed: false,
            }
        }
        Err(e) => {
            log::warn!(
                "agent {} ({}) failed in round {}: {e}",
                req.node.id,
                req.node.role,
                req.round
            );
            AgentOutput {
                agent: req.node.id,
                round: req.round,
                content: format!("[agent error] {e}"),
                prompt_tokens: 0,
                completion_tokens: 0,
                message_tokens,
                messages_received,
                failed: true,
            }
        }
    }
}

/// One round of discussion. `previous` holds round `t - 1` outputs indexed by
/// node (absent for round 1), and memories are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    ctx: &DialogueContext<'_>,
    matrices: &EdgeMatrices,
    sample: &DagSample,
    task: &TaskInstance,
    round: usize,
    previous: Option<&[AgentOutput]>,
    memories: &mut [AgentMemory],
    seed: u64,
) -> Result<Vec<AgentOutput>> {
    let n = ctx.topology.len();
    ctx.registry.check_covers(ctx.topology)?;
    if memories.len() != n {
        return Err(Error::Config(format!(
            "{} memories for {n} agents",
            memories.len()
        )));
    }
    let mut outputs: Vec<Option<AgentOutput>> = vec![None; n];
    for &node in &sample.topo_order {
        let spatial_preds = sample.spatial_predecessors(node);
        let spatial = collect_messages(
            ctx.topology,
            matrices,
            EdgeKind::Spatial,
            node,
            &spatial_preds,
            |s| {
                outputs[s]
                    .as_ref()
                    .expect("spatial predecessor precedes receiver in topo order")
                    .content
                    .clone()
            },
        );
        let temporal = match previous {
            Some(prev) => {
                let preds = sample.temporal_predecessors(node);
                collect_messages(
                    ctx.topology,
                    matrices,
                    EdgeKind::Temporal,
                    node,
                    &preds,
                    |s| prev[s].content.clone(),
                )
            }
            None => Vec::new(),
        };
        let message = AggregatedMessage::new(spatial, temporal);
        let contexts: Vec<&crate::runtime::ContextItem> =
            task.contexts.iter().filter(|c| c.visible(node)).collect();
        let req = AgentRequest {
            node: ctx.topology.node(node),
            round,
            task,
            contexts,
            memory: memories[node].entries(),
            message: &message,
            seed,
        };
        let out = invoke(ctx.registry.agent(node), &req);
        outputs[node] = Some(out);
    }
    let outputs: Vec<AgentOutput> = outputs
        .into_iter()
        .map(|o| o.expect("every node visited"))
        .collect();
    for (mem, out) in memories.iter_mut().zip(&outputs) {
        mem.push(round, out.content.clone());
    }
    Ok(outputs)
}

/// Execute `rounds` rounds on an already drawn sample, then ask the summary
/// agent for the final answer from the last round's outputs.
pub fn run_dialogue_on(
    ctx: &DialogueContext<'_>,
    matrices: &EdgeMatrices,
    sample: &DagSample,
    task: &TaskInstance,
    rounds: usize,
    seed: u64,
) -> Result<DialogueResult> {
    if rounds == 0 {
        return Err(Error::Config("a dialogue needs at least one round".into()));
    }
    task.validate()?;
    let n = ctx.topology.len();
    let mut memories = vec![AgentMemory::default(); n];
    let mut history: Vec<Vec<AgentOutput>> = Vec::with_capacity(rounds);
    for round in 1..=rounds {
        let prev = history.last().map(Vec::as_slice);
        let outs = run_round(
            ctx,
            matrices,
            sample,
            task,
            round,
            prev,
            &mut memories,
            seed,
        )?;
        history.push(outs);
    }

    let last = history.last().expect("at least one round");
    let w = 1.0 / n as f64;
    let inputs: Vec<Message> = last
        .iter()
        .map(|o| Message {
            sender: o.agent,
            role: ctx.topology.node(o.agent).role.clone(),
            weight: w,
            content: o.content.clone(),
        })
        .collect();
    let message = AggregatedMessage::new(inputs, Vec::new());
    let summary_node = ctx.registry.summary_node(ctx.topology);
    let req = AgentRequest {
        node: &summary_node,
        round: rounds,
        task,
        contexts: task
            .contexts
            .iter()
            .filter(|c| c.visible_to.is_none())
            .collect(),
        memory: &[],
        message: &message,
        seed,
    };
    let final_answer = invoke(ctx.registry.summary(), &req);

    let mut report = UtilityReport::default();
    for out in history
        .iter()
        .flatten()
        .chain(std::iter::once(&final_answer))
    {
        report.record(out);
    }
    Ok(DialogueResult {
        final_answer,
        report,
        rounds: history,
        topo_order: sample.topo_order.clone(),
    })
}

/// Sample one DAG from the matrices and run a full dialogue on it.
pub fn run_dialogue(
    ctx: &DialogueContext<'_>,
    matrices: &EdgeMatrices,
    task: &TaskInstance,
    rounds: usize,
    rng_seed: u64,
) -> Result<(AgentOutput, UtilityReport)> {
    let sample = sample_dag_scoped(matrices, &SampleScope::default(), rng_seed)?;
    let res = run_dialogue_on(ctx, matrices, &sample, task, rounds, rng_seed)?;
    Ok((res.final_answer, res.report))
}

pub(crate) fn summary_node_for(topology: &CommTopology, role: &str, template: &str) -> AgentNode {
    AgentNode {
        id: topology.len(),
        modality: Modality::Text,
        role: role.to_string(),
        prompt_template: template.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Block, Inclusion, MatrixId};
    use crate::runtime::agents::{ConstantAgent, EchoAgent};
    use std::sync::Arc;

    fn roles(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn task() -> TaskInstance {
        TaskInstance {
            question: "Which city?".into(),
            contexts: vec![],
            gold_answer: Some("Paris".into()),
        }
    }

    #[test]
    fn weights_examples() {
        assert_eq!(aggregation_weights(&[0.3, 0.3], &[0, 1]), vec![0.5, 0.5]);
        let w = aggregation_weights(&[2f64.ln(), 0.0], &[0, 1]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-9 && (w[1] - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(aggregation_weights(&[0.9, 0.1], &[1]), vec![1.0]);
        assert!(aggregation_weights(&[0.9], &[]).is_empty());
    }

    #[test]
    fn echo_propagates_along_single_edge() {
        let topo = CommTopology::build(&roles("T", 1), &roles("V", 1)).unwrap();
        let registry =
            AgentRegistry::uniform(&topo, Arc::new(EchoAgent), Arc::new(agents::ConcatSummary));
        let mut m = topo.fully_connected();
        for kind in EdgeKind::ALL {
            m.restrict(kind, &[]);
        }
        m.set_edge(EdgeKind::Spatial, 0, 1, true, 1.0);
        let ctx = DialogueContext {
            topology: &topo,
            registry: &registry,
        };
        let sample = sample_dag_scoped(
            &m,
            &SampleScope {
                blocks: &Block::ALL,
                order: Some(&[0, 1]),
                inclusion: Inclusion::Bernoulli,
            },
            0,
        )
        .unwrap();
        let res = run_dialogue_on(&ctx, &m, &sample, &task(), 1, 0).unwrap();
        let downstream = &res.rounds[0][1].content;
        let upstream = &res.rounds[0][0].content;
        assert!(downstream.contains(upstream.split_whitespace().next().unwrap()));
        assert_eq!(res.rounds[0][1].messages_received, 1);
    }

    #[test]
    fn isolated_agents_ignore_order() {
        let topo = CommTopology::build(&roles("T", 2), &roles("V", 2)).unwrap();
        let registry =
            AgentRegistry::uniform(&topo, Arc::new(EchoAgent), Arc::new(agents::ConcatSummary));
        let mut m = topo.full_adjacency();
        for kind in EdgeKind::ALL {
            m.restrict(kind, &[]);
        }
        let ctx = DialogueContext {
            topology: &topo,
            registry: &registry,
        };
        let a = run_dialogue(&ctx, &m, &task(), 2, 1).unwrap();
        let b = run_dialogue(&ctx, &m, &task(), 2, 2).unwrap();
        assert_eq!(a.0.content, b.0.content);
        // only the summary's four inputs
        assert_eq!(a.1.messages_delivered, 4);
    }

    #[test]
    fn summary_sees_every_last_round_output() {
        let topo = CommTopology::build(&roles("T", 3), &roles("V", 2)).unwrap();
        let registry = AgentRegistry::uniform(
            &topo,
            Arc::new(ConstantAgent::new("same")),
            Arc::new(agents::ConcatSummary),
        );
        let m = topo.fully_connected();
        let ctx = DialogueContext {
            topology: &topo,
            registry: &registry,
        };
        let (answer, report) = run_dialogue(&ctx, &m, &task(), 2, 3).unwrap();
        assert_eq!(answer.content.matches("same").count(), 5);
        assert_eq!(report.invocations, 11);
    }

    #[test]
    fn token_totals_are_the_sum_of_invocations() {
        let topo = CommTopology::build(&roles("T", 2), &roles("V", 2)).unwrap();
        let registry =
            AgentRegistry::uniform(&topo, Arc::new(EchoAgent), Arc::new(agents::ConcatSummary));
        let mut m = topo.full_adjacency();
        let ids: Vec<_> = MatrixId::all().collect();
        m.init_logits(&ids, &Default::default()).unwrap();
        let ctx = DialogueContext {
            topology: &topo,
            registry: &registry,
        };
        let sample = sample_dag_scoped(&m, &SampleScope::default(), 5).unwrap();
        let res = run_dialogue_on(&ctx, &m, &sample, &task(), 2, 5).unwrap();
        let p: u64 = res.invocations().map(|o| o.prompt_tokens).sum();
        let c: u64 = res.invocations().map(|o| o.completion_tokens).sum();
        assert_eq!(res.report.prompt_tokens, p);
        assert_eq!(res.report.completion_tokens, c);
        assert_eq!(res.report.total_tokens(), p + c);
    }

    #[test]
    fn rendered_messages_sorted_by_weight() {
        let mk = |sender, weight| Message {
            sender,
            role: format!("r{sender}"),
            weight,
            content: "x".into(),
        };
        let agg = AggregatedMessage::new(vec![mk(2, 0.2), mk(0, 0.5), mk(1, 0.3)], vec![]);
        let senders: Vec<_> = agg.spatial.iter().map(|m| m.sender).collect();
        assert_eq!(senders, vec![0, 1, 2]);
        assert!(agg.rendered.starts_with("[spatial] r0 (w=0.500): x"));
    }

    #[test]
    #[should_panic]
    fn memory_rounds_must_be_contiguous() {
        let mut mem = AgentMemory::default();
        mem.push(2, "x".into());
    }

    #[test]
    fn blank_question_rejected() {
        let t = TaskInstance {
            question: "  ".into(),
            contexts: vec![],
            gold_answer: None,
        };
        assert!(t.validate().is_err());
    }
}
