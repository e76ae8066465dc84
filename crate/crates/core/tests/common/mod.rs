#![allow(dead_code)]

use std::sync::Arc;

use commprune::graph::CommTopology;
use commprune::harness::synthetic::{gen_synthetic_tasks, SyntheticTaskSpec};
use commprune::runtime::agents::{ReasonerAgent, VoteSummary};
use commprune::runtime::{AgentRegistry, TaskInstance};

/// Node id of the only agent that sees the answer.
pub const SIGNAL: usize = 2;
pub const NOISE: [usize; 4] = [0, 1, 3, 4];

/// Three text agents (the signal agent is the third) and two visual ones.
pub fn retrieval_topology() -> CommTopology {
    CommTopology::build(
        &["Planner".into(), "Critic".into(), "Reader".into()],
        &["Viewer".into(), "Scanner".into()],
    )
    .unwrap()
}

pub fn reasoner_registry(topo: &CommTopology) -> AgentRegistry {
    AgentRegistry::uniform(topo, Arc::new(ReasonerAgent), Arc::new(VoteSummary))
}

pub fn retrieval_tasks(n: usize, seed: u64) -> Vec<TaskInstance> {
    gen_synthetic_tasks(&SyntheticTaskSpec::new(
        n,
        3,
        vec![SIGNAL],
        NOISE.to_vec(),
        seed,
    ))
    .unwrap()
}

/// Write a line to the real stdout, bypassing the test harness capture.
pub fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}
