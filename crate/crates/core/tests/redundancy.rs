mod common;

use std::sync::Arc;

use commprune::error::Error;
use commprune::graph::{sample_dag_scoped, Block, EdgeKind, Inclusion, SampleScope};
use commprune::objective::UtilityFn;
use commprune::runtime::agents::{ConstantAgent, EchoAgent};
use commprune::runtime::{count_tokens, run_dialogue_on, AgentRegistry, DialogueContext};
use commprune::trainer::{evaluate, redundancy_report};

use common::{reasoner_registry, retrieval_tasks, retrieval_topology, SIGNAL};

/// A star around the signal agent plus a few noise-only links.
fn restricted() -> commprune::graph::EdgeMatrices {
    let topo = retrieval_topology();
    let mut m = topo.fully_connected();
    m.restrict(
        EdgeKind::Spatial,
        &[(SIGNAL, 0), (SIGNAL, 3), (0, 1), (3, 4), (4, 1)],
    );
    m.restrict(EdgeKind::Temporal, &[(SIGNAL, 1), (0, 0), (1, 4)]);
    m
}

#[test]
fn noise_edges_are_redundant_signal_edges_are_not() {
    let topo = retrieval_topology();
    let reg = reasoner_registry(&topo);
    let tasks = retrieval_tasks(6, 21);
    let m = restricted();
    let report = redundancy_report(
        &topo,
        &m,
        &reg,
        &UtilityFn::ExactMatch,
        &tasks,
        0.0,
        2,
        6,
        0,
    )
    .unwrap();
    assert_eq!(report.len(), 8);
    for e in &report {
        assert_eq!(e.utility_with, 1.0);
        if e.from != SIGNAL {
            assert!(e.redundant, "{e:?}");
        }
    }
    // the signal agent reaches the vote only through these edges, and losing
    // one leaves a tie against the decoys on some tasks
    assert!(
        report.iter().any(|e| e.from == SIGNAL && !e.redundant),
        "{report:?}"
    );
}

#[test]
fn dense_graphs_are_refused() {
    let topo = retrieval_topology();
    let reg = reasoner_registry(&topo);
    let err = redundancy_report(
        &topo,
        &topo.fully_connected(),
        &reg,
        &UtilityFn::ExactMatch,
        &retrieval_tasks(2, 0),
        0.0,
        2,
        1,
        0,
    )
    .unwrap_err();
    assert!(matches!(err, Error::TooManyEdges { active: 45, .. }));
}

#[test]
fn token_totals_match_a_recount_of_the_messages() {
    let topo = retrieval_topology();
    let reg = AgentRegistry::uniform(
        &topo,
        Arc::new(EchoAgent),
        Arc::new(ConstantAgent::new("done")),
    );
    let ctx = DialogueContext {
        topology: &topo,
        registry: &reg,
    };
    let m = topo.fully_connected();
    let task = &retrieval_tasks(1, 3)[0];
    let scope = SampleScope {
        blocks: &Block::ALL,
        order: None,
        inclusion: Inclusion::Support,
    };
    let sample = sample_dag_scoped(&m, &scope, 9).unwrap();
    let res = run_dialogue_on(&ctx, &m, &sample, task, 3, 9).unwrap();

    // recount from the outputs: every active edge carries its sender's content once per round
    let mut expect = 0;
    for (r, outs) in res.rounds.iter().enumerate() {
        for &(from, _) in &sample.active_spatial_edges {
            expect += count_tokens(&outs[from].content);
        }
        if r > 0 {
            for &(from, _) in &sample.active_temporal_edges {
                expect += count_tokens(&res.rounds[r - 1][from].content);
            }
        }
    }
    let last = res.rounds.last().unwrap();
    expect += last.iter().map(|o| count_tokens(&o.content)).sum::<u64>();
    assert_eq!(res.report.message_tokens, expect);

    let completion: u64 = res.invocations().map(|o| count_tokens(&o.content)).sum();
    assert_eq!(res.report.completion_tokens, completion);
    assert_eq!(res.report.invocations as usize, 3 * topo.len() + 1);

    let eval = evaluate(
        &topo,
        &m,
        &reg,
        &UtilityFn::custom(|_, _| 0.5),
        &retrieval_tasks(4, 3),
        2,
        1,
    )
    .unwrap();
    let per_task: u64 = eval.tasks.iter().map(|t| t.report.total_tokens()).sum();
    assert_eq!(eval.totals.total_tokens(), per_task);
    assert_eq!(eval.mean_utility, 0.5);
}
