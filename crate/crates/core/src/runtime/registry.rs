//! Mapping from agent nodes to backends.

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::agents::{
    Agent, ConcatSummary, ConstantAgent, EchoAgent, InputAttackAgent, ReasonerAgent,
    ResponseAttackAgent, TraceAgent, VoteSummary,
};
use super::remote::{RemoteBackend, RemoteConfig};
use crate::error::{Error, Result};
use crate::graph::{AgentNode, CommTopology};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Reasoner,
    Echo,
    Trace,
    Constant(String),
    Vote,
    Concat,
    InputAttack,
    ResponseAttack,
    Remote,
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(text) = s.strip_prefix("constant:") {
            return Ok(BackendSpec::Constant(text.to_string()));
        }
        Ok(match s {
            "reasoner" => BackendSpec::Reasoner,
            "echo" => BackendSpec::Echo,
            "trace" => BackendSpec::Trace,
            "vote" => BackendSpec::Vote,
            "concat" => BackendSpec::Concat,
            "input_attack" => BackendSpec::InputAttack,
            "response_attack" => BackendSpec::ResponseAttack,
            "remote" => BackendSpec::Remote,
            other => {
                return Err(Error::Config(format!(
                    "unknown backend `{other}` (expected reasoner, echo, trace, constant:<text>, vote, concat, input_attack, response_attack or remote)"
                )))
            }
        })
    }
}

impl BackendSpec {
    pub fn build(&self, remote: Option<&RemoteConfig>) -> Result<Arc<dyn Agent>> {
        Ok(match self {
            BackendSpec::Reasoner => Arc::new(ReasonerAgent),
            BackendSpec::Echo => Arc::new(EchoAgent),
            BackendSpec::Trace => Arc::new(TraceAgent),
            BackendSpec::Constant(t) => Arc::new(ConstantAgent::new(t.clone())),
            BackendSpec::Vote => Arc::new(VoteSummary),
            BackendSpec::Concat => Arc::new(ConcatSummary),
            BackendSpec::InputAttack => Arc::new(InputAttackAgent),
            BackendSpec::ResponseAttack => Arc::new(ResponseAttackAgent),
            BackendSpec::Remote => {
                let cfg = match remote {
                    Some(c) => c.clone().with_env_token(),
                    None => RemoteConfig::from_env()?,
                };
                Arc::new(RemoteBackend::new(cfg))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrySpec {
    pub agent_backend: String,
    pub summary_backend: String,
    pub summary_role: String,
    pub summary_prompt: String,
    /// Per-role backend overrides.
    pub overrides: BTreeMap<String, String>,
}

impl Default for RegistrySpec {
    fn default() -> Self {
        RegistrySpec {
            agent_backend: "reasoner".into(),
            summary_backend: "vote".into(),
            summary_role: "Summary Agent".into(),
            summary_prompt: "Combine the team's final answers into one answer.".into(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Clone)]
pub struct AgentRegistry {
    agents: Vec<Arc<dyn Agent>>,
    summary: Arc<dyn Agent>,
    summary_role: String,
    summary_prompt: String,
}

impl AgentRegistry {
    pub fn uniform(
        topology: &CommTopology,
        agent: Arc<dyn Agent>,
        summary: Arc<dyn Agent>,
    ) -> Self {
        let d = RegistrySpec::default();
        AgentRegistry {
            agents: vec![agent; topology.len()],
            summary,
            summary_role: d.summary_role,
            summary_prompt: d.summary_prompt,
        }
    }

    pub fn from_agents(agents: Vec<Arc<dyn Agent>>, summary: Arc<dyn Agent>) -> Self {
        let d = RegistrySpec::default();
        AgentRegistry {
            agents,
            summary,
            summary_role: d.summary_role,
            summary_prompt: d.summary_prompt,
        }
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn agent(&self, node: usize) -> &dyn Agent {
        self.agents[node].as_ref()
    }

    pub fn summary(&self) -> &dyn Agent {
        self.summary.as_ref()
    }

    pub fn summary_node(&self, topology: &CommTopology) -> AgentNode {
        super::summary_node_for(topology, &self.summary_role, &self.summary_prompt)
    }

    pub fn names(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.name().to_string()).collect()
    }

    /// Swap one node's backend, e.g. to place an adversary.
    pub fn replace(&mut self, node: usize, agent: Arc<dyn Agent>) -> Result<()> {
        let n = self.agents.len();
        let slot = self
            .agents
            .get_mut(node)
            .ok_or_else(|| Error::Config(format!("node {node} out of range for {n} agents")))?;
        *slot = agent;
        Ok(())
    }

    pub fn check_covers(&self, topology: &CommTopology) -> Result<()> {
        if self.agents.len() != topology.len() {
            return Err(Error::Config(format!(
                "registry has {} backends but the topology has {} agents",
                self.agents.len(),
                topology.len()
            )));
        }
        Ok(())
    }
}

/// Resolve a backend for every node. Remote backends are created lazily and
/// do not contact the endpoint here.
pub fn register_agent_backends(
    topology: &CommTopology,
    spec: &RegistrySpec,
    remote: Option<&RemoteConfig>,
) -> Result<AgentRegistry> {
    let roles: Vec<&str> = topology.nodes().iter().map(|n| n.role.as_str()).collect();
    if let Some(unknown) = spec.overrides.keys().find(|r| !roles.contains(&r.as_str())) {
        return Err(Error::Config(format!(
            "backend override for unknown role `{unknown}`"
        )));
    }
    let mut cache: BTreeMap<String, Arc<dyn Agent>> = BTreeMap::new();
    let mut resolve = |name: &str| -> Result<Arc<dyn Agent>> {
        if let Some(a) = cache.get(name) {
            return Ok(a.clone());
        }
        let a = name.parse::<BackendSpec>()?.build(remote)?;
        cache.insert(name.to_string(), a.clone());
        Ok(a)
    };
    let agents = topology
        .nodes()
        .iter()
        .map(|n| {
            resolve(
                spec.overrides
                    .get(&n.role)
                    .map_or(&spec.agent_backend, |s| s),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = resolve(&spec.summary_backend)?;
    Ok(AgentRegistry {
        agents,
        summary,
        summary_role: spec.summary_role.clone(),
        summary_prompt: spec.summary_prompt.clone(),
    })
}
