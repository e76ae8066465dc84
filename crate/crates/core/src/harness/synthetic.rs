//! Synthetic retrieval tasks whose answer is only visible to signal agents.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Modality;
use crate::rng::rng_for;
use crate::runtime::{ContextItem, TaskInstance};

pub const DEFAULT_VOCABULARY: [&str; 24] = [
    "amber", "birch", "cobalt", "delta", "ember", "fjord", "garnet", "harbor", "indigo", "jasper",
    "kestrel", "lumen", "mesa", "nickel", "onyx", "prairie", "quartz", "russet", "sierra",
    "tundra", "umber", "violet", "willow", "zephyr",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub n_tasks: usize,
    /// Number of text agents; ids below it are text, the rest visual.
    pub n_text: usize,
    pub signal_agents: Vec<usize>,
    pub noise_agents: Vec<usize>,
    #[serde(default = "default_vocabulary")]
    pub vocabulary: Vec<String>,
    pub seed: u64,
}

fn default_vocabulary() -> Vec<String> {
    DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect()
}

impl SyntheticTaskSpec {
    pub fn new(
        n_tasks: usize,
        n_text: usize,
        signal_agents: Vec<usize>,
        noise_agents: Vec<usize>,
        seed: u64,
    ) -> Self {
        SyntheticTaskSpec {
            n_tasks,
            n_text,
            signal_agents,
            noise_agents,
            vocabulary: default_vocabulary(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let signal: BTreeSet<_> = self.signal_agents.iter().collect();
        let noise: BTreeSet<_> = self.noise_agents.iter().collect();
        if let Some(both) = signal.intersection(&noise).next() {
            return Err(Error::Config(format!(
                "agent {both} is both a signal and a noise agent"
            )));
        }
        if signal.len() != self.signal_agents.len() || noise.len() != self.noise_agents.len() {
            return Err(Error::Config("agent sets contain duplicates".into()));
        }
        if self.vocabulary.len() < self.noise_agents.len() + 1 {
            return Err(Error::Config(format!(
                "vocabulary of {} words cannot give {} distinct decoys plus an answer",
                self.vocabulary.len(),
                self.noise_agents.len()
            )));
        }
        for (i, a) in self.vocabulary.iter().enumerate() {
            if a.is_empty() || a.split_whitespace().count() != 1 || a.contains('=') {
                return Err(Error::Config(format!(
                    "vocabulary word `{a}` must be a single plain token"
                )));
            }
            if let Some(b) = self
                .vocabulary
                .iter()
                .enumerate()
                .find(|&(j, b)| j != i && b.contains(a.as_str()))
            {
                return Err(Error::Config(format!(
                    "vocabulary word `{a}` occurs inside `{}`",
                    b.1
                )));
            }
        }
        Ok(())
    }

    fn modality(&self, node: usize) -> Modality {
        if node < self.n_text {
            Modality::Text
        } else {
            Modality::Visual
        }
    }
}

/// Signal agents see `evidence: <gold>`; each noise agent sees its own
/// `hint: <decoy>` with decoys distinct from each other and from the gold.
pub fn gen_synthetic_tasks(spec: &SyntheticTaskSpec) -> Result<Vec<TaskInstance>> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[0x7379_6e74]);
    let mut out = Vec::with_capacity(spec.n_tasks);
    for i in 0..spec.n_tasks {
        let gold = spec
            .vocabulary
            .choose(&mut rng)
            .expect("non-empty vocabulary")
            .clone();
        let mut rest: Vec<&String> = spec.vocabulary.iter().filter(|w| **w != gold).collect();
        rest.shuffle(&mut rng);
        let mut contexts: Vec<ContextItem> = spec
            .signal_agents
            .iter()
            .map(|&a| ContextItem {
                modality: spec.modality(a),
                content: format!("evidence: {gold}"),
                visible_to: Some(vec![a]),
            })
            .collect();
        contexts.extend(
            spec.noise_agents
                .iter()
                .zip(rest)
                .map(|(&a, decoy)| ContextItem {
                    modality: spec.modality(a),
                    content: format!("hint: {decoy}"),
                    visible_to: Some(vec![a]),
                }),
        );
        out.push(TaskInstance {
            question: format!("Task {i}: which codeword does the retrieved record name?"),
            contexts,
            gold_answer: Some(gold),
        });
    }
    Ok(out)
}
