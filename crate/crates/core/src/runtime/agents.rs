//! Agent trait and the offline agents used for tests and synthetic runs.
//!
//! Offline agents speak a tiny claim language: `answer=<word> source=<tag>`
//! where the tag is `evidence` (read from its own context), `relay` (adopted
//! from grounded messages) or `guess`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::{AggregatedMessage, ContextItem, TaskInstance};
use crate::graph::AgentNode;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct AgentError(pub String);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentReply {
    pub content: String,
    /// Backend-reported usage; whitespace counting is used when absent.
    pub usage: Option<TokenUsage>,
}

impl AgentReply {
    pub fn text(content: impl Into<String>) -> Self {
        AgentReply {
            content: content.into(),
            usage: None,
        }
    }
}

pub struct AgentRequest<'a> {
    pub node: &'a AgentNode,
    pub round: usize,
    pub task: &'a TaskInstance,
    pub contexts: Vec<&'a ContextItem>,
    pub memory: &'a [(usize, String)],
    pub message: &'a AggregatedMessage,
    pub seed: u64,
}

impl AgentRequest<'_> {
    pub fn render_user_prompt(&self) -> String {
        let mut s = format!("Question: {}\n", self.task.question);
        if !self.contexts.is_empty() {
            s.push_str("Context:\n");
            for c in &self.contexts {
                let _ = writeln!(s, "- [{}] {}", c.modality.short(), c.content);
            }
        }
        if !self.memory.is_empty() {
            s.push_str("Your earlier answers:\n");
            for (round, m) in self.memory {
                let _ = writeln!(s, "- round {round}: {m}");
            }
        }
        if !self.message.is_empty() {
            s.push_str("Messages:\n");
            s.push_str(&self.message.rendered);
        }
        let _ = write!(s, "Round {}. Answer as {}.", self.round, self.node.role);
        s
    }
}

pub trait Agent: Send + Sync {
    fn name(&self) -> &str;
    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Claim {
    pub answer: String,
    pub source: String,
}

impl Claim {
    pub fn parse(content: &str) -> Option<Claim> {
        let mut answer = None;
        let mut source = None;
        for tok in content.split_whitespace() {
            if let Some(a) = tok.strip_prefix("answer=") {
                answer.get_or_insert_with(|| a.to_string());
            } else if let Some(s) = tok.strip_prefix("source=") {
                source.get_or_insert_with(|| s.to_string());
            }
        }
        Some(Claim {
            answer: answer?,
            source: source.unwrap_or_else(|| "guess".into()),
        })
    }

    pub fn grounded(&self) -> bool {
        self.answer != "none" && (self.source == "evidence" || self.source == "relay")
    }

    pub fn render(&self) -> String {
        format!("answer={} source={}", self.answer, self.source)
    }
}

fn context_value<'a>(contexts: &[&'a ContextItem], key: &str) -> Option<&'a str> {
    contexts.iter().find_map(|c| {
        c.content
            .trim()
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(':'))
            .map(|r| r.trim())
            .filter(|r| !r.is_empty())
    })
}

/// Reads evidence if it has any; otherwise follows the weighted majority of
/// grounded claims it hears (its own last answer counts with weight one);
/// otherwise falls back to its hint.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReasonerAgent;

impl Agent for ReasonerAgent {
    fn name(&self) -> &str {
        "reasoner"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        if let Some(ev) = context_value(&req.contexts, "evidence") {
            return Ok(AgentReply::text(
                Claim {
                    answer: ev.to_string(),
                    source: "evidence".into(),
                }
                .render(),
            ));
        }
        let mut scores: BTreeMap<String, f64> = BTreeMap::new();
        for m in req.message.all() {
            if let Some(c) = Claim::parse(&m.content).filter(Claim::grounded) {
                *scores.entry(c.answer).or_default() += m.weight;
            }
        }
        if let Some(c) = req
            .memory
            .last()
            .and_then(|(_, s)| Claim::parse(s))
            .filter(Claim::grounded)
        {
            *scores.entry(c.answer).or_default() += 1.0;
        }
        // BTreeMap iteration makes the tie-break the lexicographically first answer.
        let best = scores
            .into_iter()
            .fold(None::<(String, f64)>, |acc, (a, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((a, s)),
            });
        let claim = match best {
            Some((answer, _)) => Claim {
                answer,
                source: "relay".into(),
            },
            None => Claim {
                answer: context_value(&req.contexts, "hint")
                    .unwrap_or("none")
                    .to_string(),
                source: "guess".into(),
            },
        };
        Ok(AgentReply::text(claim.render()))
    }
}

/// Plurality over parsed answers in the incoming messages; a tie yields
/// `answer=unknown`.
#[derive(Clone, Copy, Debug, Default)]
pub struct VoteSummary;

impl Agent for VoteSummary {
    fn name(&self) -> &str {
        "vote"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        let mut votes: BTreeMap<String, usize> = BTreeMap::new();
        for m in req.message.all() {
            if let Some(c) = Claim::parse(&m.content).filter(|c| c.answer != "none") {
                *votes.entry(c.answer).or_default() += 1;
            }
        }
        let max = votes.values().copied().max().unwrap_or(0);
        let top: Vec<_> = votes.iter().filter(|(_, &v)| v == max).collect();
        let answer = match top.as_slice() {
            [(a, _)] => a.as_str(),
            _ => "unknown",
        };
        Ok(AgentReply::text(format!("answer={answer}")))
    }
}

/// Joins every incoming message.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConcatSummary;

impl Agent for ConcatSummary {
    fn name(&self) -> &str {
        "concat"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        let parts: Vec<&str> = req.message.all().map(|m| m.content.as_str()).collect();
        Ok(AgentReply::text(parts.join(" | ")))
    }
}

/// Emits a marker for itself followed by the first token of each message.
#[derive(Clone, Copy, Debug, Default)]
pub struct EchoAgent;

impl Agent for EchoAgent {
    fn name(&self) -> &str {
        "echo"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        let mut out = format!("n{}", req.node.id);
        for m in req.message.all() {
            if let Some(tok) = m.content.split_whitespace().next() {
                out.push(' ');
                out.push_str(tok);
            }
        }
        Ok(AgentReply::text(out))
    }
}

#[derive(Clone, Debug)]
pub struct ConstantAgent(pub String);

impl ConstantAgent {
    pub fn new(text: impl Into<String>) -> Self {
        ConstantAgent(text.into())
    }
}

impl Agent for ConstantAgent {
    fn name(&self) -> &str {
        "constant"
    }

    fn respond(&self, _req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        Ok(AgentReply::text(self.0.clone()))
    }
}

/// Lists the edges it received messages on this round as `s<from>-<to>`
/// (spatial) and `t<from>-<to>` (temporal) tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct TraceAgent;

impl Agent for TraceAgent {
    fn name(&self) -> &str {
        "trace"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        let me = req.node.id;
        let mut toks = vec![format!("n{me}")];
        toks.extend(
            req.message
                .spatial
                .iter()
                .map(|m| format!("s{}-{me}", m.sender)),
        );
        toks.extend(
            req.message
                .temporal
                .iter()
                .map(|m| format!("t{}-{me}", m.sender)),
        );
        Ok(AgentReply::text(toks.join(" ")))
    }
}

#[derive(Clone, Debug)]
pub struct FailingAgent(pub String);

impl Agent for FailingAgent {
    fn name(&self) -> &str {
        "failing"
    }

    fn respond(&self, _req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        Err(AgentError(self.0.clone()))
    }
}

/// Simulates a corrupted input channel: the agent only sees its own
/// contexts, never the messages or its memory.
#[derive(Clone, Copy, Debug, Default)]
pub struct InputAttackAgent;

impl Agent for InputAttackAgent {
    fn name(&self) -> &str {
        "input_attack"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        let claim = if let Some(ev) = context_value(&req.contexts, "evidence") {
            Claim {
                answer: ev.into(),
                source: "evidence".into(),
            }
        } else {
            Claim {
                answer: context_value(&req.contexts, "hint")
                    .unwrap_or("none")
                    .into(),
                source: "guess".into(),
            }
        };
        Ok(AgentReply::text(claim.render()))
    }
}

/// A deceptive agent: asserts a wrong answer as if it read it from evidence.
#[derive(Clone, Copy, Debug, Default)]
pub struct ResponseAttackAgent;

impl Agent for ResponseAttackAgent {
    fn name(&self) -> &str {
        "response_attack"
    }

    fn respond(&self, req: &AgentRequest<'_>) -> Result<AgentReply, AgentError> {
        let truth = context_value(&req.contexts, "evidence");
        let mut candidates: Vec<String> = context_value(&req.contexts, "hint")
            .into_iter()
            .map(String::from)
            .collect();
        if candidates.is_empty() {
            let mut heard: Vec<String> = req
                .message
                .all()
                .filter_map(|m| Claim::parse(&m.content))
                .map(|c| c.answer)
                .filter(|a| a != "none" && Some(a.as_str()) != truth)
                .collect();
            heard.sort();
            candidates.extend(heard);
        }
        let answer = candidates
            .into_iter()
            .find(|a| Some(a.as_str()) != truth)
            .unwrap_or_else(|| "counterfeit".into());
        Ok(AgentReply::text(
            Claim {
                answer,
                source: "evidence".into(),
            }
            .render(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Modality;
    use crate::runtime::Message;

    fn node(id: usize) -> AgentNode {
        AgentNode {
            id,
            modality: Modality::Text,
            role: format!("R{id}"),
            prompt_template: "You are helpful.".into(),
        }
    }

    fn task(ctx: &[&str]) -> TaskInstance {
        TaskInstance {
            question: "q?".into(),
            contexts: ctx
                .iter()
                .map(|c| ContextItem {
                    modality: Modality::Text,
                    content: c.to_string(),
                    visible_to: None,
                })
                .collect(),
            gold_answer: None,
        }
    }

    fn msg(sender: usize, weight: f64, content: &str) -> Message {
        Message {
            sender,
            role: format!("R{sender}"),
            weight,
            content: content.into(),
        }
    }

    fn ask(
        agent: &dyn Agent,
        t: &TaskInstance,
        msgs: Vec<Message>,
        memory: &[(usize, String)],
    ) -> String {
        let n = node(9);
        let agg = AggregatedMessage::new(msgs, vec![]);
        let req = AgentRequest {
            node: &n,
            round: 1,
            task: t,
            contexts: t.contexts.iter().collect(),
            memory,
            message: &agg,
            seed: 0,
        };
        agent.respond(&req).unwrap().content
    }

    #[test]
    fn reasoner_prefers_evidence_then_weighted_relay_then_hint() {
        let t = task(&["evidence: apple"]);
        assert_eq!(
            ask(&ReasonerAgent, &t, vec![], &[]),
            "answer=apple source=evidence"
        );

        let t = task(&["hint: pear"]);
        let heard = vec![
            msg(0, 0.7, "answer=plum source=relay"),
            msg(1, 0.3, "answer=fig source=evidence"),
            msg(2, 0.9, "answer=kiwi source=guess"),
        ];
        assert_eq!(
            ask(&ReasonerAgent, &t, heard, &[]),
            "answer=plum source=relay"
        );
        assert_eq!(
            ask(&ReasonerAgent, &t, vec![], &[]),
            "answer=pear source=guess"
        );
        assert_eq!(
            ask(&ReasonerAgent, &task(&[]), vec![], &[]),
            "answer=none source=guess"
        );

        let mem = vec![(1, "answer=fig source=relay".to_string())];
        let heard = vec![msg(0, 0.7, "answer=plum source=relay")];
        assert_eq!(
            ask(&ReasonerAgent, &t, heard, &mem),
            "answer=fig source=relay"
        );
    }

    #[test]
    fn vote_summary_plurality_and_ties() {
        let t = task(&[]);
        let msgs = vec![
            msg(0, 0.2, "answer=a source=relay"),
            msg(1, 0.2, "answer=a source=guess"),
            msg(2, 0.2, "answer=b source=evidence"),
            msg(3, 0.2, "answer=none source=guess"),
        ];
        assert_eq!(ask(&VoteSummary, &t, msgs, &[]), "answer=a");
        let tie = vec![msg(0, 0.5, "answer=a"), msg(1, 0.5, "answer=b")];
        assert_eq!(ask(&VoteSummary, &t, tie, &[]), "answer=unknown");
    }

    #[test]
    fn response_attack_never_tells_the_truth() {
        let t = task(&["evidence: apple"]);
        let out = ask(
            &ResponseAttackAgent,
            &t,
            vec![msg(0, 1.0, "answer=apple source=relay")],
            &[],
        );
        assert_eq!(out, "answer=counterfeit source=evidence");
        let t = task(&["hint: pear"]);
        assert_eq!(
            ask(&ResponseAttackAgent, &t, vec![], &[]),
            "answer=pear source=evidence"
        );
    }

    #[test]
    fn input_attack_ignores_messages() {
        let t = task(&["hint: pear"]);
        let heard = vec![msg(0, 1.0, "answer=plum source=evidence")];
        assert_eq!(
            ask(&InputAttackAgent, &t, heard, &[]),
            "answer=pear source=guess"
        );
    }

    #[test]
    fn claim_parse() {
        assert_eq!(
            Claim::parse("x answer=a y source=relay"),
            Some(Claim {
                answer: "a".into(),
                source: "relay".into()
            })
        );
        assert_eq!(Claim::parse("nothing here"), None);
    }
}
