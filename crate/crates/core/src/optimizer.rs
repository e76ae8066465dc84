//! Score-function gradient estimation over sampled graphs, logit updates and
//! progressive pruning.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    sample_dag_scoped, Block, CommTopology, DagSample, EdgeKind, EdgeMatrices, Inclusion, MatrixId,
    SampleScope,
};
use crate::objective::{
    alignment_loss_grad, frobenius_penalty_grad, masked_nuclear_subgradient, ObjectiveWeights,
    UtilityFn,
};
use crate::rng::{derive_seed, rng_for};
use crate::runtime::{
    run_dialogue_on, AgentRegistry, DialogueContext, TaskInstance, UtilityReport,
};

pub const LOGIT_MIN: f64 = 1e-4;
pub const LOGIT_MAX: f64 = 1.0 - 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    /// Product over included edges only.
    Paper,
    /// Bernoulli likelihood: included edges contribute `log p`, excluded `log(1 - p)`.
    #[default]
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    /// Mean utility of the whole batch of samples (scales the expectation by (K-1)/K).
    Mean,
    /// Mean utility of the other K-1 samples; unbiased.
    #[default]
    LeaveOneOut,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// Fresh topological order per sample.
    #[default]
    PerSample,
    /// One order per estimate, shared by its K samples.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub rounds: usize,
    pub samples: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub initial_prune_rate: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub likelihood: LikelihoodMode,
    pub baseline: Baseline,
    pub order_mode: OrderMode,
    /// Pin the topological order of every sample (diagnostics only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_order: Option<Vec<usize>>,
    pub weights: ObjectiveWeights,
    pub rng_seed: u64,
    /// Write a checkpoint every N optimizer steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            rounds: 2,
            samples: 10,
            learning_rate: 0.1,
            temperature: 1.0,
            initial_prune_rate: 0.2,
            stage1_steps: 10,
            stage2_steps: 10,
            batch_size: 4,
            likelihood: LikelihoodMode::Full,
            baseline: Baseline::LeaveOneOut,
            order_mode: OrderMode::PerSample,
            fixed_order: None,
            weights: ObjectiveWeights::default(),
            rng_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.samples == 0 {
            return bad("samples (K) must be at least 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds (T) must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(0.0..1.0).contains(&self.initial_prune_rate) {
            return bad(format!(
                "initial_prune_rate must be in [0, 1), got {}",
                self.initial_prune_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.weights.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    IntraText,
    IntraVisual,
    Inter,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::IntraText, Stage::IntraVisual, Stage::Inter];

    pub fn name(self) -> &'static str {
        match self {
            Stage::IntraText => "intra_text",
            Stage::IntraVisual => "intra_visual",
            Stage::Inter => "inter",
        }
    }

    pub fn trainable_blocks(self) -> &'static [Block] {
        match self {
            Stage::IntraText => &[Block::TextText],
            Stage::IntraVisual => &[Block::VisualVisual],
            Stage::Inter => &Block::INTER,
        }
    }

    /// Blocks whose edges take part in message passing during this stage.
    pub fn sampled_blocks(self) -> &'static [Block] {
        match self {
            Stage::IntraText => &[Block::TextText],
            Stage::IntraVisual => &[Block::VisualVisual],
            Stage::Inter => &Block::ALL,
        }
    }

    pub fn trainable(self) -> Vec<MatrixId> {
        MatrixId::for_blocks(self.trainable_blocks())
    }

    pub fn index(self) -> u64 {
        self as u64
    }
}

pub type BlockGrads = BTreeMap<MatrixId, DMatrix<f64>>;

fn zero_grads(m: &EdgeMatrices) -> BlockGrads {
    MatrixId::all()
        .map(|id| {
            let b = m.block(id);
            (id, DMatrix::zeros(b.logits.nrows(), b.logits.ncols()))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradientEstimate {
    pub grads: BlockGrads,
    pub utilities: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub mean_utility: f64,
    pub utility_variance: f64,
    pub report: UtilityReport,
}

/// What a rollout needs apart from the edge state.
pub struct RolloutEnv<'a> {
    pub topology: &'a CommTopology,
    pub registry: &'a AgentRegistry,
    pub utility: &'a UtilityFn,
    pub rounds: usize,
}

/// Mean utility of one sampled graph over a batch of tasks.
pub fn rollout_utility(
    env: &RolloutEnv<'_>,
    matrices: &EdgeMatrices,
    sample: &DagSample,
    tasks: &[TaskInstance],
    seed: u64,
) -> Result<(f64, UtilityReport)> {
    let ctx = DialogueContext {
        topology: env.topology,
        registry: env.registry,
    };
    let mut report = UtilityReport::default();
    let mut total = 0.0;
    for (i, task) in tasks.iter().enumerate() {
        let res = run_dialogue_on(
            &ctx,
            matrices,
            sample,
            task,
            env.rounds,
            derive_seed(seed, &[i as u64]),
        )?;
        total += env.utility.score(&res.final_answer.content, task)?;
        report.absorb(&res.report);
    }
    let mean = total / tasks.len() as f64;
    report.utility = Some(mean);
    Ok((mean, report))
}

/// ∂ log P(sample) / ∂ logits, accumulated into `out`.
fn add_score(
    matrices: &EdgeMatrices,
    sample: &DagSample,
    mode: LikelihoodMode,
    scale: f64,
    out: &mut BlockGrads,
) {
    for d in &sample.decisions {
        let g = if d.included {
            1.0 / d.prob
        } else {
            match mode {
                LikelihoodMode::Full => -1.0 / (1.0 - d.prob),
                LikelihoodMode::Paper => 0.0,
            }
        };
        if g != 0.0 {
            let (id, r, c) = matrices.locate(d.kind, d.from, d.to);
            out.get_mut(&id).expect("all matrices present")[(r, c)] += scale * g;
        }
    }
}

/// Draw `cfg.samples` graphs restricted to `blocks`, run the batch on each,
/// and return the score-function estimate of ∇E[φ].
pub fn estimate_policy_gradient(
    env: &RolloutEnv<'_>,
    matrices: &EdgeMatrices,
    tasks: &[TaskInstance],
    blocks: &[Block],
    cfg: &TrainerConfig,
    seed: u64,
) -> Result<GradientEstimate> {
    if tasks.is_empty() {
        return Err(Error::Config(
            "policy-gradient estimate needs at least one task".into(),
        ));
    }
    if cfg.samples == 0 {
        return Err(Error::Config("samples (K) must be at least 1".into()));
    }
    let k = cfg.samples;
    let shared_order: Option<Vec<usize>> = match (&cfg.fixed_order, cfg.order_mode) {
        (Some(o), _) => Some(o.clone()),
        (None, OrderMode::Shared) => {
            let mut o: Vec<usize> = (0..matrices.n_nodes()).collect();
            o.shuffle(&mut rng_for(seed, &[0x6f72_6465]));
            Some(o)
        }
        (None, OrderMode::PerSample) => None,
    };

    let rollouts: Vec<(DagSample, f64, UtilityReport)> = (0..k)
        .into_par_iter()
        .map(|i| {
            let s_seed = derive_seed(seed, &[i as u64]);
            let scope = SampleScope {
                blocks,
                order: shared_order.as_deref(),
                inclusion: Inclusion::Bernoulli,
            };
            let sample = sample_dag_scoped(matrices, &scope, s_seed)?;
            let (u, rep) = rollout_utility(env, matrices, &sample, tasks, s_seed)?;
            Ok((sample, u, rep))
        })
        .collect::<Result<_>>()?;

    let utilities: Vec<f64> = rollouts.iter().map(|r| r.1).collect();
    let sum: f64 = utilities.iter().sum();
    let mean = sum / k as f64;
    let variance = utilities.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / k as f64;

    let mut grads = zero_grads(matrices);
    let mut report = UtilityReport::default();
    for (sample, u, rep) in &rollouts {
        let b = match cfg.baseline {
            _ if k < 2 => 0.0,
            Baseline::None => 0.0,
            Baseline::Mean => mean,
            Baseline::LeaveOneOut => (sum - u) / (k - 1) as f64,
        };
        add_score(
            matrices,
            sample,
            cfg.likelihood,
            (u - b) / k as f64,
            &mut grads,
        );
        report.absorb(rep);
    }
    report.utility = Some(mean);
    Ok(GradientEstimate {
        grads,
        log_probs: rollouts.iter().map(|r| r.0.log_prob).collect(),
        utilities,
        mean_utility: mean,
        utility_variance: variance,
        report,
    })
}

fn constraint_groups(stage: Stage) -> Vec<[MatrixId; 2]> {
    let pair = |b| {
        [
            MatrixId::new(EdgeKind::Spatial, b),
            MatrixId::new(EdgeKind::Temporal, b),
        ]
    };
    match stage {
        Stage::IntraText => vec![pair(Block::TextText)],
        Stage::IntraVisual => vec![pair(Block::VisualVisual)],
        Stage::Inter => vec![pair(Block::TextVisual), pair(Block::VisualText)],
    }
}

/// Ascent direction of the full objective for `stage`; frozen matrices get zeros.
pub fn total_objective_gradient(
    matrices: &EdgeMatrices,
    pg: &GradientEstimate,
    weights: &ObjectiveWeights,
    stage: Stage,
) -> Result<BlockGrads> {
    let mut out = zero_grads(matrices);
    let trainable = stage.trainable();
    for &id in &trainable {
        let b = matrices.block(id);
        let mut g = pg.grads[&id].component_mul(&b.adjacency);
        if weights.sparsity_coeff != 0.0 {
            g -= masked_nuclear_subgradient(&b.logits, &b.adjacency)? * weights.sparsity_coeff;
        }
        out.insert(id, g);
    }

    if weights.constraint_coeff != 0.0 {
        let eps = if stage == Stage::Inter {
            weights.noise_inter
        } else {
            weights.noise_intra
        };
        for group in constraint_groups(stage) {
            let pairs: Vec<_> = group
                .iter()
                .map(|&id| (&matrices.block(id).adjacency, &matrices.block(id).logits))
                .collect();
            for (id, pg) in group.iter().zip(frobenius_penalty_grad(&pairs, eps)?) {
                let adj = &matrices.block(*id).adjacency;
                *out.get_mut(id).expect("present") -=
                    pg.component_mul(adj) * weights.constraint_coeff;
            }
        }
    }

    if stage == Stage::Inter && weights.align_coeff != 0.0 {
        for kind in EdgeKind::ALL {
            let tv = MatrixId::new(kind, Block::TextVisual);
            let vt = MatrixId::new(kind, Block::VisualText);
            let (ga, gb) = alignment_loss_grad(
                &matrices.block(tv).logits,
                &matrices.block(vt).logits,
                weights.align_normalization,
            )?;
            *out.get_mut(&tv).expect("present") +=
                ga.component_mul(&matrices.block(tv).adjacency) * weights.align_coeff;
            *out.get_mut(&vt).expect("present") +=
                gb.component_mul(&matrices.block(vt).adjacency) * weights.align_coeff;
        }
    }
    Ok(out)
}

/// `logits + η·grad`, clipped to `[LOGIT_MIN, LOGIT_MAX]` on the support.
/// Entries with zero gradient are left exactly as they are.
pub fn apply_update(matrices: &EdgeMatrices, grads: &BlockGrads, eta: f64) -> Result<EdgeMatrices> {
    let mut out = matrices.clone();
    for (&id, g) in grads {
        let b = out.block_mut(id);
        if g.shape() != b.logits.shape() {
            return Err(Error::Shape(format!(
                "{id}: gradient {:?} vs logits {:?}",
                g.shape(),
                b.logits.shape()
            )));
        }
        if let Some((i, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (i % g.nrows(), i / g.nrows());
            return Err(Error::Numerical(format!(
                "non-finite gradient {v} at {id}[{r},{c}]"
            )));
        }
        for r in 0..b.logits.nrows() {
            for c in 0..b.logits.ncols() {
                if b.adjacency[(r, c)] == 0.0 {
                    b.logits[(r, c)] = 0.0;
                } else if g[(r, c)] != 0.0 {
                    let v = b.logits[(r, c)] + eta * g[(r, c)];
                    b.logits[(r, c)] = v.clamp(LOGIT_MIN, LOGIT_MAX);
                }
            }
        }
    }
    Ok(out)
}

/// `p_prev · exp(-t / horizon)`.
pub fn schedule_rate(p_prev: f64, t: usize, horizon: usize) -> f64 {
    debug_assert!((0.0..1.0).contains(&p_prev));
    debug_assert!(t >= 1 && t <= horizon);
    p_prev * (-(t as f64) / horizon as f64).exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub masks: BTreeMap<MatrixId, Vec<Vec<u8>>>,
    pub step: usize,
    pub rate: f64,
}

pub fn retained_count(active: usize, rate: f64) -> usize {
    ((active as f64) * (1.0 - rate)).ceil() as usize
}

/// Keep the `ceil(|A|(1 - p))` largest logits of each listed matrix; ties
/// keep the smaller (row, col).
pub fn prune_step(
    matrices: &EdgeMatrices,
    ids: &[MatrixId],
    rate: f64,
    step: usize,
) -> (EdgeMatrices, PruneMask) {
    let mut out = matrices.clone();
    let mut masks = BTreeMap::new();
    for &id in ids {
        let b = out.block_mut(id);
        let mut support = b.support();
        let keep = retained_count(support.len(), rate);
        // stable sort on descending logit; support is already row-major
        support.sort_by(|x, y| b.logits[*y].total_cmp(&b.logits[*x]));
        let mut mask = DMatrix::<f64>::zeros(b.adjacency.nrows(), b.adjacency.ncols());
        for &rc in support.iter().take(keep) {
            mask[rc] = 1.0;
        }
        b.adjacency.component_mul_assign(&mask);
        b.logits.component_mul_assign(&mask);
        masks.insert(
            id,
            crate::graph::rows_of(&mask)
                .into_iter()
                .map(|r| r.into_iter().map(|v| v as u8).collect())
                .collect(),
        );
    }
    (out, PruneMask { masks, step, rate })
}
