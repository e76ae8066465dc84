//! Communication topology: agent nodes, the spatial/temporal edge families
//! split into modality blocks, trainable edge logits and DAG sampling.
//!
//! Matrices are indexed `[sender, receiver]`. Nodes are numbered globally
//! with all text agents first, then all visual agents; each block stores
//! its entries with local (within-modality) indices.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    pub fn short(self) -> &'static str {
        match self {
            Modality::Text => "txt",
            Modality::Visual => "vis",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Within-round links; must follow the sampled topological order.
    Spatial,
    /// Round `t` output delivered to round `t + 1`; self-links allowed.
    Temporal,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 2] = [EdgeKind::Spatial, EdgeKind::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Spatial => "spatial",
            EdgeKind::Temporal => "temporal",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    TextText,
    VisualVisual,
    TextVisual,
    VisualText,
}

impl Block {
    pub const ALL: [Block; 4] = [
        Block::TextText,
        Block::VisualVisual,
        Block::TextVisual,
        Block::VisualText,
    ];
    pub const INTRA: [Block; 2] = [Block::TextText, Block::VisualVisual];
    pub const INTER: [Block; 2] = [Block::TextVisual, Block::VisualText];

    pub fn between(src: Modality, dst: Modality) -> Block {
        match (src, dst) {
            (Modality::Text, Modality::Text) => Block::TextText,
            (Modality::Visual, Modality::Visual) => Block::VisualVisual,
            (Modality::Text, Modality::Visual) => Block::TextVisual,
            (Modality::Visual, Modality::Text) => Block::VisualText,
        }
    }

    pub fn src(self) -> Modality {
        match self {
            Block::TextText | Block::TextVisual => Modality::Text,
            Block::VisualVisual | Block::VisualText => Modality::Visual,
        }
    }

    pub fn dst(self) -> Modality {
        match self {
            Block::TextText | Block::VisualText => Modality::Text,
            Block::VisualVisual | Block::TextVisual => Modality::Visual,
        }
    }

    pub fn is_intra(self) -> bool {
        self.src() == self.dst()
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::TextText => "txt_txt",
            Block::VisualVisual => "vis_vis",
            Block::TextVisual => "txt_vis",
            Block::VisualText => "vis_txt",
        }
    }
}

/// One of the eight (kind, block) matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct MatrixId {
    pub kind: EdgeKind,
    pub block: Block,
}

impl MatrixId {
    pub const fn new(kind: EdgeKind, block: Block) -> Self {
        MatrixId { kind, block }
    }

    pub fn all() -> impl Iterator<Item = MatrixId> {
        EdgeKind::ALL.into_iter().flat_map(|kind| {
            Block::ALL
                .into_iter()
                .map(move |block| MatrixId { kind, block })
        })
    }

    /// Both kinds for each of the given blocks.
    pub fn for_blocks(blocks: &[Block]) -> Vec<MatrixId> {
        EdgeKind::ALL
            .into_iter()
            .flat_map(|kind| blocks.iter().map(move |&block| MatrixId { kind, block }))
            .collect()
    }

    fn index(self) -> usize {
        let k = match self.kind {
            EdgeKind::Spatial => 0,
            EdgeKind::Temporal => 4,
        };
        k + Block::ALL.iter().position(|&b| b == self.block).unwrap()
    }
}

impl fmt::Display for MatrixId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.kind.name(), self.block.name())
    }
}

impl From<MatrixId> for String {
    fn from(id: MatrixId) -> String {
        id.to_string()
    }
}

impl FromStr for MatrixId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatrixId::all()
            .find(|id| id.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown matrix id `{s}`")))
    }
}

impl TryFrom<String> for MatrixId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentNode {
    pub id: usize,
    pub modality: Modality,
    pub role: String,
    pub prompt_template: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub temperature: f64,
    pub rng_seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            temperature: 1.0,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CommTopology {
    nodes: Vec<AgentNode>,
    n_text: usize,
}

impl CommTopology {
    /// Complete spatial graph (no self-loops) and complete temporal graph
    /// (with self-loops) over all agents, within and across modalities.
    pub fn build(text_roles: &[String], visual_roles: &[String]) -> Result<Self> {
        if text_roles.is_empty() || visual_roles.is_empty() {
            return Err(Error::InvalidTopology(format!(
                "need at least one text and one visual role (got {} text, {} visual)",
                text_roles.len(),
                visual_roles.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = text_roles
            .iter()
            .chain(visual_roles)
            .find(|r| !seen.insert(r.as_str()))
        {
            return Err(Error::InvalidTopology(format!("duplicate role `{dup}`")));
        }
        let nodes = text_roles
            .iter()
            .map(|r| (Modality::Text, r))
            .chain(visual_roles.iter().map(|r| (Modality::Visual, r)))
            .enumerate()
            .map(|(id, (modality, role))| AgentNode {
                id,
                modality,
                role: role.clone(),
                prompt_template: default_prompt_template(role),
            })
            .collect();
        Ok(CommTopology {
            nodes,
            n_text: text_roles.len(),
        })
    }

    pub fn with_prompt_templates(mut self, templates: &BTreeMap<String, String>) -> Self {
        for node in &mut self.nodes {
            if let Some(t) = templates.get(&node.role) {
                node.prompt_template = t.clone();
            }
        }
        self
    }

    pub fn nodes(&self) -> &[AgentNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &AgentNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_visual(&self) -> usize {
        self.nodes.len() - self.n_text
    }

    pub fn text_roles(&self) -> Vec<String> {
        self.nodes[..self.n_text]
            .iter()
            .map(|n| n.role.clone())
            .collect()
    }

    pub fn visual_roles(&self) -> Vec<String> {
        self.nodes[self.n_text..]
            .iter()
            .map(|n| n.role.clone())
            .collect()
    }

    /// Adjacency as built, logits all zero.
    pub fn full_adjacency(&self) -> EdgeMatrices {
        EdgeMatrices::complete(self.n_text, self.n_visual())
    }

    /// Fixed fully-connected reference: every edge present with logit 1.
    pub fn fully_connected(&self) -> EdgeMatrices {
        let mut m = self.full_adjacency();
        for id in MatrixId::all() {
            let b = m.block_mut(id);
            b.logits = b.adjacency.clone();
        }
        m
    }
}

fn default_prompt_template(role: &str) -> String {
    format!("You are the {role}. Answer the question using the retrieved context and the viewpoints of other agents.")
}

/// Adjacency (0/1) and logits of one (kind, block) matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeBlock {
    pub adjacency: DMatrix<f64>,
    pub logits: DMatrix<f64>,
}

impl EdgeBlock {
    fn zeros(rows: usize, cols: usize) -> Self {
        EdgeBlock {
            adjacency: DMatrix::zeros(rows, cols),
            logits: DMatrix::zeros(rows, cols),
        }
    }

    pub fn active(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a != 0.0).count()
    }

    /// Local `(row, col)` pairs where adjacency is 1, row-major.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.adjacency.nrows() {
            for c in 0..self.adjacency.ncols() {
                if self.adjacency[(r, c)] != 0.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }
}

/// Per-matrix counts of adjacency ones.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeCounts(pub BTreeMap<MatrixId, usize>);

impl EdgeCounts {
    pub fn get(&self, id: MatrixId) -> usize {
        self.0.get(&id).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn kind_total(&self, kind: EdgeKind) -> usize {
        self.0
            .iter()
            .filter(|(id, _)| id.kind == kind)
            .map(|(_, c)| c)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMatrices {
    n_text: usize,
    n_visual: usize,
    blocks: Vec<EdgeBlock>,
}

impl EdgeMatrices {
    fn empty(n_text: usize, n_visual: usize) -> Self {
        let blocks = MatrixId::all()
            .map(|id| {
                let rows = modality_len(id.block.src(), n_text, n_visual);
                let cols = modality_len(id.block.dst(), n_text, n_visual);
                EdgeBlock::zeros(rows, cols)
            })
            .collect();
        EdgeMatrices {
            n_text,
            n_visual,
            blocks,
        }
    }

    fn complete(n_text: usize, n_visual: usize) -> Self {
        let mut m = Self::empty(n_text, n_visual);
        for id in MatrixId::all() {
            let b = m.block_mut(id);
            b.adjacency.fill(1.0);
            if id.kind == EdgeKind::Spatial && id.block.is_intra() {
                b.adjacency.fill_diagonal(0.0);
            }
        }
        m
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn n_nodes(&self) -> usize {
        self.n_text + self.n_visual
    }

    pub fn block(&self, id: MatrixId) -> &EdgeBlock {
        &self.blocks[id.index()]
    }

    pub fn block_mut(&mut self, id: MatrixId) -> &mut EdgeBlock {
        &mut self.blocks[id.index()]
    }

    pub fn modality(&self, node: usize) -> Modality {
        if node < self.n_text {
            Modality::Text
        } else {
            Modality::Visual
        }
    }

    fn local(&self, node: usize) -> usize {
        if node < self.n_text {
            node
        } else {
            node - self.n_text
        }
    }

    pub fn global(&self, modality: Modality, local: usize) -> usize {
        match modality {
            Modality::Text => local,
            Modality::Visual => self.n_text + local,
        }
    }

    /// Matrix id and local coordinates for a global edge.
    pub fn locate(&self, kind: EdgeKind, from: usize, to: usize) -> (MatrixId, usize, usize) {
        let block = Block::between(self.modality(from), self.modality(to));
        (MatrixId::new(kind, block), self.local(from), self.local(to))
    }

    pub fn adjacent(&self, kind: EdgeKind, from: usize, to: usize) -> bool {
        let (id, r, c) = self.locate(kind, from, to);
        self.block(id).adjacency[(r, c)] != 0.0
    }

    pub fn logit(&self, kind: EdgeKind, from: usize, to: usize) -> f64 {
        let (id, r, c) = self.locate(kind, from, to);
        self.block(id).logits[(r, c)]
    }

    /// Overwrite one global edge. Setting `present = false` also zeroes the logit.
    pub fn set_edge(&mut self, kind: EdgeKind, from: usize, to: usize, present: bool, logit: f64) {
        let (id, r, c) = self.locate(kind, from, to);
        let b = self.block_mut(id);
        b.adjacency[(r, c)] = if present { 1.0 } else { 0.0 };
        b.logits[(r, c)] = if present { logit } else { 0.0 };
    }

    /// Drop every edge of `kind` not listed (global coordinates).
    pub fn restrict(&mut self, kind: EdgeKind, keep: &[(usize, usize)]) {
        let n = self.n_nodes();
        for from in 0..n {
            for to in 0..n {
                if !keep.contains(&(from, to)) {
                    let logit = self.logit(kind, from, to);
                    self.set_edge(kind, from, to, false, logit);
                }
            }
        }
    }

    /// Gumbel-softmax initialisation of the given matrices: each row is a
    /// tempered softmax of `log A[i, j] + g_ij` with `g ~ Gumbel(0, 1)`,
    /// taken over adjacent entries only (non-edges have probability 0).
    pub fn init_logits(&mut self, ids: &[MatrixId], cfg: &GumbelConfig) -> Result<()> {
        if !cfg.temperature.is_finite() || cfg.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                cfg.temperature
            )));
        }
        for &id in ids {
            let mut rng = rng_for(cfg.rng_seed, &[0x6d62, id.index() as u64]);
            let b = self.block_mut(id);
            let (rows, cols) = b.adjacency.shape();
            for r in 0..rows {
                let scores: Vec<Option<f64>> = (0..cols)
                    .map(|c| {
                        if b.adjacency[(r, c)] != 0.0 {
                            Some(sample_gumbel(&mut rng) / cfg.temperature)
                        } else {
                            None
                        }
                    })
                    .collect();
                let max = scores
                    .iter()
                    .flatten()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
                for (c, s) in scores.iter().enumerate() {
                    b.logits[(r, c)] = match s {
                        Some(s) => (s - max).exp() / denom,
                        None => 0.0,
                    };
                }
            }
        }
        Ok(())
    }

    pub fn active_edge_count(&self) -> EdgeCounts {
        EdgeCounts(
            MatrixId::all()
                .map(|id| (id, self.block(id).active()))
                .collect(),
        )
    }

    /// Range and mask checks over all matrices.
    pub fn validate(&self) -> Result<()> {
        for id in MatrixId::all() {
            let b = self.block(id);
            for (a, l) in b.adjacency.iter().zip(b.logits.iter()) {
                if !(0.0..=1.0).contains(l) {
                    return Err(Error::CorruptState(format!(
                        "logit {l} outside [0,1] in {id}"
                    )));
                }
                if *a == 0.0 && *l != 0.0 {
                    return Err(Error::CorruptState(format!(
                        "nonzero logit {l} off the adjacency support in {id}"
                    )));
                }
                if *a != 0.0 && *a != 1.0 {
                    return Err(Error::CorruptState(format!(
                        "non-binary adjacency {a} in {id}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &EdgeMatrices) -> bool {
        self.n_text == other.n_text && self.n_visual == other.n_visual
    }

    pub fn to_file(&self, topology: &CommTopology, rng_seed: u64) -> TopologyFile {
        TopologyFile {
            text_roles: topology.text_roles(),
            visual_roles: topology.visual_roles(),
            rng_seed,
            blocks: MatrixId::all()
                .map(|id| {
                    let b = self.block(id);
                    BlockRecord {
                        id,
                        adjacency: rows_of(&b.adjacency)
                            .into_iter()
                            .map(|r| r.into_iter().map(|v| v as u8).collect())
                            .collect(),
                        logits: rows_of(&b.logits),
                    }
                })
                .collect(),
        }
    }

    pub fn from_file(file: &TopologyFile) -> Result<(CommTopology, EdgeMatrices)> {
        let topology = CommTopology::build(&file.text_roles, &file.visual_roles)?;
        let mut m = EdgeMatrices::empty(topology.n_text(), topology.n_visual());
        for rec in &file.blocks {
            let b = m.block_mut(rec.id);
            let (rows, cols) = b.adjacency.shape();
            let shape_ok = rec.adjacency.len() == rows
                && rec.logits.len() == rows
                && rec.adjacency.iter().all(|r| r.len() == cols)
                && rec.logits.iter().all(|r| r.len() == cols);
            if !shape_ok {
                return Err(Error::Shape(format!(
                    "block {} does not match the {rows}x{cols} shape implied by the role lists",
                    rec.id
                )));
            }
            for r in 0..rows {
                for c in 0..cols {
                    b.adjacency[(r, c)] = f64::from(rec.adjacency[r][c]);
                    b.logits[(r, c)] = rec.logits[r][c];
                }
            }
        }
        m.validate()?;
        Ok((topology, m))
    }
}

fn modality_len(m: Modality, n_text: usize, n_visual: usize) -> usize {
    match m {
        Modality::Text => n_text,
        Modality::Visual => n_visual,
    }
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Serialized topology: role lists, 0/1 adjacency and logits per matrix, seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TopologyFile {
    pub text_roles: Vec<String>,
    pub visual_roles: Vec<String>,
    pub rng_seed: u64,
    pub blocks: Vec<BlockRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BlockRecord {
    pub id: MatrixId,
    pub adjacency: Vec<Vec<u8>>,
    pub logits: Vec<Vec<f64>>,
}

/// Whether sampled edges are Bernoulli draws or the whole support.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    #[default]
    Bernoulli,
    /// Every order-respecting edge on the support is active (no draws).
    Support,
}

#[derive(Clone, Debug)]
pub struct SampleScope<'a> {
    /// Blocks whose edges take part in this sample.
    pub blocks: &'a [Block],
    /// Use this order instead of drawing a permutation.
    pub order: Option<&'a [usize]>,
    pub inclusion: Inclusion,
}

impl Default for SampleScope<'static> {
    fn default() -> Self {
        SampleScope {
            blocks: &Block::ALL,
            order: None,
            inclusion: Inclusion::Bernoulli,
        }
    }
}

/// One considered edge of a sample: order-respecting spatial edges and all
/// temporal edges on the support of the sampled blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDecision {
    pub kind: EdgeKind,
    pub from: usize,
    pub to: usize,
    pub prob: f64,
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagSample {
    pub topo_order: Vec<usize>,
    pub active_spatial_edges: Vec<(usize, usize)>,
    pub active_temporal_edges: Vec<(usize, usize)>,
    pub decisions: Vec<EdgeDecision>,
    pub log_prob: f64,
}

impl DagSample {
    pub fn position(&self) -> Vec<usize> {
        let mut pos = vec![0; self.topo_order.len()];
        for (p, &n) in self.topo_order.iter().enumerate() {
            pos[n] = p;
        }
        pos
    }

    pub fn spatial_predecessors(&self, node: usize) -> Vec<usize> {
        self.active_spatial_edges
            .iter()
            .filter(|(_, to)| *to == node)
            .map(|(from, _)| *from)
            .collect()
    }

    pub fn temporal_predecessors(&self, node: usize) -> Vec<usize> {
        self.active_temporal_edges
            .iter()
            .filter(|(_, to)| *to == node)
            .map(|(from, _)| *from)
            .collect()
    }
}

/// Draw a DAG over all blocks with a fresh random order.
pub fn sample_dag(matrices: &EdgeMatrices, rng_seed: u64) -> Result<DagSample> {
    sample_dag_scoped(matrices, &SampleScope::default(), rng_seed)
}

/// Draw a topological order (uniform permutation) then include each
/// order-respecting spatial edge and each temporal edge independently with
/// probability equal to its logit. Spatial edges against the order are left
/// out of the sample without touching the adjacency.
pub fn sample_dag_scoped(
    matrices: &EdgeMatrices,
    scope: &SampleScope<'_>,
    rng_seed: u64,
) -> Result<DagSample> {
    let n = matrices.n_nodes();
    for &block in scope.blocks {
        for kind in EdgeKind::ALL {
            let b = matrices.block(MatrixId::new(kind, block));
            if let Some(bad) = b.logits.iter().find(|l| !(0.0..=1.0).contains(*l)) {
                return Err(Error::CorruptState(format!(
                    "logit {bad} outside [0,1] in {}",
                    MatrixId::new(kind, block)
                )));
            }
        }
    }

    let mut rng = rng_for(rng_seed, &[0x646167]);
    let topo_order: Vec<usize> = match scope.order {
        Some(order) => {
            let mut check = order.to_vec();
            check.sort_unstable();
            if check != (0..n).collect::<Vec<_>>() {
                return Err(Error::Config(format!(
                    "order {order:?} is not a permutation of 0..{n}"
                )));
            }
            order.to_vec()
        }
        None => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        }
    };
    let mut pos = vec![0; n];
    for (p, &node) in topo_order.iter().enumerate() {
        pos[node] = p;
    }

    let mut decisions = Vec::new();
    let mut log_prob = 0.0;
    let mut active_spatial = Vec::new();
    let mut active_temporal = Vec::new();
    for kind in EdgeKind::ALL {
        for from in 0..n {
            for to in 0..n {
                let (id, _, _) = matrices.locate(kind, from, to);
                if !scope.blocks.contains(&id.block) || !matrices.adjacent(kind, from, to) {
                    continue;
                }
                if kind == EdgeKind::Spatial && pos[from] >= pos[to] {
                    continue;
                }
                let prob = matrices.logit(kind, from, to);
                let included = match scope.inclusion {
                    Inclusion::Bernoulli => rng.random::<f64>() < prob,
                    Inclusion::Support => true,
                };
                if scope.inclusion == Inclusion::Bernoulli {
                    log_prob += if included {
                        prob.ln()
                    } else {
                        (1.0 - prob).ln()
                    };
                }
                decisions.push(EdgeDecision {
                    kind,
                    from,
                    to,
                    prob,
                    included,
                });
                if included {
                    match kind {
                        EdgeKind::Spatial => active_spatial.push((from, to)),
                        EdgeKind::Temporal => active_temporal.push((from, to)),
                    }
                }
            }
        }
    }

    Ok(DagSample {
        topo_order,
        active_spatial_edges: active_spatial,
        active_temporal_edges: active_temporal,
        decisions,
        log_prob,
    })
}
