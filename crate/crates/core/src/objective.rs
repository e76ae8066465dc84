//! Scalar objective pieces: task utility, the nuclear-norm sparsity
//! surrogate, the text/visual alignment loss and hinge-squared constraint
//! penalties, each with the gradient used by the optimizer.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::remote::{RemoteBackend, RemoteConfig};
use crate::runtime::TaskInstance;

/// Case-fold, drop punctuation, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact-match utility: 1 when the normalised prediction equals or contains
/// the normalised gold answer.
pub fn utility_em(prediction: &str, gold: &str) -> f64 {
    let gold = normalize_answer(gold);
    if gold.is_empty() {
        return 0.0;
    }
    let pred = normalize_answer(prediction);
    if pred == gold || pred.contains(&gold) {
        1.0
    } else {
        0.0
    }
}

pub type CustomUtility = Arc<dyn Fn(&str, &TaskInstance) -> f64 + Send + Sync>;

/// Task utility φ. Every variant returns values in `[0, 1]`.
#[derive(Clone)]
pub enum UtilityFn {
    ExactMatch,
    /// External LLM judge scoring 1..=5; a score of at least 4 counts as correct.
    Judge(JudgeConfig),
    Custom(CustomUtility),
}

impl fmt::Debug for UtilityFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtilityFn::ExactMatch => f.write_str("ExactMatch"),
            UtilityFn::Judge(_) => f.write_str("Judge"),
            UtilityFn::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl UtilityFn {
    pub fn custom(f: impl Fn(&str, &TaskInstance) -> f64 + Send + Sync + 'static) -> Self {
        UtilityFn::Custom(Arc::new(f))
    }

    pub fn score(&self, prediction: &str, task: &TaskInstance) -> Result<f64> {
        let v = match self {
            UtilityFn::ExactMatch => {
                let gold = task.gold_answer.as_deref().ok_or_else(|| {
                    Error::Config("exact-match utility needs a gold answer".into())
                })?;
                utility_em(prediction, gold)
            }
            UtilityFn::Judge(judge) => judge.score(prediction, task)?,
            UtilityFn::Custom(f) => f(prediction, task),
        };
        Ok(v.clamp(0.0, 1.0))
    }
}

/// Judge backend sharing the remote chat contract. The prompt template is
/// user-supplied and may reference `{question}`, `{gold}` and `{prediction}`.
#[derive(Clone, Debug)]
pub struct JudgeConfig {
    pub remote: RemoteConfig,
    pub template: String,
    pub threshold: u32,
}

impl JudgeConfig {
    fn score(&self, prediction: &str, task: &TaskInstance) -> Result<f64> {
        let prompt = self
            .template
            .replace("{question}", &task.question)
            .replace("{gold}", task.gold_answer.as_deref().unwrap_or(""))
            .replace("{prediction}", prediction);
        let backend = RemoteBackend::new(self.remote.clone());
        let reply = backend
            .complete(
                "You grade answers on a scale of 1 to 5. Reply with the number only.",
                &prompt,
            )
            .map_err(|e| Error::Backend(e.to_string()))?;
        let grade: u32 = reply
            .content
            .trim()
            .chars()
            .find(|c| c.is_ascii_digit())
            .and_then(|c| c.to_digit(10))
            .ok_or_else(|| {
                Error::Backend(format!("judge reply `{}` has no grade", reply.content))
            })?;
        Ok(if grade >= self.threshold { 1.0 } else { 0.0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignNormalization {
    /// Divide the row sum by `N_T * N_I`.
    #[default]
    Verbatim,
    /// Divide by `N_T`, the number of summed row terms.
    Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveWeights {
    pub sparsity_coeff: f64,
    pub align_coeff: f64,
    pub constraint_coeff: f64,
    /// ε: allowed deviation of intra logits from their adjacency.
    pub noise_intra: f64,
    /// ε′: same for each inter direction.
    pub noise_inter: f64,
    pub align_normalization: AlignNormalization,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            sparsity_coeff: 1.0,
            align_coeff: 1.0,
            constraint_coeff: 1.0,
            noise_intra: 0.1,
            noise_inter: 0.1,
            align_normalization: AlignNormalization::Verbatim,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("sparsity_coeff", self.sparsity_coeff),
            ("align_coeff", self.align_coeff),
            ("constraint_coeff", self.constraint_coeff),
            ("noise_intra", self.noise_intra),
            ("noise_inter", self.noise_inter),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn svd(m: &DMatrix<f64>) -> Result<nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix has non-finite entries".into()));
    }
    m.clone()
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| {
            Error::Numerical(format!(
                "SVD of a {}x{} matrix did not converge",
                m.nrows(),
                m.ncols()
            ))
        })
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    Ok(svd(m)?.singular_values.iter().sum())
}

/// `U Vᵀ` over the singular pairs with non-negligible singular value.
pub fn nuclear_norm_subgradient(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.is_empty() {
        return Ok(m.clone());
    }
    let s = svd(m)?;
    let u = s.u.as_ref().expect("requested U");
    let v_t = s.v_t.as_ref().expect("requested Vᵀ");
    let smax = s.singular_values.max();
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    let mut g = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &sv) in s.singular_values.iter().enumerate() {
        if sv > tol {
            g += u.column(k) * v_t.row(k);
        }
    }
    Ok(g)
}

/// Subgradient restricted to the adjacency support.
pub fn masked_nuclear_subgradient(
    logits: &DMatrix<f64>,
    adjacency: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(nuclear_norm_subgradient(logits)?.component_mul(adjacency))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

fn check_align_shapes(txt_to_vis: &DMatrix<f64>, vis_to_txt: &DMatrix<f64>) -> Result<()> {
    if txt_to_vis.shape() != (vis_to_txt.ncols(), vis_to_txt.nrows()) {
        return Err(Error::Shape(format!(
            "alignment needs N_T x N_I and N_I x N_T, got {:?} and {:?}",
            txt_to_vis.shape(),
            vis_to_txt.shape()
        )));
    }
    Ok(())
}

fn align_denominator(n_text: usize, n_visual: usize, norm: AlignNormalization) -> f64 {
    match norm {
        AlignNormalization::Verbatim => (n_text * n_visual) as f64,
        AlignNormalization::Rows => n_text as f64,
    }
}

/// `-(1/Z) Σ_i (1 - cos(txt_to_vis[i,:], vis_to_txtᵀ[i,:]))`; zero rows have cosine 0.
pub fn alignment_loss(
    txt_to_vis: &DMatrix<f64>,
    vis_to_txt: &DMatrix<f64>,
    norm: AlignNormalization,
) -> Result<f64> {
    check_align_shapes(txt_to_vis, vis_to_txt)?;
    let (nt, ni) = txt_to_vis.shape();
    if nt == 0 || ni == 0 {
        return Ok(0.0);
    }
    let bt = vis_to_txt.transpose();
    let sum: f64 = (0..nt)
        .map(|i| {
            let a: Vec<f64> = txt_to_vis.row(i).iter().copied().collect();
            let b: Vec<f64> = bt.row(i).iter().copied().collect();
            1.0 - cosine(&a, &b)
        })
        .sum();
    Ok(-sum / align_denominator(nt, ni, norm))
}

/// Gradients of [`alignment_loss`] with respect to both matrices.
/// Rows where either side is zero contribute no gradient.
pub fn alignment_loss_grad(
    txt_to_vis: &DMatrix<f64>,
    vis_to_txt: &DMatrix<f64>,
    norm: AlignNormalization,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_align_shapes(txt_to_vis, vis_to_txt)?;
    let (nt, ni) = txt_to_vis.shape();
    let mut ga = DMatrix::zeros(nt, ni);
    let mut gb = DMatrix::zeros(ni, nt);
    if nt == 0 || ni == 0 {
        return Ok((ga, gb));
    }
    let z = align_denominator(nt, ni, norm);
    for i in 0..nt {
        let a: Vec<f64> = txt_to_vis.row(i).iter().copied().collect();
        let b: Vec<f64> = vis_to_txt.column(i).iter().copied().collect();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        let c = cosine(&a, &b);
        for j in 0..ni {
            // dL/da = (1/Z) dc/da, dc/da = b/(|a||b|) - c a/|a|^2
            ga[(i, j)] = (b[j] / (na * nb) - c * a[j] / (na * na)) / z;
            gb[(j, i)] = (a[j] / (na * nb) - c * b[j] / (nb * nb)) / z;
        }
    }
    Ok((ga, gb))
}

fn frob_distance(adjacency: &DMatrix<f64>, logits: &DMatrix<f64>) -> Result<f64> {
    if adjacency.shape() != logits.shape() {
        return Err(Error::Shape(format!(
            "adjacency {:?} vs logits {:?}",
            adjacency.shape(),
            logits.shape()
        )));
    }
    Ok((adjacency - logits).norm())
}

/// `max(0, Σ ‖A − Ã‖_F − ε)²` over the given (adjacency, logits) pairs.
pub fn frobenius_penalty(pairs: &[(&DMatrix<f64>, &DMatrix<f64>)], eps: f64) -> Result<f64> {
    let mut total = 0.0;
    for (a, l) in pairs {
        total += frob_distance(a, l)?;
    }
    Ok((total - eps).max(0.0).powi(2))
}

/// Gradient of [`frobenius_penalty`] with respect to each logits matrix.
pub fn frobenius_penalty_grad(
    pairs: &[(&DMatrix<f64>, &DMatrix<f64>)],
    eps: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let dists: Vec<f64> = pairs
        .iter()
        .map(|(a, l)| frob_distance(a, l))
        .collect::<Result<_>>()?;
    let hinge = (dists.iter().sum::<f64>() - eps).max(0.0);
    Ok(pairs
        .iter()
        .zip(&dists)
        .map(|((a, l), &d)| {
            if hinge == 0.0 || d == 0.0 {
                DMatrix::zeros(l.nrows(), l.ncols())
            } else {
                (*l - *a) * (2.0 * hinge / d)
            }
        })
        .collect())
}
