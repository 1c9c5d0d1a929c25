//! Dirichlet opinion algebra and evidence conditioning.
//!
//! Non-negative evidence `e` parameterizes a Dirichlet through
//! `alpha = e + 1`; beliefs are `b_k = e_k / S` and the uncertainty mass is
//! `u = K / S` with `S = sum(alpha)`. This module also houses the two
//! configurable fusion functions: the representation fuser (feature vector
//! with neighborhood vector) and the conditioning fuser (consensus evidence
//! with per-view evidence).

use crate::error::{Error, Result};
use crate::nn::{lgamma, Activation, DenseCache, DenseLayer, SeededRng, Tensor2D};

/// Subjective-logic opinion: per-class beliefs plus an uncertainty mass that
/// together sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Opinion {
    pub belief: Vec<f64>,
    pub uncertainty: f64,
}

/// Converts one row of non-negative evidence into an opinion.
pub fn evidence_to_opinion(evidence: &[f64]) -> Result<Opinion> {
    if evidence.is_empty() {
        return Err(Error::contract("evidence_to_opinion", "empty evidence"));
    }
    if let Some(bad) = evidence.iter().find(|&&e| !(e >= 0.0)) {
        return Err(Error::contract(
            "evidence_to_opinion",
            format!("negative or non-finite evidence {bad}"),
        ));
    }
    let k = evidence.len() as f64;
    let total: f64 = evidence.iter().sum::<f64>() + k;
    Ok(Opinion {
        belief: evidence.iter().map(|&e| e / total).collect(),
        uncertainty: k / total,
    })
}

/// Log-density of the Dirichlet distribution at a point of the open simplex.
pub fn dirichlet_log_pdf(p: &[f64], alpha: &[f64]) -> Result<f64> {
    if p.len() != alpha.len() {
        return Err(Error::contract(
            "dirichlet_log_pdf",
            format!("p has length {}, alpha has length {}", p.len(), alpha.len()),
        ));
    }
    let sum_p: f64 = p.iter().sum();
    if (sum_p - 1.0).abs() > 1e-9 || p.iter().any(|&v| v <= 0.0) {
        return Err(Error::domain(
            "dirichlet_log_pdf",
            format!("point off the open simplex (sum {sum_p})"),
        ));
    }
    let mut log_b = -lgamma(alpha.iter().sum())?;
    for &a in alpha {
        log_b += lgamma(a)?;
    }
    let mut value = -log_b;
    for (&pk, &ak) in p.iter().zip(alpha) {
        value += (ak - 1.0) * pk.ln();
    }
    Ok(value)
}

/// Constructs an evidence head: a dense layer whose activation keeps the
/// output non-negative. Identity activation is rejected at configuration
/// time because it would break the evidence contract.
pub fn evidence_head(
    in_dim: usize,
    classes: usize,
    activation: Activation,
    rng: &mut SeededRng,
) -> Result<DenseLayer> {
    if activation == Activation::Identity {
        return Err(Error::Config(
            "evidence head activation must be relu or softplus".to_string(),
        ));
    }
    Ok(DenseLayer::xavier(in_dim, classes, activation, rng))
}

fn require_same_shape(op: &'static str, a: &Tensor2D, b: &Tensor2D) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Row-wise numerically stable softmax.
fn softmax_rows(scores: &Tensor2D) -> Tensor2D {
    let mut out = scores.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient through a row-wise softmax: given A = softmax(S) and dL/dA,
/// returns dL/dS = A .* (dA - rowsum(dA .* A)).
fn softmax_rows_backward(a: &Tensor2D, da: &Tensor2D) -> Tensor2D {
    let mut ds = Tensor2D::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let dot: f64 = a.row(i).iter().zip(da.row(i)).map(|(x, y)| x * y).sum();
        for j in 0..a.cols() {
            ds.set(i, j, a.get(i, j) * (da.get(i, j) - dot));
        }
    }
    ds
}

/// Fusion variant selector shared by both fusers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Summation,
    LinearWeighted,
    CrossAttention,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summation" => Ok(FusionKind::Summation),
            "linear_weighted" => Ok(FusionKind::LinearWeighted),
            "cross_attention" => Ok(FusionKind::CrossAttention),
            other => Err(Error::Config(format!("unknown fusion variant '{other}'"))),
        }
    }
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Summation => "summation",
            FusionKind::LinearWeighted => "linear_weighted",
            FusionKind::CrossAttention => "cross_attention",
        }
    }
}

/// Projects a learnable weight pair back onto `{w >= 0, w1 + w2 = 1}`.
pub fn project_weight_pair(lambda: &mut [f64; 2]) {
    let shift = (lambda[0] + lambda[1] - 1.0) / 2.0;
    lambda[0] -= shift;
    lambda[0] = lambda[0].clamp(0.0, 1.0);
    lambda[1] = 1.0 - lambda[0];
}

/// Fuses a feature representation with its graph-propagated neighborhood
/// representation.
///
/// - summation: `h + q`
/// - linear weighted: `l1*h + l2*q` with learnable `l1 + l2 = 1`
/// - cross attention: `softmax(h q^T / sqrt(d)) q`, attending over samples
#[derive(Debug, Clone, PartialEq)]
pub enum PsiFuser {
    Summation,
    LinearWeighted { lambda: [f64; 2] },
    CrossAttention,
}

#[derive(Debug, Clone)]
pub enum PsiCache {
    Summation,
    LinearWeighted {
        h: Tensor2D,
        q: Tensor2D,
    },
    CrossAttention {
        h: Tensor2D,
        q: Tensor2D,
        attn: Tensor2D,
    },
}

#[derive(Debug, Clone)]
pub struct PsiGrads {
    pub h: Tensor2D,
    pub q: Tensor2D,
    /// Present only for the linear-weighted variant.
    pub lambda: Option<[f64; 2]>,
}

impl PsiFuser {
    pub fn from_kind(kind: FusionKind) -> Self {
        match kind {
            FusionKind::Summation => PsiFuser::Summation,
            FusionKind::LinearWeighted => PsiFuser::LinearWeighted { lambda: [0.5, 0.5] },
            FusionKind::CrossAttention => PsiFuser::CrossAttention,
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            PsiFuser::Summation => FusionKind::Summation,
            PsiFuser::LinearWeighted { .. } => FusionKind::LinearWeighted,
            PsiFuser::CrossAttention => FusionKind::CrossAttention,
        }
    }

    pub fn fuse(&self, h: &Tensor2D, q: &Tensor2D) -> Result<(Tensor2D, PsiCache)> {
        require_same_shape("psi_fuse", h, q)?;
        match self {
            PsiFuser::Summation => Ok((h.add(q)?, PsiCache::Summation)),
            PsiFuser::LinearWeighted { lambda } => {
                let out = h.scale(lambda[0]).add(&q.scale(lambda[1]))?;
                Ok((
                    out,
                    PsiCache::LinearWeighted {
                        h: h.clone(),
                        q: q.clone(),
                    },
                ))
            }
            PsiFuser::CrossAttention => {
                let scale = 1.0 / (q.cols() as f64).sqrt();
                let attn = softmax_rows(&h.matmul(&q.transpose())?.scale(scale));
                let out = attn.matmul(q)?;
                Ok((
                    out,
                    PsiCache::CrossAttention {
                        h: h.clone(),
                        q: q.clone(),
                        attn,
                    },
                ))
            }
        }
    }

    pub fn infer(&self, h: &Tensor2D, q: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.fuse(h, q)?.0)
    }

    pub fn backward(&self, cache: &PsiCache, upstream: &Tensor2D) -> Result<PsiGrads> {
        match (self, cache) {
            (PsiFuser::Summation, PsiCache::Summation) => Ok(PsiGrads {
                h: upstream.clone(),
                q: upstream.clone(),
                lambda: None,
            }),
            (PsiFuser::LinearWeighted { lambda }, PsiCache::LinearWeighted { h, q }) => {
                let dl0: f64 = upstream
                    .data()
                    .iter()
                    .zip(h.data())
                    .map(|(g, v)| g * v)
                    .sum();
                let dl1: f64 = upstream
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(g, v)| g * v)
                    .sum();
                Ok(PsiGrads {
                    h: upstream.scale(lambda[0]),
                    q: upstream.scale(lambda[1]),
                    lambda: Some([dl0, dl1]),
                })
            }
            (PsiFuser::CrossAttention, PsiCache::CrossAttention { h, q, attn }) => {
                let scale = 1.0 / (q.cols() as f64).sqrt();
                // out = A q
                let da = upstream.matmul(&q.transpose())?;
                let mut dq = attn.transpose().matmul(upstream)?;
                let ds = softmax_rows_backward(attn, &da).scale(scale);
                let dh = ds.matmul(q)?;
                dq.add_assign(&ds.transpose().matmul(h)?)?;
                Ok(PsiGrads {
                    h: dh,
                    q: dq,
                    lambda: None,
                })
            }
            _ => Err(Error::contract(
                "psi_backward",
                "cache does not match fuser variant",
            )),
        }
    }
}

/// Conditions per-view evidence on consensus evidence. The output is always
/// `e_view + term(e_cons, e_view)`:
///
/// - summation: term = `e_cons + e_view` (so the result is `2*e_view + e_cons`)
/// - linear weighted: term = `l1*e_cons + l2*e_view`
/// - cross attention: term = `relu(softmax(Q K^T / sqrt(d_k)) V)` with
///   `Q = e_view Wq`, `K = e_cons Wk`, `V = e_cons Wv`; the clamp keeps the
///   conditioned evidence non-negative once projections are learned.
#[derive(Debug, Clone, PartialEq)]
pub enum PhiFuser {
    Summation,
    LinearWeighted {
        lambda: [f64; 2],
    },
    CrossAttention {
        wq: Tensor2D,
        wk: Tensor2D,
        wv: Tensor2D,
    },
}

#[derive(Debug, Clone)]
pub enum PhiCache {
    Summation,
    LinearWeighted {
        cons: Tensor2D,
        view: Tensor2D,
    },
    CrossAttention {
        cons: Tensor2D,
        view: Tensor2D,
        attn: Tensor2D,
        raw: Tensor2D,
    },
}

#[derive(Debug, Clone)]
pub struct PhiGrads {
    pub cons: Tensor2D,
    pub view: Tensor2D,
    pub lambda: Option<[f64; 2]>,
    pub wq: Option<Tensor2D>,
    pub wk: Option<Tensor2D>,
    pub wv: Option<Tensor2D>,
}

impl PhiFuser {
    /// Cross-attention projections start at identity so the untrained
    /// conditioner reduces to `e_view + e_cons` mixing.
    pub fn from_kind(kind: FusionKind, classes: usize) -> Self {
        match kind {
            FusionKind::Summation => PhiFuser::Summation,
            FusionKind::LinearWeighted => PhiFuser::LinearWeighted { lambda: [0.5, 0.5] },
            FusionKind::CrossAttention => PhiFuser::CrossAttention {
                wq: Tensor2D::identity(classes),
                wk: Tensor2D::identity(classes),
                wv: Tensor2D::identity(classes),
            },
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            PhiFuser::Summation => FusionKind::Summation,
            PhiFuser::LinearWeighted { .. } => FusionKind::LinearWeighted,
            PhiFuser::CrossAttention { .. } => FusionKind::CrossAttention,
        }
    }

    /// Returns the conditioned evidence `e_view + term`.
    pub fn condition(&self, cons: &Tensor2D, view: &Tensor2D) -> Result<(Tensor2D, PhiCache)> {
        require_same_shape("phi_fuse", cons, view)?;
        match self {
            PhiFuser::Summation => {
                let out = view.scale(2.0).add(cons)?;
                Ok((out, PhiCache::Summation))
            }
            PhiFuser::LinearWeighted { lambda } => {
                let term = cons.scale(lambda[0]).add(&view.scale(lambda[1]))?;
                Ok((
                    view.add(&term)?,
                    PhiCache::LinearWeighted {
                        cons: cons.clone(),
                        view: view.clone(),
                    },
                ))
            }
            PhiFuser::CrossAttention { wq, wk, wv } => {
                let dk = wq.cols() as f64;
                let q = view.matmul(wq)?;
                let k = cons.matmul(wk)?;
                let v = cons.matmul(wv)?;
                let attn = softmax_rows(&q.matmul(&k.transpose())?.scale(1.0 / dk.sqrt()));
                let raw = attn.matmul(&v)?;
                let term = raw.map(|x| x.max(0.0));
                Ok((
                    view.add(&term)?,
                    PhiCache::CrossAttention {
                        cons: cons.clone(),
                        view: view.clone(),
                        attn,
                        raw,
                    },
                ))
            }
        }
    }

    pub fn infer(&self, cons: &Tensor2D, view: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.condition(cons, view)?.0)
    }

    pub fn backward(&self, cache: &PhiCache, upstream: &Tensor2D) -> Result<PhiGrads> {
        match (self, cache) {
            (PhiFuser::Summation, PhiCache::Summation) => Ok(PhiGrads {
                cons: upstream.clone(),
                view: upstream.scale(2.0),
                lambda: None,
                wq: None,
                wk: None,
                wv: None,
            }),
            (PhiFuser::LinearWeighted { lambda }, PhiCache::LinearWeighted { cons, view }) => {
                let dl0: f64 = upstream
                    .data()
                    .iter()
                    .zip(cons.data())
                    .map(|(g, v)| g * v)
                    .sum();
                let dl1: f64 = upstream
                    .data()
                    .iter()
                    .zip(view.data())
                    .map(|(g, v)| g * v)
                    .sum();
                Ok(PhiGrads {
                    cons: upstream.scale(lambda[0]),
                    view: upstream.scale(1.0 + lambda[1]),
                    lambda: Some([dl0, dl1]),
                    wq: None,
                    wk: None,
                    wv: None,
                })
            }
            (
                PhiFuser::CrossAttention { wq, wk, wv },
                PhiCache::CrossAttention {
                    cons,
                    view,
                    attn,
                    raw,
                },
            ) => {
                let dk = wq.cols() as f64;
                let scale = 1.0 / dk.sqrt();
                // upstream hits both the identity path and the clamped term
                let mut draw = upstream.clone();
                for (g, &r) in draw.data_mut().iter_mut().zip(raw.data()) {
                    if r <= 0.0 {
                        *g = 0.0;
                    }
                }
                let v = cons.matmul(wv)?;
                let k = cons.matmul(wk)?;
                let q = view.matmul(wq)?;
                let da = draw.matmul(&v.transpose())?;
                let dv = attn.transpose().matmul(&draw)?;
                let ds = softmax_rows_backward(attn, &da).scale(scale);
                let dq = ds.matmul(&k)?;
                let dkmat = ds.transpose().matmul(&q)?;
                let mut dview = upstream.clone();
                dview.add_assign(&dq.matmul(&wq.transpose())?)?;
                let mut dcons = dkmat.matmul(&wk.transpose())?;
                dcons.add_assign(&dv.matmul(&wv.transpose())?)?;
                Ok(PhiGrads {
                    cons: dcons,
                    view: dview,
                    lambda: None,
                    wq: Some(view.transpose().matmul(&dq)?),
                    wk: Some(cons.transpose().matmul(&dkmat)?),
                    wv: Some(cons.transpose().matmul(&dv)?),
                })
            }
            _ => Err(Error::contract(
                "phi_backward",
                "cache does not match fuser variant",
            )),
        }
    }
}

/// Mean over views of equally shaped representation matrices.
pub fn mean_pool(views: &[Tensor2D]) -> Result<Tensor2D> {
    let first = views
        .first()
        .ok_or_else(|| Error::contract("mean_pool", "no views"))?;
    let mut out = first.clone();
    for v in &views[1..] {
        require_same_shape("mean_pool", first, v)?;
        out.add_assign(v)?;
    }
    out.scale_assign(1.0 / views.len() as f64);
    Ok(out)
}

/// How consensus evidence is realized from the shared Dirichlet parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConsensusMode {
    /// Deterministic `alpha - 1` (the distribution mode for alpha >= 1);
    /// keeps gradients exact and is the training default.
    Mean,
    /// Draw `p ~ Dir(alpha)` via normalized gamma samples and return
    /// `p * (sum(alpha) - K)`.
    Sample,
}

impl std::str::FromStr for ConsensusMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ConsensusMode::Mean),
            "sample" => Ok(ConsensusMode::Sample),
            other => Err(Error::Config(format!("unknown consensus mode '{other}'"))),
        }
    }
}

/// Shared extractor mapping pooled representations to the parameters of a
/// common Dirichlet. The softplus output plus one keeps every parameter
/// strictly above one.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusExtractor {
    pub layer: DenseLayer,
}

impl ConsensusExtractor {
    pub fn new(layer: DenseLayer) -> Result<Self> {
        if layer.activation != Activation::Softplus {
            return Err(Error::Config(
                "consensus extractor activation must be softplus".to_string(),
            ));
        }
        Ok(Self { layer })
    }

    pub fn xavier(in_dim: usize, classes: usize, rng: &mut SeededRng) -> Self {
        Self {
            layer: DenseLayer::xavier(in_dim, classes, Activation::Softplus, rng),
        }
    }

    /// Softplus output, equal to `alpha - 1`; this is the mean-mode
    /// consensus evidence with its cache for backprop.
    pub fn forward(&self, pooled: &Tensor2D) -> Result<(Tensor2D, DenseCache)> {
        self.layer.forward(pooled)
    }

    pub fn alpha(&self, pooled: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.layer.infer(pooled)?.map(|e| e + 1.0))
    }
}

/// Consensus evidence over a set of equally sized view representations.
pub fn consensus_evidence(
    extractor: &ConsensusExtractor,
    view_features: &[Tensor2D],
    mode: ConsensusMode,
    rng: Option<&mut SeededRng>,
) -> Result<Tensor2D> {
    let pooled = mean_pool(view_features)?;
    let alpha = extractor.alpha(&pooled)?;
    match mode {
        ConsensusMode::Mean => Ok(alpha.map(|a| a - 1.0)),
        ConsensusMode::Sample => {
            let rng = rng.ok_or_else(|| {
                Error::contract("consensus_evidence", "sample mode requires an rng")
            })?;
            sample_dirichlet_evidence(&alpha, rng)
        }
    }
}

/// Draws `p ~ Dir(alpha)` per row and rescales to evidence with total
/// `sum(alpha) - K`.
pub fn sample_dirichlet_evidence(alpha: &Tensor2D, rng: &mut SeededRng) -> Result<Tensor2D> {
    let k = alpha.cols() as f64;
    let mut out = Tensor2D::zeros(alpha.rows(), alpha.cols());
    for i in 0..alpha.rows() {
        let row = alpha.row(i);
        if row.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::domain(
                "sample_dirichlet_evidence",
                "alpha entries must be positive",
            ));
        }
        let draws: Vec<f64> = row.iter().map(|&a| rng.gamma(a)).collect();
        let total: f64 = draws.iter().sum();
        let evidence_mass = row.iter().sum::<f64>() - k;
        for (j, g) in draws.iter().enumerate() {
            out.set(i, j, g / total * evidence_mass);
        }
    }
    Ok(out)
}

/// Evidence produced for one forward pass: raw per-view matrices, the
/// consensus matrix, and the conditioned per-view matrices.
#[derive(Debug, Clone)]
pub struct EvidenceSet {
    pub per_view: Vec<Tensor2D>,
    pub consensus: Tensor2D,
    pub conditioned: Vec<Tensor2D>,
}

impl EvidenceSet {
    /// Checks non-negativity and finiteness of every matrix.
    pub fn validate(&self) -> Result<()> {
        let all = self
            .per_view
            .iter()
            .chain(std::iter::once(&self.consensus))
            .chain(self.conditioned.iter());
        for m in all {
            if m.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::contract(
                    "EvidenceSet::validate",
                    "evidence entries must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn opinion_from_small_evidence() {
        let op = evidence_to_opinion(&[2.0, 3.0, 5.0]).unwrap();
        assert_abs_diff_eq!(op.belief[0], 2.0 / 13.0, epsilon = 1e-15);
        assert_abs_diff_eq!(op.belief[1], 3.0 / 13.0, epsilon = 1e-15);
        assert_abs_diff_eq!(op.belief[2], 5.0 / 13.0, epsilon = 1e-15);
        assert_abs_diff_eq!(op.uncertainty, 3.0 / 13.0, epsilon = 1e-15);
    }

    #[test]
    fn opinion_total_ignorance() {
        let op = evidence_to_opinion(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(op.belief, vec![0.0, 0.0, 0.0]);
        assert_eq!(op.uncertainty, 1.0);
    }

    #[test]
    fn opinion_single_dominant_class() {
        let op = evidence_to_opinion(&[10.0, 0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(op.belief[0], 10.0 / 13.0, epsilon = 1e-15);
        assert_abs_diff_eq!(op.uncertainty, 3.0 / 13.0, epsilon = 1e-15);
    }

    #[test]
    fn opinion_rejects_negative_evidence() {
        assert!(evidence_to_opinion(&[1.0, -0.1]).is_err());
    }

    #[test]
    fn opinion_normalization_and_uncertainty_monotonicity() {
        let mut rng = SeededRng::new(99);
        for _ in 0..500 {
            let k = 2 + rng.usize_below(19);
            let e: Vec<f64> = (0..k).map(|_| rng.uniform(0.0, 10.0)).collect();
            let op = evidence_to_opinion(&e).unwrap();
            let total: f64 = op.belief.iter().sum::<f64>() + op.uncertainty;
            assert!((total - 1.0).abs() < 1e-9);
            if e.iter().sum::<f64>() > 0.0 {
                let scaled: Vec<f64> = e.iter().map(|v| v * 3.0).collect();
                let op2 = evidence_to_opinion(&scaled).unwrap();
                assert!(op2.uncertainty < op.uncertainty);
            }
        }
    }

    #[test]
    fn dirichlet_uniform_density_is_constant() {
        // alpha = 1 everywhere: density is Gamma(K), here ln 2 for K = 3.
        for p in [[0.2, 0.3, 0.5], [0.6, 0.2, 0.2], [1.0 / 3.0; 3]] {
            let v = dirichlet_log_pdf(&p, &[1.0, 1.0, 1.0]).unwrap();
            assert_abs_diff_eq!(v, 2.0_f64.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn dirichlet_hand_value() {
        let v = dirichlet_log_pdf(&[0.5, 0.5], &[2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dirichlet_rejects_off_simplex_points() {
        assert!(dirichlet_log_pdf(&[0.5, 0.6], &[1.0, 1.0]).is_err());
        assert!(dirichlet_log_pdf(&[1.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn dirichlet_density_integrates_to_one() {
        // K = 2 slice: integrate exp(logpdf(t, 1-t)) over a uniform grid.
        let alpha = [2.5, 1.5];
        let n = 4000;
        let mut integral = 0.0;
        for i in 1..n {
            let t = i as f64 / n as f64;
            integral += dirichlet_log_pdf(&[t, 1.0 - t], &alpha).unwrap().exp();
        }
        integral /= n as f64;
        assert!((integral - 1.0).abs() < 1e-2, "integral {integral}");
    }

    #[test]
    fn psi_summation_adds() {
        let h = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let q = Tensor2D::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let (out, _) = PsiFuser::Summation.fuse(&h, &q).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0]);
    }

    #[test]
    fn psi_linear_degenerate_weights_pass_h_through() {
        let h = Tensor2D::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let q = Tensor2D::from_rows(&[vec![9.0, 9.0]]).unwrap();
        let psi = PsiFuser::LinearWeighted { lambda: [1.0, 0.0] };
        let (out, _) = psi.fuse(&h, &q).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn psi_cross_attention_single_sample_returns_q() {
        let h = Tensor2D::from_rows(&[vec![0.3, -1.0]]).unwrap();
        let q = Tensor2D::from_rows(&[vec![5.0, 7.0]]).unwrap();
        let (out, _) = PsiFuser::CrossAttention.fuse(&h, &q).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0]);
    }

    #[test]
    fn psi_shape_mismatch_rejected() {
        let h = Tensor2D::zeros(1, 2);
        let q = Tensor2D::zeros(2, 2);
        assert!(PsiFuser::Summation.fuse(&h, &q).is_err());
    }

    #[test]
    fn phi_summation_matches_hand_value() {
        let e_view = Tensor2D::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let e_cons = Tensor2D::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let (out, _) = PhiFuser::Summation.condition(&e_cons, &e_view).unwrap();
        assert_eq!(out.data(), &[4.0, 2.0]);
    }

    #[test]
    fn phi_linear_degenerate_doubles_view() {
        let e_view = Tensor2D::from_rows(&[vec![1.5, 0.5]]).unwrap();
        let e_cons = Tensor2D::from_rows(&[vec![8.0, 8.0]]).unwrap();
        let phi = PhiFuser::LinearWeighted { lambda: [0.0, 1.0] };
        let (out, _) = phi.condition(&e_cons, &e_view).unwrap();
        assert_eq!(out.data(), &[3.0, 1.0]);
    }

    #[test]
    fn phi_cross_attention_single_sample_adds_consensus() {
        let e_view = Tensor2D::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let e_cons = Tensor2D::from_rows(&[vec![0.5, 3.0]]).unwrap();
        let phi = PhiFuser::from_kind(FusionKind::CrossAttention, 2);
        let (out, _) = phi.condition(&e_cons, &e_view).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(out.get(0, 1), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_nonnegative_variants_dominate_raw_evidence() {
        let mut rng = SeededRng::new(4);
        let e_view = Tensor2D::new(5, 3, (0..15).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap();
        let e_cons = Tensor2D::new(5, 3, (0..15).map(|_| rng.uniform(0.0, 2.0)).collect()).unwrap();
        for phi in [
            PhiFuser::Summation,
            PhiFuser::LinearWeighted { lambda: [0.3, 0.7] },
        ] {
            let (out, _) = phi.condition(&e_cons, &e_view).unwrap();
            for (o, e) in out.data().iter().zip(e_view.data()) {
                assert!(o >= e);
            }
        }
    }

    #[test]
    fn project_weight_pair_restores_simplex() {
        let mut l = [0.9, 0.7];
        project_weight_pair(&mut l);
        assert_abs_diff_eq!(l[0] + l[1], 1.0, epsilon = 1e-15);
        assert!(l[0] >= 0.0 && l[1] >= 0.0);
        let mut l = [1.8, -0.5];
        project_weight_pair(&mut l);
        assert_eq!(l, [1.0, 0.0]);
    }

    #[test]
    fn consensus_mean_mode_is_alpha_minus_one() {
        let mut rng = SeededRng::new(12);
        let extractor = ConsensusExtractor::xavier(4, 3, &mut rng);
        let views = vec![
            Tensor2D::new(6, 4, (0..24).map(|_| rng.normal()).collect()).unwrap(),
            Tensor2D::new(6, 4, (0..24).map(|_| rng.normal()).collect()).unwrap(),
        ];
        let e = consensus_evidence(&extractor, &views, ConsensusMode::Mean, None).unwrap();
        let alpha = extractor.alpha(&mean_pool(&views).unwrap()).unwrap();
        for (ev, av) in e.data().iter().zip(alpha.data()) {
            assert_abs_diff_eq!(ev + 1.0, av, epsilon = 1e-12);
            assert!(*ev >= 0.0);
        }
    }

    #[test]
    fn consensus_sample_mode_preserves_mass_and_seed() {
        let alpha = Tensor2D::from_rows(&[vec![3.0, 2.0, 2.0], vec![1.5, 4.0, 1.0]]).unwrap();
        let mut rng = SeededRng::new(7);
        let e = sample_dirichlet_evidence(&alpha, &mut rng).unwrap();
        for i in 0..2 {
            let mass: f64 = e.row(i).iter().sum();
            let want: f64 = alpha.row(i).iter().sum::<f64>() - 3.0;
            assert_abs_diff_eq!(mass, want, epsilon = 1e-9);
            assert!(e.row(i).iter().all(|&v| v >= 0.0));
        }
        let mut rng2 = SeededRng::new(7);
        let e2 = sample_dirichlet_evidence(&alpha, &mut rng2).unwrap();
        assert_eq!(e, e2);
    }

    #[test]
    fn consensus_rejects_mismatched_views() {
        let mut rng = SeededRng::new(1);
        let extractor = ConsensusExtractor::xavier(2, 2, &mut rng);
        let views = vec![Tensor2D::zeros(3, 2), Tensor2D::zeros(4, 2)];
        assert!(
            consensus_evidence(&extractor, &views, ConsensusMode::Mean, None).is_err()
        );
    }

    #[test]
    fn evidence_head_rejects_identity_activation() {
        let mut rng = SeededRng::new(2);
        assert!(evidence_head(4, 3, Activation::Identity, &mut rng).is_err());
        assert!(evidence_head(4, 3, Activation::Softplus, &mut rng).is_ok());
    }

    #[test]
    fn zeroed_softplus_head_emits_ln_two() {
        let head = DenseLayer::new(
            Tensor2D::zeros(4, 3),
            vec![0.0; 3],
            Activation::Softplus,
        )
        .unwrap();
        let input = Tensor2D::filled(2, 4, 1.3);
        let out = head.infer(&input).unwrap();
        for &v in out.data() {
            assert_abs_diff_eq!(v, 2.0_f64.ln(), epsilon = 1e-12);
        }
    }
}
