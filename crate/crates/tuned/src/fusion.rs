//! Evidence aggregation backends.
//!
//! The selective backend builds a view-level graph from pairwise evidence
//! similarity, prunes edges below a threshold relative to the strongest
//! edge, and aggregates evidence as a convex combination over the retained
//! structure. Arithmetic averaging and the sequential pairwise-average rule
//! are kept as baselines; the latter is order-sensitive by construction.

use crate::error::{Error, Result};
use crate::nn::Tensor2D;

/// Evidence aggregation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionBackend {
    SMrf,
    Average,
    Dst,
}

impl std::str::FromStr for FusionBackend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smrf" => Ok(FusionBackend::SMrf),
            "average" => Ok(FusionBackend::Average),
            "dst" => Ok(FusionBackend::Dst),
            other => Err(Error::Config(format!("unknown fusion backend '{other}'"))),
        }
    }
}

impl FusionBackend {
    pub fn name(self) -> &'static str {
        match self {
            FusionBackend::SMrf => "smrf",
            FusionBackend::Average => "average",
            FusionBackend::Dst => "dst",
        }
    }
}

fn check_views(op: &'static str, evidence: &[Tensor2D], min_views: usize) -> Result<()> {
    if evidence.len() < min_views {
        return Err(Error::Config(format!(
            "{op} needs at least {min_views} views, got {}",
            evidence.len()
        )));
    }
    let shape = evidence[0].shape();
    for e in evidence {
        if e.shape() != shape {
            return Err(Error::shape(op, shape, e.shape()));
        }
    }
    Ok(())
}

/// Mean over samples of the cosine similarity between corresponding rows of
/// each view pair. Zero-norm rows contribute zero. The diagonal is one by
/// definition and the matrix is exactly symmetric.
pub fn view_similarity(evidence: &[Tensor2D]) -> Result<Tensor2D> {
    check_views("view_similarity", evidence, 2)?;
    let v = evidence.len();
    let n = evidence[0].rows();
    let norms: Vec<Vec<f64>> = evidence
        .iter()
        .map(|e| {
            (0..n)
                .map(|r| e.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let mut sim = Tensor2D::identity(v);
    for i in 0..v {
        for j in (i + 1)..v {
            let mut acc = 0.0;
            for r in 0..n {
                let ni = norms[i][r];
                let nj = norms[j][r];
                if ni > 0.0 && nj > 0.0 {
                    let dot: f64 = evidence[i]
                        .row(r)
                        .iter()
                        .zip(evidence[j].row(r))
                        .map(|(a, b)| a * b)
                        .sum();
                    acc += dot / (ni * nj);
                }
            }
            let w = acc / n as f64;
            sim.set(i, j, w);
            sim.set(j, i, w);
        }
    }
    Ok(sim)
}

/// Edge retention mask: an off-diagonal edge survives iff its weight is at
/// least `tau` times the largest off-diagonal weight. Self-edges always
/// survive.
pub fn prune_edges(weights: &Tensor2D, tau: f64) -> Result<Vec<Vec<bool>>> {
    let v = weights.rows();
    if weights.cols() != v {
        return Err(Error::shape("prune_edges", weights.shape(), (v, v)));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
    }
    let mut w_max = 0.0_f64;
    for i in 0..v {
        for j in 0..v {
            if i != j {
                w_max = w_max.max(weights.get(i, j));
            }
        }
    }
    let threshold = tau * w_max;
    let mut mask = vec![vec![false; v]; v];
    for (i, row) in mask.iter_mut().enumerate() {
        for (j, keep) in row.iter_mut().enumerate() {
            *keep = i == j || weights.get(i, j) >= threshold;
        }
    }
    Ok(mask)
}

/// View-level fusion graph: similarity weights, the retained-edge mask, and
/// row-normalized aggregation weights (self-edge weight one before
/// normalization). Negative similarities are clamped to zero so every
/// aggregation weight is a valid convex coefficient.
#[derive(Debug, Clone)]
pub struct FusionGraph {
    pub weights: Tensor2D,
    pub edge_mask: Vec<Vec<bool>>,
    pub tau: f64,
    pub normalized: Tensor2D,
}

impl FusionGraph {
    pub fn build(evidence: &[Tensor2D], tau: f64) -> Result<Self> {
        let weights = view_similarity(evidence)?;
        Self::from_weights(weights, tau)
    }

    pub fn from_weights(weights: Tensor2D, tau: f64) -> Result<Self> {
        let clamped = weights.map(|w| w.max(0.0));
        let edge_mask = prune_edges(&clamped, tau)?;
        let v = clamped.rows();
        let mut normalized = Tensor2D::zeros(v, v);
        for i in 0..v {
            let retained: Vec<usize> = (0..v)
                .filter(|&j| j != i && edge_mask[i][j])
                .collect();
            if retained.is_empty() && v > 1 {
                log::warn!("view {i}: every off-diagonal edge pruned, falling back to self-only aggregation");
            }
            let total: f64 = 1.0 + retained.iter().map(|&j| clamped.get(i, j)).sum::<f64>();
            normalized.set(i, i, 1.0 / total);
            for &j in &retained {
                normalized.set(i, j, clamped.get(i, j) / total);
            }
        }
        Ok(Self {
            weights,
            edge_mask,
            tau,
            normalized,
        })
    }

    /// Per-view convex coefficients of the final aggregate: the uniform
    /// mean over target rows of the normalized weights. They are
    /// non-negative and sum to one.
    pub fn view_coefficients(&self) -> Vec<f64> {
        let v = self.normalized.rows();
        let mut coeffs = vec![0.0; v];
        for i in 0..v {
            for (j, c) in coeffs.iter_mut().enumerate() {
                *c += self.normalized.get(i, j) / v as f64;
            }
        }
        coeffs
    }
}

/// Convex combination of evidence matrices with the given coefficients.
fn combine(evidence: &[Tensor2D], coeffs: &[f64]) -> Tensor2D {
    let mut out = Tensor2D::zeros(evidence[0].rows(), evidence[0].cols());
    for (e, &c) in evidence.iter().zip(coeffs) {
        if c == 0.0 {
            continue;
        }
        for (o, &v) in out.data_mut().iter_mut().zip(e.data()) {
            *o += c * v;
        }
    }
    out
}

/// Selective aggregation over a pre-built fusion graph.
pub fn smrf_aggregate(evidence: &[Tensor2D], graph: &FusionGraph) -> Result<Tensor2D> {
    check_views("smrf_aggregate", evidence, 1)?;
    if graph.normalized.rows() != evidence.len() {
        return Err(Error::contract(
            "smrf_aggregate",
            format!(
                "graph covers {} views but {} evidence matrices given",
                graph.normalized.rows(),
                evidence.len()
            ),
        ));
    }
    Ok(combine(evidence, &graph.view_coefficients()))
}

/// Elementwise mean over views.
pub fn average_fuse(evidence: &[Tensor2D]) -> Result<Tensor2D> {
    check_views("average_fuse", evidence, 1)?;
    let c = 1.0 / evidence.len() as f64;
    Ok(combine(evidence, &vec![c; evidence.len()]))
}

/// Sequential pairwise averaging in list order:
/// `acc = e1; acc = (e_i + acc) / 2` for each following view.
/// The first views are discounted geometrically, so the result depends on
/// the order of the list.
pub fn dst_sequential_fuse(evidence: &[Tensor2D]) -> Result<Tensor2D> {
    check_views("dst_sequential_fuse", evidence, 1)?;
    let mut acc = evidence[0].clone();
    for e in &evidence[1..] {
        acc = e.add(&acc)?.scale(0.5);
    }
    Ok(acc)
}

/// The effective per-view coefficients of the sequential-average rule.
pub fn dst_coefficients(views: usize) -> Vec<f64> {
    if views == 1 {
        return vec![1.0];
    }
    let mut coeffs = Vec::with_capacity(views);
    coeffs.push(0.5_f64.powi(views as i32 - 1));
    for i in 1..views {
        coeffs.push(0.5_f64.powi((views - i) as i32));
    }
    coeffs
}

/// One fused forward pass: the aggregated evidence, the convex coefficients
/// actually applied (used as constants in backprop), and the fusion graph
/// when the selective backend produced one.
#[derive(Debug, Clone)]
pub struct FusedEvidence {
    pub fused: Tensor2D,
    pub coefficients: Vec<f64>,
    pub graph: Option<FusionGraph>,
}

/// Dispatch over the configured backend.
pub fn fuse(backend: FusionBackend, evidence: &[Tensor2D], tau: f64) -> Result<FusedEvidence> {
    check_views("fuse", evidence, 1)?;
    match backend {
        FusionBackend::Average => {
            let coefficients = vec![1.0 / evidence.len() as f64; evidence.len()];
            Ok(FusedEvidence {
                fused: combine(evidence, &coefficients),
                coefficients,
                graph: None,
            })
        }
        FusionBackend::Dst => {
            let coefficients = dst_coefficients(evidence.len());
            Ok(FusedEvidence {
                fused: combine(evidence, &coefficients),
                coefficients,
                graph: None,
            })
        }
        FusionBackend::SMrf => {
            if evidence.len() == 1 {
                return Ok(FusedEvidence {
                    fused: evidence[0].clone(),
                    coefficients: vec![1.0],
                    graph: None,
                });
            }
            let graph = FusionGraph::build(evidence, tau)?;
            let coefficients = graph.view_coefficients();
            Ok(FusedEvidence {
                fused: combine(evidence, &coefficients),
                coefficients,
                graph: Some(graph),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SeededRng;
    use approx::assert_abs_diff_eq;

    fn rows(data: &[Vec<f64>]) -> Tensor2D {
        Tensor2D::from_rows(data).unwrap()
    }

    #[test]
    fn similarity_of_identical_views_is_one() {
        let e = rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]);
        let sim = view_similarity(&[e.clone(), e]).unwrap();
        assert_abs_diff_eq!(sim.get(0, 1), 1.0, epsilon = 1e-12);
        assert_eq!(sim.get(0, 0), 1.0);
    }

    #[test]
    fn similarity_of_orthogonal_views_is_zero() {
        let a = rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let b = rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        let sim = view_similarity(&[a, b]).unwrap();
        assert_eq!(sim.get(0, 1), 0.0);
    }

    #[test]
    fn similarity_is_symmetric_and_bounded() {
        let mut rng = SeededRng::new(8);
        let views: Vec<Tensor2D> = (0..4)
            .map(|_| Tensor2D::new(6, 3, (0..18).map(|_| rng.normal()).collect()).unwrap())
            .collect();
        let sim = view_similarity(&views).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let w = sim.get(i, j);
                assert!((-1.0..=1.0).contains(&w));
                assert_eq!(w.to_bits(), sim.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn similarity_needs_two_views() {
        assert!(view_similarity(&[Tensor2D::zeros(2, 2)]).is_err());
    }

    #[test]
    fn zero_norm_rows_contribute_nothing() {
        let a = rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        let b = rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]);
        let sim = view_similarity(&[a, b]).unwrap();
        assert_abs_diff_eq!(sim.get(0, 1), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn prune_keeps_only_strong_edges() {
        let mut w = Tensor2D::identity(3);
        w.set(0, 1, 0.9);
        w.set(1, 0, 0.9);
        w.set(0, 2, 0.3);
        w.set(2, 0, 0.3);
        w.set(1, 2, 0.2);
        w.set(2, 1, 0.2);
        let mask = prune_edges(&w, 0.7).unwrap();
        assert!(mask[0][1] && mask[1][0]);
        assert!(!mask[0][2] && !mask[1][2]);
        assert!(mask[0][0] && mask[1][1] && mask[2][2]);
    }

    #[test]
    fn prune_boundaries() {
        let mut w = Tensor2D::identity(3);
        w.set(0, 1, 0.9);
        w.set(1, 0, 0.9);
        w.set(0, 2, 0.3);
        w.set(2, 0, 0.3);
        w.set(1, 2, 0.2);
        w.set(2, 1, 0.2);
        let all = prune_edges(&w, 0.0).unwrap();
        assert!(all.iter().flatten().all(|&k| k));
        let strict = prune_edges(&w, 1.0).unwrap();
        assert!(strict[0][1]);
        assert!(!strict[0][2] && !strict[1][2]);
    }

    #[test]
    fn smrf_identical_views_are_a_fixed_point() {
        let e = rows(&[vec![2.0, 1.0], vec![0.5, 3.0]]);
        let views = [e.clone(), e.clone()];
        let graph = FusionGraph::build(&views, 0.7).unwrap();
        let fused = smrf_aggregate(&views, &graph).unwrap();
        for (f, v) in fused.data().iter().zip(e.data()) {
            assert_abs_diff_eq!(f, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn smrf_with_tau_zero_and_equal_weights_is_plain_average() {
        // Three identical-direction views have pairwise similarity 1.
        let views = [
            rows(&[vec![2.0, 0.0]]),
            rows(&[vec![4.0, 0.0]]),
            rows(&[vec![6.0, 0.0]]),
        ];
        let graph = FusionGraph::build(&views, 0.0).unwrap();
        let fused = smrf_aggregate(&views, &graph).unwrap();
        assert_abs_diff_eq!(fused.get(0, 0), 4.0, epsilon = 1e-9);
    }

    #[test]
    fn smrf_pruned_view_contributes_only_through_its_self_row() {
        // Views 0 and 1 agree; view 2 is orthogonal and gets pruned at 0.7.
        let views = [
            rows(&[vec![4.0, 0.0]]),
            rows(&[vec![4.0, 0.0]]),
            rows(&[vec![0.0, 4.0]]),
        ];
        let graph = FusionGraph::build(&views, 0.7).unwrap();
        assert!(!graph.edge_mask[0][2] && !graph.edge_mask[1][2] && !graph.edge_mask[2][0]);
        let coeffs = graph.view_coefficients();
        // Rows 0 and 1 average views 0 and 1; row 2 is self-only, so the
        // conflicting view keeps exactly one third of the final mass.
        assert_abs_diff_eq!(coeffs[2], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(coeffs[0], 1.0 / 3.0, epsilon = 1e-12);
        let fused = smrf_aggregate(&views, &graph).unwrap();
        assert_abs_diff_eq!(fused.get(0, 0), 8.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fused.get(0, 1), 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn smrf_rows_stay_in_the_convex_hull() {
        let mut rng = SeededRng::new(21);
        let views: Vec<Tensor2D> = (0..4)
            .map(|_| {
                Tensor2D::new(5, 3, (0..15).map(|_| rng.uniform(0.0, 5.0)).collect()).unwrap()
            })
            .collect();
        let graph = FusionGraph::build(&views, 0.7).unwrap();
        let coeffs = graph.view_coefficients();
        assert_abs_diff_eq!(coeffs.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        assert!(coeffs.iter().all(|&c| c >= 0.0));
        let fused = smrf_aggregate(&views, &graph).unwrap();
        for r in 0..5 {
            for c in 0..3 {
                let lo = views.iter().map(|v| v.get(r, c)).fold(f64::INFINITY, f64::min);
                let hi = views
                    .iter()
                    .map(|v| v.get(r, c))
                    .fold(f64::NEG_INFINITY, f64::max);
                let f = fused.get(r, c);
                assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn conflict_view_edges_prune_for_any_tau_above_ratio() {
        let views = [
            rows(&[vec![3.0, 0.0], vec![2.0, 0.0]]),
            rows(&[vec![2.5, 0.0], vec![1.5, 0.0]]),
            rows(&[vec![0.0, 1.0], vec![0.0, 2.0]]),
        ];
        let sim = view_similarity(&views).unwrap();
        let mut w_max = 0.0_f64;
        let mut conflict_max = 0.0_f64;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    w_max = w_max.max(sim.get(i, j));
                    if i == 2 || j == 2 {
                        conflict_max = conflict_max.max(sim.get(i, j));
                    }
                }
            }
        }
        let tau = (conflict_max / w_max) + 1e-6;
        let mask = prune_edges(&sim.map(|w| w.max(0.0)), tau).unwrap();
        for j in 0..2 {
            assert!(!mask[2][j] && !mask[j][2]);
        }
    }

    #[test]
    fn average_fuse_examples() {
        let fused = average_fuse(&[rows(&[vec![4.0, 0.0]]), rows(&[vec![0.0, 4.0]])]).unwrap();
        assert_eq!(fused.data(), &[2.0, 2.0]);
        let single = rows(&[vec![1.0, 7.0]]);
        assert_eq!(average_fuse(&[single.clone()]).unwrap(), single);
    }

    #[test]
    fn dst_witness_and_order_sensitivity() {
        let e1 = rows(&[vec![4.0, 0.0]]);
        let e2 = rows(&[vec![0.0, 4.0]]);
        let e3 = rows(&[vec![2.0, 2.0]]);
        let canonical = dst_sequential_fuse(&[e1.clone(), e2.clone(), e3.clone()]).unwrap();
        assert_eq!(canonical.data(), &[2.0, 2.0]);
        let reordered = dst_sequential_fuse(&[e3.clone(), e1.clone(), e2.clone()]).unwrap();
        assert_eq!(reordered.data(), &[1.5, 2.5]);
        assert_eq!(dst_sequential_fuse(&[e3.clone()]).unwrap(), e3);
    }

    #[test]
    fn dst_coefficients_match_the_recurrence() {
        let views = [
            rows(&[vec![1.0, 0.0]]),
            rows(&[vec![0.0, 1.0]]),
            rows(&[vec![1.0, 1.0]]),
            rows(&[vec![2.0, 0.0]]),
        ];
        let direct = dst_sequential_fuse(&views).unwrap();
        let coeffs = dst_coefficients(4);
        assert_abs_diff_eq!(coeffs.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        let mut by_coeff = Tensor2D::zeros(1, 2);
        for (v, &c) in views.iter().zip(&coeffs) {
            by_coeff.add_assign(&v.scale(c)).unwrap();
        }
        for (a, b) in direct.data().iter().zip(by_coeff.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn permutation_invariance_contrast() {
        let mut rng = SeededRng::new(33);
        let views: Vec<Tensor2D> = (0..4)
            .map(|_| {
                Tensor2D::new(3, 2, (0..6).map(|_| rng.uniform(0.0, 3.0)).collect()).unwrap()
            })
            .collect();
        let avg_base = average_fuse(&views).unwrap();
        let smrf_base = fuse(FusionBackend::SMrf, &views, 0.7).unwrap().fused;
        let dst_base = dst_sequential_fuse(&views).unwrap();
        let mut order: Vec<usize> = (0..4).collect();
        let mut dst_changed = false;
        for _ in 0..50 {
            rng.shuffle(&mut order);
            let permuted: Vec<Tensor2D> = order.iter().map(|&i| views[i].clone()).collect();
            let avg = average_fuse(&permuted).unwrap();
            let smrf = fuse(FusionBackend::SMrf, &permuted, 0.7).unwrap().fused;
            for (a, b) in avg.data().iter().zip(avg_base.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in smrf.data().iter().zip(smrf_base.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            let dst = dst_sequential_fuse(&permuted).unwrap();
            if dst
                .data()
                .iter()
                .zip(dst_base.data())
                .any(|(a, b)| (a - b).abs() > 1e-9)
                && order != [0, 1, 2, 3]
            {
                dst_changed = true;
            }
        }
        assert!(dst_changed, "sequential averaging should be order-sensitive");
    }
}
