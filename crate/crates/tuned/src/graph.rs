//! Per-view neighborhood structure: pairwise distances, adaptive-neighbor
//! adjacency weights, symmetrization, degree normalization, and a graph
//! convolution layer with an explicit backward pass.

use crate::error::{Error, Result};
use crate::nn::{Activation, SeededRng, Tensor2D};

/// Squared Euclidean distances between all row pairs.
///
/// Uses the expanded form with a clamp at zero so round-off cannot produce
/// negative distances. Output is exactly symmetric with a zero diagonal.
pub fn pairwise_sq_dist(features: &Tensor2D) -> Result<Tensor2D> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::contract(
            "pairwise_sq_dist",
            format!("need at least 2 samples, got {n}"),
        ));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| features.row(i).iter().map(|v| v * v).sum())
        .collect();
    let mut dist = Tensor2D::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dot: f64 = features
                .row(i)
                .iter()
                .zip(features.row(j))
                .map(|(a, b)| a * b)
                .sum();
            let d = (norms[i] + norms[j] - 2.0 * dot).max(0.0);
            dist.set(i, j, d);
            dist.set(j, i, d);
        }
    }
    Ok(dist)
}

/// Sorted `(distance, index)` pairs for one row, self excluded. Ties break
/// by index so neighbor selection is deterministic.
fn sorted_neighbors(dist_row: &[f64], skip: Option<usize>) -> Vec<(f64, usize)> {
    let mut order: Vec<(f64, usize)> = dist_row
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(j, &d)| (d, j))
        .collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    order
}

/// Closed-form adaptive neighbor weights for one row.
///
/// Given the sorted candidate list, the first `k` entries become the
/// neighborhood; `phi` is the (k+1)-th nearest distance, and each retained
/// neighbor `j` gets weight `max(0, (phi - d_j) / (k*phi - sum_of_k_dists))`.
/// A degenerate denominator (all k+1 nearest distances equal) falls back to
/// uniform `1/k` weights. Weights over the neighborhood sum to one.
fn can_row_weights(order: &[(f64, usize)], k: usize) -> Vec<(usize, f64)> {
    let phi = order[k].0;
    let sum_k: f64 = order[..k].iter().map(|(d, _)| d).sum();
    let denom = k as f64 * phi - sum_k;
    let mut out = Vec::with_capacity(k);
    if denom > 1e-12 * phi.max(1.0) {
        for &(d, j) in &order[..k] {
            out.push((j, ((phi - d) / denom).max(0.0)));
        }
    } else {
        for &(_, j) in &order[..k] {
            out.push((j, 1.0 / k as f64));
        }
    }
    out
}

/// Adaptive-neighbor weight matrix: row `i` carries positive weight only on
/// its `k` nearest neighbors and sums to one over them.
pub fn can_weights(dist: &Tensor2D, k: usize) -> Result<Tensor2D> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(Error::shape("can_weights", dist.shape(), (n, n)));
    }
    if k < 1 || k > n.saturating_sub(2) {
        return Err(Error::Config(format!(
            "neighbor count k={k} out of range [1, {}] for n={n}",
            n.saturating_sub(2)
        )));
    }
    let mut weights = Tensor2D::zeros(n, n);
    for i in 0..n {
        let order = sorted_neighbors(dist.row(i), Some(i));
        for (j, w) in can_row_weights(&order, k) {
            weights.set(i, j, w);
        }
    }
    Ok(weights)
}

/// `A = (M + M^T) / 2`, computed once per pair so symmetry is bitwise.
pub fn symmetrize(weights: &Tensor2D) -> Result<Tensor2D> {
    let n = weights.rows();
    if weights.cols() != n {
        return Err(Error::shape("symmetrize", weights.shape(), (n, n)));
    }
    let mut out = Tensor2D::zeros(n, n);
    for i in 0..n {
        out.set(i, i, weights.get(i, i));
        for j in (i + 1)..n {
            let v = (weights.get(i, j) + weights.get(j, i)) / 2.0;
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Symmetric degree normalization with self-loops:
/// `A_hat = D^-1/2 (A + I) D^-1/2`, `D` the degree matrix of `A + I`.
///
/// Returns the normalized matrix together with the `A + I` degrees, which
/// the evaluation-time attachment reuses.
pub fn normalize_adj(adj: &Tensor2D) -> Result<(Tensor2D, Vec<f64>)> {
    let n = adj.rows();
    if adj.cols() != n {
        return Err(Error::shape("normalize_adj", adj.shape(), (n, n)));
    }
    let degrees: Vec<f64> = (0..n)
        .map(|i| 1.0 + adj.row(i).iter().sum::<f64>())
        .collect();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut out = Tensor2D::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = adj.get(i, j) + if i == j { 1.0 } else { 0.0 };
            if a != 0.0 {
                out.set(i, j, a * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    Ok((out, degrees))
}

/// Fixed per-view neighborhood structure built once on the training split.
#[derive(Debug, Clone)]
pub struct TrainGraph {
    /// Symmetrized adaptive-neighbor adjacency (zero diagonal).
    pub adj: Tensor2D,
    /// Degree-normalized adjacency with self-loops.
    pub norm: Tensor2D,
    /// Degrees of `adj + I`.
    pub degrees: Vec<f64>,
    /// Neighbor count actually used (clamped for tiny datasets).
    pub k: usize,
}

impl TrainGraph {
    pub fn build(features: &Tensor2D, k: usize) -> Result<Self> {
        let n = features.rows();
        if n < 3 {
            return Err(Error::contract(
                "TrainGraph::build",
                format!("need at least 3 training samples, got {n}"),
            ));
        }
        let k = k.min(n - 2).max(1);
        let dist = pairwise_sq_dist(features)?;
        let weights = can_weights(&dist, k)?;
        let adj = symmetrize(&weights)?;
        let (norm, degrees) = normalize_adj(&adj)?;
        Ok(Self {
            adj,
            norm,
            degrees,
            k,
        })
    }

    /// Exports the adjacency as `(row, col, weight)` triplets of the
    /// nonzero entries.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let n = self.adj.rows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = self.adj.get(i, j);
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

/// Attachment of held-out rows to a training graph: each evaluation row
/// links to its `k` nearest training rows with adaptive-neighbor weights
/// plus a self-loop, normalized the same way as the training graph.
#[derive(Debug, Clone)]
pub struct CrossGraph {
    /// `n_eval x n_train` normalized neighbor coefficients.
    pub coeff: Tensor2D,
    /// Per-row self coefficient.
    pub self_coeff: Vec<f64>,
}

impl CrossGraph {
    pub fn build(
        eval_features: &Tensor2D,
        train_features: &Tensor2D,
        train_degrees: &[f64],
        k: usize,
    ) -> Result<Self> {
        let n_eval = eval_features.rows();
        let n_train = train_features.rows();
        if eval_features.cols() != train_features.cols() {
            return Err(Error::shape(
                "CrossGraph::build",
                eval_features.shape(),
                train_features.shape(),
            ));
        }
        if n_train < 2 {
            return Err(Error::contract(
                "CrossGraph::build",
                format!("need at least 2 training samples, got {n_train}"),
            ));
        }
        let k = k.min(n_train - 1).max(1);
        let train_norms: Vec<f64> = (0..n_train)
            .map(|j| train_features.row(j).iter().map(|v| v * v).sum())
            .collect();
        let mut coeff = Tensor2D::zeros(n_eval, n_train);
        let mut self_coeff = vec![0.0; n_eval];
        for i in 0..n_eval {
            let row = eval_features.row(i);
            let norm_i: f64 = row.iter().map(|v| v * v).sum();
            let dists: Vec<f64> = (0..n_train)
                .map(|j| {
                    let dot: f64 = row
                        .iter()
                        .zip(train_features.row(j))
                        .map(|(a, b)| a * b)
                        .sum();
                    (norm_i + train_norms[j] - 2.0 * dot).max(0.0)
                })
                .collect();
            let order = sorted_neighbors(&dists, None);
            let weights = can_row_weights(&order, k);
            let degree = 1.0 + weights.iter().map(|(_, w)| w).sum::<f64>();
            let inv_sqrt_i = 1.0 / degree.sqrt();
            for (j, w) in weights {
                coeff.set(i, j, w * inv_sqrt_i / train_degrees[j].sqrt());
            }
            self_coeff[i] = 1.0 / degree;
        }
        Ok(Self { coeff, self_coeff })
    }
}

/// Graph convolution layer: `output = activation(A_hat * features * W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weights: Tensor2D,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct GcnCache {
    features: Tensor2D,
    pre: Tensor2D,
}

#[derive(Debug, Clone)]
pub struct GcnGrads {
    pub features: Tensor2D,
    pub weights: Tensor2D,
}

impl GcnLayer {
    pub fn xavier(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Self {
            weights: Tensor2D::new(in_dim, out_dim, data).expect("sized above"),
            activation,
        }
    }

    pub fn forward(
        &self,
        adj_norm: &Tensor2D,
        features: &Tensor2D,
    ) -> Result<(Tensor2D, GcnCache)> {
        let pre = self.propagate(adj_norm, features)?;
        let out = pre.map(|z| self.activation.apply(z));
        Ok((
            out,
            GcnCache {
                features: features.clone(),
                pre,
            },
        ))
    }

    pub fn infer(&self, adj_norm: &Tensor2D, features: &Tensor2D) -> Result<Tensor2D> {
        Ok(self
            .propagate(adj_norm, features)?
            .map(|z| self.activation.apply(z)))
    }

    fn propagate(&self, adj_norm: &Tensor2D, features: &Tensor2D) -> Result<Tensor2D> {
        if adj_norm.rows() != adj_norm.cols() || adj_norm.cols() != features.rows() {
            return Err(Error::shape("gcn_forward", adj_norm.shape(), features.shape()));
        }
        let projected = features.matmul(&self.weights)?;
        adj_norm.matmul(&projected)
    }

    /// Propagation for rows attached to the training graph:
    /// `activation(self_coeff .* (X_eval W) + C (X_train W))`.
    pub fn infer_cross(
        &self,
        cross: &CrossGraph,
        eval_features: &Tensor2D,
        train_features: &Tensor2D,
    ) -> Result<Tensor2D> {
        let own = eval_features.matmul(&self.weights)?;
        let neighbor = cross.coeff.matmul(&train_features.matmul(&self.weights)?)?;
        let mut pre = neighbor;
        for i in 0..pre.rows() {
            let s = cross.self_coeff[i];
            for (p, o) in pre.row_mut(i).iter_mut().zip(own.row(i)) {
                *p += s * o;
            }
        }
        Ok(pre.map(|z| self.activation.apply(z)))
    }

    /// Backward pass; the adjacency is a constant, so gradients flow to the
    /// features and the layer weights only.
    pub fn backward(
        &self,
        adj_norm: &Tensor2D,
        cache: &GcnCache,
        upstream: &Tensor2D,
    ) -> Result<GcnGrads> {
        if upstream.shape() != cache.pre.shape() {
            return Err(Error::shape(
                "gcn_backward",
                upstream.shape(),
                cache.pre.shape(),
            ));
        }
        let mut dpre = upstream.clone();
        for (g, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
            *g *= self.activation.derivative(z);
        }
        // d(XW) = A_hat^T dPre
        let dprojected = adj_norm.transpose().matmul(&dpre)?;
        let weight_grad = cache.features.transpose().matmul(&dprojected)?;
        let feature_grad = dprojected.matmul(&self.weights.transpose())?;
        Ok(GcnGrads {
            features: feature_grad,
            weights: weight_grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_hand_values() {
        let pts = Tensor2D::from_rows(&[vec![0.0], vec![3.0]]).unwrap();
        let d = pairwise_sq_dist(&pts).unwrap();
        assert_eq!(d.data(), &[0.0, 9.0, 9.0, 0.0]);

        let pts = Tensor2D::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let d = pairwise_sq_dist(&pts).unwrap();
        assert_abs_diff_eq!(d.get(0, 1), 25.0, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_identical_points_are_zero() {
        let pts = Tensor2D::from_rows(&vec![vec![1.0, 2.0]; 4]).unwrap();
        let d = pairwise_sq_dist(&pts).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pairwise_needs_two_points() {
        let pts = Tensor2D::from_rows(&[vec![1.0]]).unwrap();
        assert!(pairwise_sq_dist(&pts).is_err());
    }

    #[test]
    fn can_weights_line_example() {
        // Points 0, 1, 10 with k = 1: row 0 keeps only point 1 with
        // weight (phi - d01) / (phi - d01) = 1, where phi = d02 = 100.
        let pts = Tensor2D::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]).unwrap();
        let dist = pairwise_sq_dist(&pts).unwrap();
        let m = can_weights(&dist, 1).unwrap();
        assert_abs_diff_eq!(m.get(0, 1), 1.0, epsilon = 1e-12);
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn can_weights_equilateral_falls_back_to_uniform() {
        // Four points with all pairwise squared distances equal: a regular
        // tetrahedron. k = 2 keeps two neighbors at 1/2 each.
        let pts = Tensor2D::from_rows(&[
            vec![1.0, 1.0, 1.0],
            vec![1.0, -1.0, -1.0],
            vec![-1.0, 1.0, -1.0],
            vec![-1.0, -1.0, 1.0],
        ])
        .unwrap();
        let dist = pairwise_sq_dist(&pts).unwrap();
        let m = can_weights(&dist, 2).unwrap();
        for i in 0..4 {
            let positive: Vec<f64> = m.row(i).iter().copied().filter(|&w| w > 0.0).collect();
            assert_eq!(positive.len(), 2);
            for w in positive {
                assert_abs_diff_eq!(w, 0.5, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn can_weights_k_out_of_range() {
        let pts = Tensor2D::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let dist = pairwise_sq_dist(&pts).unwrap();
        assert!(can_weights(&dist, 2).is_err());
        assert!(can_weights(&dist, 0).is_err());
    }

    #[test]
    fn can_rows_sum_to_one_and_stay_sparse() {
        let mut rng = SeededRng::new(11);
        for trial in 0..20 {
            let n = 8 + (trial % 40);
            let k = 1 + (trial % 6).min(n - 2);
            let pts = Tensor2D::new(
                n,
                3,
                (0..n * 3).map(|_| rng.normal()).collect(),
            )
            .unwrap();
            let dist = pairwise_sq_dist(&pts).unwrap();
            let m = can_weights(&dist, k).unwrap();
            for i in 0..n {
                let row = m.row(i);
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
                let nonzero = row.iter().filter(|&&w| w > 0.0).count();
                assert!(nonzero <= k, "row {i}: {nonzero} > k={k}");
            }
        }
    }

    #[test]
    fn can_weights_decrease_with_distance() {
        let mut rng = SeededRng::new(5);
        let n = 20;
        let pts = Tensor2D::new(n, 2, (0..n * 2).map(|_| rng.normal()).collect()).unwrap();
        let dist = pairwise_sq_dist(&pts).unwrap();
        let m = can_weights(&dist, 5).unwrap();
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    if m.get(i, j) > 0.0 && m.get(i, l) > 0.0 && dist.get(i, j) < dist.get(i, l) {
                        assert!(m.get(i, j) >= m.get(i, l));
                    }
                }
            }
        }
    }

    #[test]
    fn symmetrize_halves_one_directional_edges() {
        let m = Tensor2D::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let a = symmetrize(&m).unwrap();
        assert_eq!(a.data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn symmetrize_is_exact_fixed_point_and_bitwise() {
        let mut rng = SeededRng::new(3);
        let m = Tensor2D::new(6, 6, (0..36).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let a = symmetrize(&m).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(a.get(i, j).to_bits(), a.get(j, i).to_bits());
            }
        }
        assert_eq!(symmetrize(&a).unwrap(), a);
    }

    #[test]
    fn normalize_no_edges_gives_identity() {
        let a = Tensor2D::zeros(2, 2);
        let (norm, degrees) = normalize_adj(&a).unwrap();
        assert_eq!(norm, Tensor2D::identity(2));
        assert_eq!(degrees, vec![1.0, 1.0]);
    }

    #[test]
    fn normalize_two_node_chain() {
        let a = Tensor2D::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (norm, _) = normalize_adj(&a).unwrap();
        for &v in norm.data() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_preserves_symmetry() {
        let mut rng = SeededRng::new(17);
        let m = Tensor2D::new(7, 7, (0..49).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let a = symmetrize(&m).unwrap();
        let (norm, _) = normalize_adj(&a).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert!((norm.get(i, j) - norm.get(j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gcn_identity_configuration_is_identity_map() {
        let layer = GcnLayer {
            weights: Tensor2D::identity(3),
            activation: Activation::Identity,
        };
        let x = Tensor2D::from_rows(&[
            vec![1.0, -2.0, 0.5],
            vec![0.0, 3.0, 1.0],
            vec![2.0, 2.0, 2.0],
        ])
        .unwrap();
        let (out, _) = layer.forward(&Tensor2D::identity(3), &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn gcn_uniform_adjacency_averages_rows() {
        let layer = GcnLayer {
            weights: Tensor2D::identity(2),
            activation: Activation::Identity,
        };
        let adj = Tensor2D::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let x = Tensor2D::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let (out, _) = layer.forward(&adj, &x).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn gcn_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(23);
        let n = 3;
        let d_in = 3;
        let d_out = 2;
        let adj_raw = Tensor2D::new(
            n,
            n,
            (0..n * n).map(|_| rng.uniform(0.0, 1.0)).collect(),
        )
        .unwrap();
        let (adj, _) = normalize_adj(&symmetrize(&adj_raw).unwrap()).unwrap();
        let x = Tensor2D::new(n, d_in, (0..n * d_in).map(|_| rng.normal()).collect()).unwrap();
        let layer = GcnLayer {
            weights: Tensor2D::new(
                d_in,
                d_out,
                (0..d_in * d_out).map(|_| rng.normal()).collect(),
            )
            .unwrap(),
            activation: Activation::Softplus,
        };
        // Scalar loss: sum of coeff .* output.
        let coeff =
            Tensor2D::new(n, d_out, (0..n * d_out).map(|_| rng.normal()).collect()).unwrap();
        let loss = |layer: &GcnLayer, x: &Tensor2D| -> f64 {
            let out = layer.infer(&adj, x).unwrap();
            out.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer.forward(&adj, &x).unwrap();
        let grads = layer.backward(&adj, &cache, &coeff).unwrap();
        let h = 1e-5;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            let an = grads.features.data()[idx];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-4);
        }
        for idx in 0..layer.weights.data().len() {
            let mut lp = layer.clone();
            lp.weights.data_mut()[idx] += h;
            let mut lm = layer.clone();
            lm.weights.data_mut()[idx] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            let an = grads.weights.data()[idx];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn cross_attachment_reproduces_training_normalization() {
        // An eval row placed exactly on a training row should aggregate its
        // nearest training neighbors with the same closed-form weights.
        let train = Tensor2D::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![4.0, 4.0],
        ])
        .unwrap();
        let g = TrainGraph::build(&train, 2).unwrap();
        let eval = Tensor2D::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let cross = CrossGraph::build(&eval, &train, &g.degrees, 2).unwrap();
        let row_sum: f64 = cross.coeff.row(0).iter().sum::<f64>();
        assert!(row_sum > 0.0);
        assert_abs_diff_eq!(cross.self_coeff[0], 0.5, epsilon = 1e-12);
        // neighbors are the two nearest training rows
        assert!(cross.coeff.get(0, 3) == 0.0);
    }
}
