//! Training objectives over Dirichlet parameters, each returning its value
//! together with the analytic gradient with respect to the parameters.

use crate::error::{Error, Result};
use crate::nn::{digamma, lgamma, trigamma, Tensor2D};

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Annealing horizon for the KL weight ramp.
    pub annealing_epochs: usize,
    /// Weight of the consistency loss in the overall objective.
    pub lambda_t: f64,
    /// Coefficient on the (negated) Frobenius regularizer of the
    /// consistency loss.
    pub gamma_frob: f64,
    /// When true, the Frobenius term is the raw `-gamma * sum ||E||_F^2`;
    /// the default scales it by `1/(V*N)` for training stability.
    pub frob_literal: bool,
    /// Cap applied to evidence during training.
    pub evidence_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            annealing_epochs: 50,
            lambda_t: 1.0,
            gamma_frob: 0.01,
            frob_literal: false,
            evidence_clip: 1e4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.annealing_epochs < 1 {
            return Err(Error::Config(
                "annealing_epochs must be at least 1".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma_frob) {
            return Err(Error::Config(format!(
                "gamma_frob must lie in [0, 1], got {}",
                self.gamma_frob
            )));
        }
        if !(self.lambda_t >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_t must be non-negative, got {}",
                self.lambda_t
            )));
        }
        if !(self.evidence_clip > 0.0) {
            return Err(Error::Config(format!(
                "evidence_clip must be positive, got {}",
                self.evidence_clip
            )));
        }
        Ok(())
    }
}

/// One-hot label matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    one_hot: Tensor2D,
}

impl LabelBatch {
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut one_hot = Tensor2D::zeros(labels.len(), classes);
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::Dataset(format!(
                    "label {label} out of range for {classes} classes (row {i})"
                )));
            }
            one_hot.set(i, label, 1.0);
        }
        Ok(Self { one_hot })
    }

    pub fn matrix(&self) -> &Tensor2D {
        &self.one_hot
    }

    pub fn len(&self) -> usize {
        self.one_hot.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.one_hot.rows() == 0
    }

    pub fn classes(&self) -> usize {
        self.one_hot.cols()
    }
}

fn check_alpha(op: &'static str, alpha: &Tensor2D, y: &LabelBatch) -> Result<()> {
    if alpha.shape() != y.matrix().shape() {
        return Err(Error::shape(op, alpha.shape(), y.matrix().shape()));
    }
    if alpha.data().iter().any(|&a| !(a >= 1.0 - 1e-9)) {
        return Err(Error::contract(
            op,
            "Dirichlet parameters must be at least 1 (evidence plus one)",
        ));
    }
    Ok(())
}

/// Dirichlet-adapted cross entropy, batch mean:
/// `sum_j y_j (psi(S) - psi(alpha_j))` with `S = sum(alpha)`.
pub fn loss_ace(alpha: &Tensor2D, y: &LabelBatch) -> Result<(f64, Tensor2D)> {
    check_alpha("loss_ace", alpha, y)?;
    let n = alpha.rows();
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad = Tensor2D::zeros(n, alpha.cols());
    for r in 0..n {
        let s: f64 = alpha.row(r).iter().sum();
        let psi_s = digamma(s)?;
        let tri_s = trigamma(s)?;
        for (j, (&a, &yj)) in alpha.row(r).iter().zip(y.matrix().row(r)).enumerate() {
            if yj != 0.0 {
                value += yj * (psi_s - digamma(a)?);
            }
            let mut g = tri_s;
            if yj != 0.0 {
                g -= yj * trigamma(a)?;
            }
            grad.set(r, j, g * scale);
        }
    }
    Ok((value * scale, grad))
}

/// KL divergence from `Dir(alpha_tilde)` to the uniform Dirichlet, where
/// `alpha_tilde = y + (1 - y) .* alpha` removes the evidence of the true
/// class. Zero exactly when every off-class evidence entry is zero.
pub fn loss_kl(alpha: &Tensor2D, y: &LabelBatch) -> Result<(f64, Tensor2D)> {
    check_alpha("loss_kl", alpha, y)?;
    let n = alpha.rows();
    let k = alpha.cols();
    let scale = 1.0 / n as f64;
    let lgamma_k = lgamma(k as f64)?;
    let mut value = 0.0;
    let mut grad = Tensor2D::zeros(n, k);
    for r in 0..n {
        let y_row = y.matrix().row(r);
        let tilde: Vec<f64> = alpha
            .row(r)
            .iter()
            .zip(y_row)
            .map(|(&a, &yj)| yj + (1.0 - yj) * a)
            .collect();
        let s: f64 = tilde.iter().sum();
        let psi_s = digamma(s)?;
        let tri_s = trigamma(s)?;
        let mut row_value = lgamma(s)? - lgamma_k;
        for (j, &t) in tilde.iter().enumerate() {
            row_value += -lgamma(t)? + (t - 1.0) * (digamma(t)? - psi_s);
            let d_tilde = (t - 1.0) * trigamma(t)? - (s - k as f64) * tri_s;
            grad.set(r, j, (1.0 - y_row[j]) * d_tilde * scale);
        }
        value += row_value;
    }
    Ok((value * scale, grad))
}

/// Annealing ramp `min(1, s / T)`.
pub fn lambda_s(step: usize, total: usize) -> f64 {
    (step as f64 / total.max(1) as f64).min(1.0)
}

/// Per-view accuracy loss: cross entropy plus the annealed KL term.
/// Returns `(total, ace, kl, grad)`.
pub fn loss_acc(
    alpha: &Tensor2D,
    y: &LabelBatch,
    step: usize,
    total_steps: usize,
) -> Result<(f64, f64, f64, Tensor2D)> {
    let (ace, mut grad) = loss_ace(alpha, y)?;
    let weight = lambda_s(step, total_steps);
    let (kl, kl_grad) = loss_kl(alpha, y)?;
    if weight != 0.0 {
        grad.add_assign(&kl_grad.scale(weight))?;
    }
    Ok((ace + weight * kl, ace, kl, grad))
}

fn cosine_and_grads(a: &[f64], b: &[f64]) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let ga: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let gb: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    Some((cos, ga, gb))
}

/// Cross-view consistency loss over per-view evidence matrices:
/// a negated mean pairwise cosine (per sample, then batch-averaged), plus
/// the within-view spread around the mean evidence, minus a Frobenius
/// magnitude regularizer. Rows with zero norm contribute nothing to the
/// cosine term.
pub fn loss_con(
    evidence: &[Tensor2D],
    gamma_frob: f64,
    frob_literal: bool,
) -> Result<(f64, Vec<Tensor2D>)> {
    let v = evidence.len();
    if v < 2 {
        return Err(Error::contract(
            "loss_con",
            format!("needs at least 2 views, got {v}"),
        ));
    }
    let (n, k) = evidence[0].shape();
    for e in evidence {
        if e.shape() != (n, k) {
            return Err(Error::shape("loss_con", (n, k), e.shape()));
        }
    }
    let mut value = 0.0;
    let mut grads: Vec<Tensor2D> = (0..v).map(|_| Tensor2D::zeros(n, k)).collect();

    // Pairwise cosine term.
    let pair_scale = -2.0 / (v as f64 * (v - 1) as f64) / n as f64;
    for i in 0..v {
        for j in (i + 1)..v {
            for r in 0..n {
                if let Some((cos, gi, gj)) =
                    cosine_and_grads(evidence[i].row(r), evidence[j].row(r))
                {
                    value += pair_scale * cos;
                    for (c, g) in gi.iter().enumerate() {
                        let cur = grads[i].get(r, c);
                        grads[i].set(r, c, cur + pair_scale * g);
                    }
                    for (c, g) in gj.iter().enumerate() {
                        let cur = grads[j].get(r, c);
                        grads[j].set(r, c, cur + pair_scale * g);
                    }
                }
            }
        }
    }

    // Spread around the per-view mean. Because the mean minimizes the
    // spread, its dependence on the evidence drops out of the gradient.
    let spread_scale = 1.0 / (v * n) as f64;
    for (view, grad) in evidence.iter().zip(grads.iter_mut()) {
        let mut mean = vec![0.0; k];
        for r in 0..n {
            for (m, &x) in mean.iter_mut().zip(view.row(r)) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for r in 0..n {
            for c in 0..k {
                let d = view.get(r, c) - mean[c];
                value += spread_scale * d * d;
                let cur = grad.get(r, c);
                grad.set(r, c, cur + spread_scale * 2.0 * d);
            }
        }
    }

    // Frobenius regularizer, negated: rewards evidence magnitude.
    let frob_scale = if frob_literal {
        -gamma_frob
    } else {
        -gamma_frob / (v * n) as f64
    };
    if gamma_frob != 0.0 {
        for (view, grad) in evidence.iter().zip(grads.iter_mut()) {
            let sq: f64 = view.data().iter().map(|x| x * x).sum();
            value += frob_scale * sq;
            for (g, &x) in grad.data_mut().iter_mut().zip(view.data()) {
                *g += frob_scale * 2.0 * x;
            }
        }
    }

    Ok((value, grads))
}

/// Value and gradients of the overall objective for one batch.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub ace_mean: f64,
    pub kl_mean: f64,
    pub con: f64,
    pub lambda_s: f64,
    /// dL/d(alpha^v), one matrix per view.
    pub per_view_grads: Vec<Tensor2D>,
    /// dL/d(fused alpha), when a fused head was supplied.
    pub fused_grad: Option<Tensor2D>,
}

/// Overall objective: mean per-view accuracy loss, a supervised term on the
/// fused parameters (weight one), and the weighted consistency loss over
/// per-view evidence (`alpha - 1`).
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    per_view_alpha: &[Tensor2D],
    fused_alpha: Option<&Tensor2D>,
    y: &LabelBatch,
    step: usize,
    total_steps: usize,
    lambda_t: f64,
    gamma_frob: f64,
    frob_literal: bool,
) -> Result<TotalLoss> {
    let v = per_view_alpha.len();
    if v == 0 {
        return Err(Error::contract("total_loss", "no views"));
    }
    let view_scale = 1.0 / v as f64;
    let mut value = 0.0;
    let mut ace_mean = 0.0;
    let mut kl_mean = 0.0;
    let mut per_view_grads = Vec::with_capacity(v);
    for alpha in per_view_alpha {
        let (acc, ace, kl, grad) = loss_acc(alpha, y, step, total_steps)?;
        value += view_scale * acc;
        ace_mean += view_scale * ace;
        kl_mean += view_scale * kl;
        per_view_grads.push(grad.scale(view_scale));
    }

    let fused_grad = match fused_alpha {
        Some(alpha) => {
            let (acc, _, _, grad) = loss_acc(alpha, y, step, total_steps)?;
            value += acc;
            Some(grad)
        }
        None => None,
    };

    let mut con_value = 0.0;
    if lambda_t != 0.0 {
        let evidence: Vec<Tensor2D> = per_view_alpha
            .iter()
            .map(|a| a.map(|x| x - 1.0))
            .collect();
        let (con, con_grads) = loss_con(&evidence, gamma_frob, frob_literal)?;
        con_value = con;
        value += lambda_t * con;
        for (grad, con_grad) in per_view_grads.iter_mut().zip(con_grads) {
            grad.add_assign(&con_grad.scale(lambda_t))?;
        }
    }

    Ok(TotalLoss {
        value,
        ace_mean,
        kl_mean,
        con: con_value,
        lambda_s: lambda_s(step, total_steps),
        per_view_grads,
        fused_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SeededRng;
    use approx::assert_abs_diff_eq;

    fn labels(ls: &[usize], k: usize) -> LabelBatch {
        LabelBatch::from_labels(ls, k).unwrap()
    }

    #[test]
    fn ace_hand_values() {
        let alpha = Tensor2D::from_rows(&[vec![3.0, 1.0, 1.0]]).unwrap();
        let (v, _) = loss_ace(&alpha, &labels(&[0], 3)).unwrap();
        assert_abs_diff_eq!(v, 7.0 / 12.0, epsilon = 1e-12);

        let alpha = Tensor2D::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (v, _) = loss_ace(&alpha, &labels(&[0], 2)).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ace_is_nonnegative_and_rejects_small_alpha() {
        let mut rng = SeededRng::new(6);
        for _ in 0..200 {
            let k = 2 + rng.usize_below(4);
            let alpha =
                Tensor2D::new(1, k, (0..k).map(|_| rng.uniform(1.0, 10.0)).collect()).unwrap();
            let (v, _) = loss_ace(&alpha, &labels(&[0], k)).unwrap();
            assert!(v >= 0.0);
        }
        let alpha = Tensor2D::from_rows(&[vec![0.5, 2.0]]).unwrap();
        assert!(loss_ace(&alpha, &labels(&[0], 2)).is_err());
    }

    #[test]
    fn kl_zero_at_uniform_parameters() {
        let alpha = Tensor2D::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let (v, grad) = loss_kl(&alpha, &labels(&[0], 3)).unwrap();
        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        for &g in grad.data() {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn kl_hand_value() {
        // True class 0, off-class evidence 1 on class 1:
        // alpha_tilde = [1, 2, 1], value = ln 3 - 5/6.
        let alpha = Tensor2D::from_rows(&[vec![7.0, 2.0, 1.0]]).unwrap();
        let (v, _) = loss_kl(&alpha, &labels(&[0], 3)).unwrap();
        assert_abs_diff_eq!(v, 3.0_f64.ln() - 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_is_nonnegative() {
        let mut rng = SeededRng::new(14);
        for _ in 0..1000 {
            let k = 2 + rng.usize_below(5);
            let alpha =
                Tensor2D::new(1, k, (0..k).map(|_| rng.uniform(1.0, 8.0)).collect()).unwrap();
            let (v, _) = loss_kl(&alpha, &labels(&[rng.usize_below(k)], k)).unwrap();
            assert!(v >= -1e-12, "negative KL {v}");
        }
    }

    #[test]
    fn lambda_ramp() {
        assert_eq!(lambda_s(0, 10), 0.0);
        assert_eq!(lambda_s(5, 10), 0.5);
        assert_eq!(lambda_s(20, 10), 1.0);
        let mut prev = -1.0;
        for s in 0..30 {
            let l = lambda_s(s, 10);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn acc_composes_ace_and_kl() {
        let alpha = Tensor2D::from_rows(&[vec![4.0, 2.0]]).unwrap();
        let y = labels(&[0], 2);
        let (at_zero, ace0, _, _) = loss_acc(&alpha, &y, 0, 10).unwrap();
        let (ace, _) = loss_ace(&alpha, &y).unwrap();
        assert_abs_diff_eq!(at_zero, ace, epsilon = 1e-12);
        assert_abs_diff_eq!(ace0, ace, epsilon = 1e-12);
        let (at_end, _, _, _) = loss_acc(&alpha, &y, 25, 10).unwrap();
        let (kl, _) = loss_kl(&alpha, &y).unwrap();
        assert_abs_diff_eq!(at_end, ace + kl, epsilon = 1e-12);
    }

    #[test]
    fn con_literal_hand_value() {
        let e = Tensor2D::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (v, _) = loss_con(&[e.clone(), e], 1.0, true).unwrap();
        assert_abs_diff_eq!(v, -3.0, epsilon = 1e-12);
    }

    #[test]
    fn con_cosine_term_bottoms_out_for_identical_views() {
        let mut rng = SeededRng::new(3);
        let e = Tensor2D::new(4, 3, (0..12).map(|_| rng.uniform(0.1, 2.0)).collect()).unwrap();
        let (v, _) = loss_con(&[e.clone(), e.clone(), e.clone()], 0.0, false).unwrap();
        // cosine part is exactly -1; the spread part is non-negative
        let spread: f64 = {
            let mut mean = vec![0.0; 3];
            for r in 0..4 {
                for (m, &x) in mean.iter_mut().zip(e.row(r)) {
                    *m += x / 4.0;
                }
            }
            let mut acc = 0.0;
            for r in 0..4 {
                for c in 0..3 {
                    let d = e.get(r, c) - mean[c];
                    acc += d * d;
                }
            }
            3.0 * acc / (3.0 * 4.0)
        };
        assert_abs_diff_eq!(v, -1.0 + spread, epsilon = 1e-12);
        assert!(v >= -1.0 - 1e-12);
    }

    #[test]
    fn con_with_zero_gamma_is_bounded_below() {
        let mut rng = SeededRng::new(31);
        for _ in 0..50 {
            let views: Vec<Tensor2D> = (0..3)
                .map(|_| {
                    Tensor2D::new(3, 2, (0..6).map(|_| rng.uniform(0.0, 4.0)).collect()).unwrap()
                })
                .collect();
            let (v, _) = loss_con(&views, 0.0, false).unwrap();
            assert!(v >= -1.0 - 1e-12);
        }
    }

    #[test]
    fn con_handles_zero_rows() {
        let a = Tensor2D::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let b = Tensor2D::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (v, grads) = loss_con(&[a, b], 0.0, false).unwrap();
        assert!(v.is_finite());
        assert!(grads.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn total_reduces_to_acc_for_single_view() {
        let alpha = Tensor2D::from_rows(&[vec![3.0, 1.5], vec![1.0, 4.0]]).unwrap();
        let y = labels(&[0, 1], 2);
        let t = total_loss(&[alpha.clone()], None, &y, 3, 10, 0.0, 0.01, false).unwrap();
        let (acc, _, _, _) = loss_acc(&alpha, &y, 3, 10).unwrap();
        assert_abs_diff_eq!(t.value, acc, epsilon = 1e-12);
        assert!(t.fused_grad.is_none());
    }

    #[test]
    fn total_with_lambda_zero_drops_consistency() {
        let a1 = Tensor2D::from_rows(&[vec![3.0, 1.5]]).unwrap();
        let a2 = Tensor2D::from_rows(&[vec![2.0, 2.0]]).unwrap();
        let fused = Tensor2D::from_rows(&[vec![2.5, 1.75]]).unwrap();
        let y = labels(&[0], 2);
        let t = total_loss(&[a1.clone(), a2.clone()], Some(&fused), &y, 0, 10, 0.0, 0.01, false)
            .unwrap();
        let (acc1, _, _, _) = loss_acc(&a1, &y, 0, 10).unwrap();
        let (acc2, _, _, _) = loss_acc(&a2, &y, 0, 10).unwrap();
        let (accf, _, _, _) = loss_acc(&fused, &y, 0, 10).unwrap();
        assert_abs_diff_eq!(t.value, 0.5 * (acc1 + acc2) + accf, epsilon = 1e-12);
    }

    fn finite_difference_matches<F>(loss_of: F, alpha: &Tensor2D, analytic: &Tensor2D)
    where
        F: Fn(&Tensor2D) -> f64,
    {
        let h = 1e-5;
        for idx in 0..alpha.data().len() {
            let mut plus = alpha.clone();
            plus.data_mut()[idx] += h;
            let mut minus = alpha.clone();
            minus.data_mut()[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = analytic.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-4, "idx {idx}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn ace_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(41);
        let alpha = Tensor2D::new(3, 4, (0..12).map(|_| rng.uniform(1.1, 9.0)).collect()).unwrap();
        let y = labels(&[0, 2, 3], 4);
        let (_, grad) = loss_ace(&alpha, &y).unwrap();
        finite_difference_matches(|a| loss_ace(a, &y).unwrap().0, &alpha, &grad);
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(42);
        let alpha = Tensor2D::new(3, 3, (0..9).map(|_| rng.uniform(1.1, 9.0)).collect()).unwrap();
        let y = labels(&[1, 0, 2], 3);
        let (_, grad) = loss_kl(&alpha, &y).unwrap();
        finite_difference_matches(|a| loss_kl(a, &y).unwrap().0, &alpha, &grad);
    }

    #[test]
    fn con_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(43);
        let views: Vec<Tensor2D> = (0..3)
            .map(|_| Tensor2D::new(2, 2, (0..4).map(|_| rng.uniform(0.2, 3.0)).collect()).unwrap())
            .collect();
        let (_, grads) = loss_con(&views, 0.5, false).unwrap();
        for target in 0..3 {
            let loss_of = |a: &Tensor2D| {
                let mut vs = views.clone();
                vs[target] = a.clone();
                loss_con(&vs, 0.5, false).unwrap().0
            };
            finite_difference_matches(loss_of, &views[target], &grads[target]);
        }
    }
}
