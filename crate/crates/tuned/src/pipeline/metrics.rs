//! Classification metrics and model evaluation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::CrossGraph;
use crate::nn::{SeededRng, Tensor2D};

use super::dataset::MultiViewDataset;
use super::model::{argmax_rows, EvalOutputs, ModelBundle};

/// Which split of the dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Metrics for one prediction head.
#[derive(Debug, Clone, Serialize)]
pub struct SplitMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auc_ovr: f64,
    pub mean_uncertainty: f64,
}

/// Fused metrics plus one entry per view (computed from the raw per-view
/// evidence, so view `v`'s numbers never depend on any other view).
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub fused: SplitMetrics,
    pub per_view: Vec<SplitMetrics>,
}

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .zip(truth)
        .filter(|(p, t)| p == t)
        .count() as f64
        / truth.len() as f64
}

/// Macro F1 over all classes. A class absent from the split contributes 0
/// (with a warning), matching the fixed-denominator convention.
pub fn macro_f1(predictions: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut f1_sum = 0.0;
    for c in 0..classes {
        let tp = predictions
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == c && t == c)
            .count() as f64;
        let fp = predictions
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p == c && t != c)
            .count() as f64;
        let fn_ = predictions
            .iter()
            .zip(truth)
            .filter(|(&p, &t)| p != c && t == c)
            .count() as f64;
        if !truth.iter().any(|&t| t == c) {
            log::warn!("class {c} absent from evaluation split; counting its F1 as 0");
            continue;
        }
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    f1_sum / classes as f64
}

/// One-vs-rest AUC, macro-averaged over the classes present in the split.
/// Computed by mid-rank Mann-Whitney statistics, which equals the
/// trapezoidal area under the ROC curve with tie handling.
pub fn auc_ovr(scores: &Tensor2D, truth: &[usize], classes: usize) -> f64 {
    let n = truth.len();
    let mut total = 0.0;
    let mut counted = 0usize;
    for c in 0..classes {
        let positives = truth.iter().filter(|&&t| t == c).count();
        let negatives = n - positives;
        if positives == 0 || negatives == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores
                .get(a, c)
                .partial_cmp(&scores.get(b, c))
                .unwrap()
                .then(a.cmp(&b))
        });
        // mid-ranks over tie groups
        let mut ranks = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && scores.get(order[j + 1], c) == scores.get(order[i], c) {
                j += 1;
            }
            let mid = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = mid;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..n).filter(|&i| truth[i] == c).map(|i| ranks[i]).sum();
        let auc = (rank_sum - positives as f64 * (positives as f64 + 1.0) / 2.0)
            / (positives as f64 * negatives as f64);
        total += auc;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

fn alpha_metrics(alpha: &Tensor2D, truth: &[usize], classes: usize) -> SplitMetrics {
    let probs = row_normalized(alpha);
    let predictions = argmax_rows(&probs);
    let k = alpha.cols() as f64;
    let mean_uncertainty = (0..alpha.rows())
        .map(|r| k / alpha.row(r).iter().sum::<f64>())
        .sum::<f64>()
        / alpha.rows() as f64;
    SplitMetrics {
        accuracy: accuracy(&predictions, truth),
        macro_f1: macro_f1(&predictions, truth, classes),
        auc_ovr: auc_ovr(&probs, truth, classes),
        mean_uncertainty,
    }
}

fn row_normalized(alpha: &Tensor2D) -> Tensor2D {
    let mut out = alpha.clone();
    for r in 0..out.rows() {
        let s: f64 = out.row(r).iter().sum();
        for v in out.row_mut(r) {
            *v /= s;
        }
    }
    out
}

/// Runs a forward pass over a split, attaching test rows to the training
/// graphs. Exposed separately so callers can also inspect the fusion graph
/// and evidence.
pub fn eval_outputs(
    model: &ModelBundle,
    dataset: &MultiViewDataset,
    split: Split,
) -> Result<EvalOutputs> {
    dataset.validate()?;
    let idx = match split {
        Split::Train => &dataset.train_idx,
        Split::Test => &dataset.test_idx,
    };
    if idx.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".to_string()));
    }
    if dataset.num_views() != model.num_views() {
        return Err(Error::Config(format!(
            "model has {} views but dataset has {}",
            model.num_views(),
            dataset.num_views()
        )));
    }
    for (v, view) in dataset.views.iter().enumerate() {
        if view.cols() != model.hyper.view_dims[v] {
            return Err(Error::Config(format!(
                "view {v} has {} features but the model expects {}",
                view.cols(),
                model.hyper.view_dims[v]
            )));
        }
    }
    if dataset.classes != model.hyper.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model expects {}",
            dataset.classes, model.hyper.classes
        )));
    }
    let train_inputs: Vec<Tensor2D> = (0..dataset.num_views())
        .map(|v| dataset.gather(v, &dataset.train_idx))
        .collect();
    let eval_inputs: Vec<Tensor2D> = (0..dataset.num_views())
        .map(|v| dataset.gather(v, idx))
        .collect();
    let graphs = model.build_graphs(&train_inputs)?;
    let cross = match split {
        Split::Train => None,
        Split::Test => {
            let mut cross = Vec::with_capacity(dataset.num_views());
            for v in 0..dataset.num_views() {
                cross.push(CrossGraph::build(
                    &eval_inputs[v],
                    &train_inputs[v],
                    &graphs[v].degrees,
                    model.hyper.k_neighbors,
                )?);
            }
            Some(cross)
        }
    };
    let mut rng = SeededRng::new(model.seed).derive(0xE7);
    model.forward_eval(
        &eval_inputs,
        &train_inputs,
        &graphs,
        cross.as_deref(),
        Some(&mut rng),
    )
}

/// Evaluates fused and per-view metrics on a split.
pub fn evaluate(
    model: &ModelBundle,
    dataset: &MultiViewDataset,
    split: Split,
) -> Result<MetricsReport> {
    let outputs = eval_outputs(model, dataset, split)?;
    let idx = match split {
        Split::Train => &dataset.train_idx,
        Split::Test => &dataset.test_idx,
    };
    let truth = dataset.labels_at(idx);
    let fused = alpha_metrics(&outputs.fused_alpha(), &truth, dataset.classes);
    let per_view = outputs
        .raw_evidence
        .iter()
        .map(|e| alpha_metrics(&e.map(|x| x + 1.0), &truth, dataset.classes))
        .collect();
    Ok(MetricsReport { fused, per_view })
}
