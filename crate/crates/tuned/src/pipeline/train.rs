//! Full-batch training loop with divergence handling and plateau stopping.

use crate::error::{Error, Result};
use crate::evidence::{ConsensusMode, FusionKind};
use crate::fusion::FusionBackend;
use crate::losses::{total_loss, LabelBatch, LossConfig};
use crate::nn::{SgdState, Tensor2D};

use super::dataset::MultiViewDataset;
use super::model::{argmax_rows, AlphaSource, ModelBundle, ModelHyper};

/// Everything a training run needs besides the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub hidden_dim: usize,
    pub gcn_depth: usize,
    pub k_neighbors: usize,
    pub psi: FusionKind,
    pub phi: FusionKind,
    pub backend: FusionBackend,
    pub tau: f64,
    pub alpha_source: AlphaSource,
    pub consensus_mode: ConsensusMode,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            gcn_depth: 1,
            k_neighbors: 10,
            psi: FusionKind::Summation,
            phi: FusionKind::Summation,
            backend: FusionBackend::SMrf,
            tau: 0.7,
            alpha_source: AlphaSource::Conditioned,
            consensus_mode: ConsensusMode::Mean,
            loss: LossConfig::default(),
            learning_rate: 0.003,
            momentum: 0.9,
            epochs: 300,
            patience: 30,
            seed: 0,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        Ok(())
    }

    pub fn hyper_for(&self, dataset: &MultiViewDataset) -> ModelHyper {
        ModelHyper {
            view_dims: dataset.views.iter().map(|v| v.cols()).collect(),
            classes: dataset.classes,
            hidden_dim: self.hidden_dim,
            gcn_depth: self.gcn_depth,
            k_neighbors: self.k_neighbors,
            psi: self.psi,
            phi: self.phi,
            backend: self.backend,
            tau: self.tau,
            alpha_source: self.alpha_source,
            consensus_mode: self.consensus_mode,
        }
    }
}

/// One row of the epoch log.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ace_mean: f64,
    pub loss_kl_mean: f64,
    pub loss_con: f64,
    pub lambda_s: f64,
    pub train_acc: f64,
    /// Snapshot of the view-similarity matrix when the selective backend
    /// is active.
    pub smrf_weights: Option<Tensor2D>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,loss_total,loss_ace_mean,loss_kl_mean,loss_con,lambda_s,train_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.loss_total,
            self.loss_ace_mean,
            self.loss_kl_mean,
            self.loss_con,
            self.lambda_s,
            self.train_acc
        )
    }
}

/// Result of a training run. `diverged` carries the diagnostic when the
/// loss went non-finite; the model is then the last finite checkpoint.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    pub log: Vec<EpochRecord>,
    pub diverged: Option<String>,
}

/// Trains a model on the dataset's train split. Deterministic per seed.
pub fn train(dataset: &MultiViewDataset, settings: &TrainSettings) -> Result<TrainOutcome> {
    dataset.validate()?;
    settings.validate()?;
    if dataset.train_idx.is_empty() {
        return Err(Error::Dataset("train split is empty".to_string()));
    }
    let inputs: Vec<Tensor2D> = (0..dataset.num_views())
        .map(|v| dataset.gather(v, &dataset.train_idx))
        .collect();
    let labels = dataset.labels_at(&dataset.train_idx);
    let y = LabelBatch::from_labels(&labels, dataset.classes)?;

    let mut model = ModelBundle::init(settings.hyper_for(dataset), settings.seed)?;
    let graphs = model.build_graphs(&inputs)?;
    let mut optimizer = if settings.learning_rate > 0.0 {
        Some(SgdState::new(settings.learning_rate, settings.momentum)?)
    } else {
        None
    };

    let mut log = Vec::with_capacity(settings.epochs);
    let mut last_good = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut epochs_since_best = 0usize;

    for epoch in 0..settings.epochs {
        let trace = model.forward_train(&inputs, &graphs, settings.loss.evidence_clip, None)?;
        let per_view_alpha = trace.per_view_alpha(settings.alpha_source);
        let fused_alpha = trace.fused_alpha();
        let total = total_loss(
            &per_view_alpha,
            Some(&fused_alpha),
            &y,
            epoch,
            settings.loss.annealing_epochs,
            settings.loss.lambda_t,
            settings.loss.gamma_frob,
            settings.loss.frob_literal,
        )?;
        if !total.value.is_finite() {
            last_good.epochs_trained = epoch;
            return Ok(TrainOutcome {
                model: last_good,
                log,
                diverged: Some(format!(
                    "loss became non-finite at epoch {epoch} (value {})",
                    total.value
                )),
            });
        }

        let predictions = argmax_rows(&fused_alpha);
        let train_acc = predictions
            .iter()
            .zip(&labels)
            .filter(|(p, t)| p == t)
            .count() as f64
            / labels.len() as f64;
        log.push(EpochRecord {
            epoch,
            loss_total: total.value,
            loss_ace_mean: total.ace_mean,
            loss_kl_mean: total.kl_mean,
            loss_con: total.con,
            lambda_s: total.lambda_s,
            train_acc,
            smrf_weights: trace.fused.graph.as_ref().map(|g| g.weights.clone()),
        });

        let grads = model.backprop(
            &graphs,
            &trace,
            &total.per_view_grads,
            total.fused_grad.as_ref(),
        )?;
        if let Some(opt) = optimizer.as_mut() {
            let grad_slices = grads.flat_slices();
            let mut param_slices = model.param_slices_mut();
            opt.step(&mut param_slices, &grad_slices)?;
            model.project_constrained_params();
        }
        if !model.params_are_finite() {
            last_good.epochs_trained = epoch;
            return Ok(TrainOutcome {
                model: last_good,
                log,
                diverged: Some(format!("parameters became non-finite at epoch {epoch}")),
            });
        }
        last_good = model.clone();

        // Plateau stopping, armed only once the KL ramp is complete: while
        // lambda_s still grows the objective itself changes each epoch, so
        // loss comparisons across epochs are not meaningful.
        if epoch >= settings.loss.annealing_epochs {
            if total.value < best_loss - 1e-9 {
                best_loss = total.value;
                epochs_since_best = 0;
            } else {
                epochs_since_best += 1;
            }
            if epochs_since_best >= settings.patience {
                break;
            }
        }
    }

    model.epochs_trained = log.len();
    Ok(TrainOutcome {
        model,
        log,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::dataset::{gen_synthetic, SyntheticSpec};

    fn quick_settings(seed: u64) -> TrainSettings {
        TrainSettings {
            hidden_dim: 8,
            k_neighbors: 4,
            epochs: 40,
            loss: LossConfig {
                annealing_epochs: 10,
                ..LossConfig::default()
            },
            seed,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_and_loss() {
        let ds = gen_synthetic(&SyntheticSpec::uniform(60, 2, 3, 4, 1.0, 1)).unwrap();
        let mut settings = quick_settings(2);
        settings.learning_rate = 0.0;
        settings.epochs = 5;
        let outcome = train(&ds, &settings).unwrap();
        assert!(outcome.diverged.is_none());
        // With frozen parameters only the annealing weight moves; every
        // component and any epochs sharing a lambda value must be constant.
        let first = outcome.log.first().unwrap();
        for rec in &outcome.log {
            assert_eq!(rec.loss_ace_mean, first.loss_ace_mean);
            assert_eq!(rec.loss_con, first.loss_con);
            assert_eq!(rec.train_acc, first.train_acc);
            if rec.lambda_s == first.lambda_s {
                assert_eq!(rec.loss_total, first.loss_total);
            }
        }
        let mut fresh = ModelBundle::init(settings.hyper_for(&ds), settings.seed).unwrap();
        let mut trained = outcome.model.clone();
        assert_eq!(trained.params_to_vec(), fresh.params_to_vec());
    }

    #[test]
    fn same_seed_gives_identical_logs_and_parameters() {
        let ds = gen_synthetic(&SyntheticSpec::uniform(60, 2, 3, 4, 1.0, 7)).unwrap();
        let settings = quick_settings(3);
        let mut a = train(&ds, &settings).unwrap();
        let mut b = train(&ds, &settings).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.loss_total.to_bits(), rb.loss_total.to_bits());
            assert_eq!(ra.train_acc.to_bits(), rb.train_acc.to_bits());
        }
        assert_eq!(
            a.model.params_to_vec(),
            b.model.params_to_vec(),
            "parameter trajectories must be bit-identical"
        );
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let mut ds = gen_synthetic(&SyntheticSpec::uniform(60, 2, 3, 4, 1.0, 1)).unwrap();
        ds.test_idx.extend_from_slice(&ds.train_idx);
        ds.train_idx.clear();
        ds.test_idx.sort_unstable();
        assert!(train(&ds, &quick_settings(0)).is_err());
    }
}
