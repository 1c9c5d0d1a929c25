//! End-to-end orchestration: datasets, training, evaluation, and model
//! persistence.

pub mod dataset;
pub mod io;
pub mod metrics;
pub mod model;
pub mod train;

pub use dataset::{
    gen_synthetic, inject_conflict, load_multiview_csv, save_multiview_csv, ConflictMode,
    ConflictSpec, MultiViewDataset, SyntheticSpec,
};
pub use io::{load_model, save_model};
pub use metrics::{eval_outputs, evaluate, MetricsReport, Split, SplitMetrics};
pub use model::{AlphaSource, EvalOutputs, ModelBundle, ModelGrads, ModelHyper, TrainTrace, ViewNet};
pub use train::{train, EpochRecord, TrainOutcome, TrainSettings};
