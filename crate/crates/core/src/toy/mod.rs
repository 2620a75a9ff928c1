//! Desk-scale task for the prior-enhanced classifier: synthetic scenes,
//! a baseline and an enhanced proposal classifier, training, evaluation
//! and ablations.

pub mod ablation;
pub mod model;
pub mod task;
pub mod train;

pub use ablation::{
    config_hash, merge_ablation_csv, run_ablation, standard_grid, timings_csv, AblationCase,
    AblationRow,
};
pub use model::{argmax_rows, ModelConfig, ToyModel};
pub use task::{
    generate_corpus, generate_scene, generate_scenes, sample_objects, GeneratedCorpus, Layout,
    SceneKind, ToyScene, ToyTaskSpec,
};
pub use train::{
    batch_loss, evaluate, final_metrics, fmt_f64, metrics_csv, score, train, Metrics, StepLog,
    TrainConfig,
};
