//! Toy encoder with KNN fusion, a synthetic rare-token task and the
//! experiments built on them (overlap sweep, placement ablation, catalog
//! swap).

mod block;
mod experiments;
mod model;
mod task;
mod train;

pub use block::BlockParams;
pub use experiments::{
    default_overlap_grid, evaluate, evaluate_with_memory, layer_ablation, measure_latency, overlap_sweep, predict,
    spearman, standard_site_sets, swap_catalog_eval, AblationRow, EvalReport, EvalRetrieval, SweepPoint,
};
pub use model::{EncoderConfig, EncoderModel, ModelParams};
pub use task::{SyntheticTask, TaskConfig, TokenKind, Utterance, MAX_VOCAB};
pub use train::{cross_entropy, mean_loss, train, TrainConfig, TrainReport};
