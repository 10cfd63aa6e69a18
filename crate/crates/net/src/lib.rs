//! Language-conditioned promptable segmentation: the model, its loss,
//! the two-phase training curriculum and benchmark evaluation.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod schedule;
pub mod tokenizer;
pub mod train;

pub use config::{ModelConfig, Scale};
pub use error::{NetError, Result};
pub use loss::{segmentation_loss, segmentation_loss_tensor, LossValue};
pub use model::{AdaptedPrompt, MaskPrediction, PromptEncoding, SegModel};
pub use schedule::LrSchedule;
pub use params::{ParamGroup, ParamStore};
pub use preprocess::{PreparedImage, ProbabilityMap};
pub use checkpoint::{Checkpoint, CheckpointMeta, LossStats};
pub use curriculum::{sample_batch, Curriculum, DataGroup, Draw, DrawCategory, GroupId, Phase};
pub use optim::{AdamW, AdamWConfig};
pub use train::{loss_log_csv, train_phase, LossRow, TrainConfig, TrainOptions, TrainOutcome};
pub use evaluation::{evaluate_predictions, predict_dataset, EvaluationReport, PredictionSet, DEFAULT_THRESHOLD};
