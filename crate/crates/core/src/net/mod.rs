//! Hand-object interaction network: encoder, per-hand heads, fusion,
//! losses, training and inference.

pub mod data;
pub mod infer;
pub mod layers;
pub mod loss;
pub mod model;
pub mod train;
pub mod checkpoint;

pub use data::{load_samples, samples_from_scenes, Sample};
pub use loss::{compute_loss, LossBreakdown, LossConfig, LossWeights};
pub use model::{
    late_fusion, AttributePrediction, DepthMap, Features, KeypointHeatmaps, KeypointPrediction, LateFusion, Model, ModelConfig,
    RawDetection, FUSION_CHANNELS, HFV_DIM,
};
pub use infer::{attribute_accuracy, run_inference, AccuracyReport, ContactSource, Detection, DetectionKind, HandAttributes, InferMode, InferOptions};
pub use train::{stratified_subset, train, train_phase, EpochRecord, OptimizerKind, PhaseConfig, Regime, TrainConfig, TrainData, TrainOutcome};
