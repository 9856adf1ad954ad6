//! The detector network and the patch classifier used to pretrain it.

pub mod blocks;
pub mod classifier;
pub mod config;
pub mod pianet;

pub use blocks::{ConvBlock, DecovBlock, Head};
pub use classifier::{build_stage1_classifier, softmax_cross_entropy, transfer_features, Stage1Classifier, FEATURE_PREFIX};
pub use config::{PiaNetConfig, ScaleSpec};
pub use pianet::{
    build_pianet, expected_layer_table, ggo_probability, source_pyramid, FeatureExtractor, PiaNet, ProbeRow,
    RawPrediction, ScaleOutput,
};
