//! Trainable networks and the linear SVM scorers built on their features.

mod mlp;
mod svm;
mod train;

pub use mlp::{Forward, Layer, MlpModel};
pub(crate) use mlp::l2_normalize;
pub use svm::{svm_objectives, train_ovr_svm, SvmBank, SvmConfig};
pub use train::{
    gradients, per_class_accuracy, softmax_xent, train, train_on_targets, BatchSource, Gradients, LayerGrad,
    LossTrace, TrainConfig,
};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::exec;

/// Features of the given samples under `model`, computed in parallel.
pub fn extract_features(model: &MlpModel, dataset: &Dataset, indices: &[usize], normalize: bool) -> Result<Vec<Vec<f64>>> {
    exec::map(indices, |&i| model.extract_features(&dataset.sample(i).features, normalize))
        .into_iter()
        .collect()
}
