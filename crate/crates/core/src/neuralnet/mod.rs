//! The per-lead convolutional classifier with hand-written gradients.

mod io;
pub mod layers;
mod model;
mod train;

pub use io::{read_model, write_model, Architecture, ModelMeta, MODEL_FILE, WEIGHTS_FILE};
pub use layers::{conv1d_forward, conv1d_reference, softmax};
pub use model::{
    accuracy, accuracy_from_probs, forward, is_correct, loss_and_gradients, loss_and_gradients_indexed,
    max_gradient_error, predict_tip, sgd_step, Activations, Gradients, ModelParameters, Shape, CLASSES,
    FILTERS, KERNEL, POOL, TIP,
};
pub(crate) use model::Net;
pub use train::{train_model, Dataset, EpochRecord, TrainConfig, TrainLog};
