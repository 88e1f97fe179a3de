//! Visual-inertial pose network: visual and inertial encoders, concat
//! fusion, stacked LSTM, regression head, pose loss and training.

mod network;
mod train;

pub use network::{fuse_features, pose_loss, pose_loss_graph, RecurrentState, VioConfig, VioNet};
pub use train::{
    infer_sequence, infer_sequence_with, train_vio, vio_loss, vio_loss_gradients, VioEpochLog, VioTrainOptions, VioTrainOutput,
};
