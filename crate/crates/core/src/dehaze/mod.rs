//! GAN dehazing: encoder–decoder generator, convolutional discriminator,
//! adversarial training and full-reference image metrics.

mod metrics;
mod network;
mod train;

pub use metrics::{
    capped_psnr, image_metrics, mse_255, psnr_from_mse, rmse_from_mse, ssim, ImageQualityReport, PSNR_CAP_DB,
};
pub use network::{Backbone, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
pub use train::{
    generator_loss, mean_psnr, reconstruction_loss, train_dehazer, DehazeEpochLog, DehazeTrainConfig,
    DehazeTrainOutput, ImagePair,
};
