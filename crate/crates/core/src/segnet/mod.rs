//! Deterministic 3D U-Net backbone: architecture, BCE+Dice training loss,
//! overlap metrics, and plain (non-Bayesian) training with optional layer
//! freezing.

pub mod loss;
pub mod params;
pub mod train;
pub mod unet;

pub use loss::{bce_dice_loss, bce_dice_loss_backward, dice_metric, iou_metric};
pub use params::ParamSet;
pub use train::{train_plain, train_plain_with_hook, TrainPlainConfig};
pub use unet::{build_unet, unet_backward, unet_forward, Init, UNetConfig};
