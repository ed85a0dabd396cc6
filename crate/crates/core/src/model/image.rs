//! Strided convolutional image encoder.

use super::ModelConfig;
use crate::autodiff::{conv2d, BoundParams, Tape, Var};
use crate::error::{Error, Result};
use crate::render::RgbImage;

/// Encode an RGB image into `[N_I, F_I]` localized features: a stack of
/// stride-2 3x3 convolutions (ReLU between layers, linear last), with the
/// final grid flattened to rows.
pub fn encode_image(
    img: &RgbImage,
    cfg: &ModelConfig,
    bound: &BoundParams,
    tape: &Tape,
) -> Result<Var> {
    if img.height != cfg.image_height || img.width != cfg.image_width {
        return Err(Error::dimension(
            "encode_image",
            format!(
                "image {}x{} but config expects {}x{}",
                img.height, img.width, cfg.image_height, cfg.image_width
            ),
        ));
    }
    let mut x = tape.constant(vec![3, img.height, img.width], img.data.clone())?;
    let layers = cfg.image_channels.len();
    for l in 0..layers {
        x = conv2d(
            &x,
            bound.var(&format!("img.conv{l}.w")),
            bound.var(&format!("img.conv{l}.b")),
            2,
            1,
        )?;
        if l + 1 < layers {
            x = x.relu();
        }
    }
    let shape = x.shape();
    let (c, grid) = (shape[0], shape[1] * shape[2]);
    x.reshape(vec![c, grid])?.transpose()
}
