//! Sparse-annotation collaborative labeling for volumetric image
//! segmentation: pseudo labels from argmax self-training and from
//! registration-based propagation, fused by intersection, then a final
//! segmentation network trained on the mixed labels.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod fusion;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod mhd;
pub mod params;
pub mod phantom;
pub mod pipeline;
pub mod reg;
pub mod semi;
pub mod trainer;
mod train_common;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};

/// Test-only access to internal training steps (benchmarks and oracles).
#[doc(hidden)]
pub mod test_support {
    use ndarray::Array2;

    use crate::autodiff::AdamState;
    use crate::error::Result;
    use crate::loss::SegLossConfig;
    use crate::unet::UNet;

    pub fn supervised_step_for_bench(
        net: &mut UNet<f32>,
        batch: &[(Array2<f32>, Array2<u8>)],
        loss_cfg: &SegLossConfig,
        lr: f32,
        adam: &mut AdamState<f32>,
    ) -> Result<f64> {
        crate::train_common::supervised_step(net, batch, loss_cfg, lr, adam)
    }
}
