//! # cpr
//!
//! Cascaded pose regression with linear stages, fitted greedily one stage at
//! a time and then tuned end to end by backpropagating the final pose error
//! through every stage.
//!
//! The pieces, bottom up:
//!
//! - [`numerics`]: a small dense matrix type and the ridge solver.
//! - [`raster`]: images, a clamped bilinear sampler and its exact gradient,
//!   Gaussian blur, PGM I/O.
//! - [`pose`]: similarity and landmark poses, the warp from the reference
//!   square into the image, and its Jacobian.
//! - [`features`]: pose-indexed intensities and their Jacobian with respect
//!   to the pose.
//! - [`cascade`]: inference, greedy training, gradients, SGD fine-tuning.
//! - [`data`]: the synthetic task, dataset directories, model files.
//! - [`gradcheck`]: finite-difference verification of the gradients.
//!
//! ```
//! use cpr::{gen_synthetic, train_greedy, PoseKind, PoseModel, SynthConfig, TrainConfig};
//!
//! let synth = SynthConfig { n: 40, width: 32, height: 32, object_scale: 8.0,
//!                           translation_range: 4.0, ..Default::default() };
//! let data = gen_synthetic(&synth, PoseModel::new(PoseKind::Similarity, 8.0)?)?;
//! let cfg = TrainConfig { stages: 3, n_aug: 2, ..Default::default() };
//! let model = train_greedy(&data, &cfg)?;
//! assert_eq!(model.num_stages(), 3);
//! # Ok::<(), cpr::Error>(())
//! ```

pub mod cascade;
pub mod data;
mod error;
pub mod features;
pub mod gradcheck;
pub mod numerics;
pub mod pose;
pub mod raster;

#[cfg(doctest)]
mod book {
    macro_rules! chapters {
        ($($name:ident => $file:literal),* $(,)?) => {
            $(
                #[doc = include_str!(concat!("../../../book/src/", $file))]
                pub mod $name {}
            )*
        };
    }
    chapters! {
        introduction => "introduction.md",
        sampling => "sampling.md",
        poses => "poses.md",
        features => "features.md",
        greedy => "greedy.md",
        backprop => "backprop.md",
        finetuning => "finetuning.md",
        formats => "formats.md",
        cli => "cli.md",
        results => "results.md",
    }
}

pub use cascade::{
    finetune_bp, train_greedy, train_greedy_with_report, CascadeModel, FinetuneOutcome,
    GradientFault, Gradients, GreedyReport, PreparedSample, Stage, TrainConfig, Trajectory,
};
pub use data::{
    gen_synthetic, load_dataset, load_model, save_dataset, save_model, Dataset, Sample, SynthConfig,
};
pub use error::{Error, Result};
pub use features::{FeatureConfig, FeatureMode, FeatureSpec};
pub use numerics::{mat_vec, ridge_fit, Mat, RidgeFit};
pub use pose::{Pose, PoseKind, PoseModel, RefPoint};
pub use raster::Image;
