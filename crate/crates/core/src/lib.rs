//! Prior-guided multi-organ segmentation.
//!
//! The model couples a text/image prior aligner ([`text_prior`]), a two-stage
//! upsampling decoder with deformable guide injection ([`decoder_fusion`]) and
//! an iterative hypernetwork mask refiner ([`mask_optimizer`]) on top of a
//! frozen, LoRA-adapted ViT encoder ([`lora`]). Everything runs on a small
//! reverse-mode autodiff tape ([`autodiff`]) so each stage can be gradient
//! checked in double precision and trained on CPU.

pub mod autodiff;
pub mod decoder_fusion;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod losses_metrics;
pub mod mask_optimizer;
pub mod nn;
pub mod pipeline;
pub mod text_prior;

pub use autodiff::{Graph, Real, Var};
pub use error::{Error, Result};

/// Organ classes in report column order. Class id = index + 1; 0 is background.
pub const ORGANS: [&str; 8] =
    ["spleen", "kidney_r", "kidney_l", "gallbladder", "liver", "stomach", "aorta", "pancreas"];

/// Number of classes including background.
pub const NUM_CLASSES: usize = ORGANS.len() + 1;

/// Class id of an organ name.
pub fn organ_class(name: &str) -> Result<usize> {
    ORGANS
        .iter()
        .position(|o| *o == name)
        .map(|i| i + 1)
        .ok_or_else(|| Error::Vocabulary(name.to_string()))
}
