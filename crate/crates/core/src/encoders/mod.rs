//! The frozen dual encoder: a locality-aware vision transformer and a small
//! transformer text tower sharing a joint embedding space.

mod block;
mod mask;
mod params;
mod text;
pub mod tokenizer;
mod visual;

pub use mask::LocalityMask;
pub use params::{Bound, ParamStore};
pub use text::{TextConfig, TextEncoder, TextVars, TOKEN_TABLE};
pub use visual::{
    DensePath, ImageFeatures, LatBlockResult, VisualConfig, VisualEncoder, VisualOutputs,
    VisualVars,
};

pub(crate) use params::normal_tensor;

use rand::Rng;

use crate::error::Result;

/// Paired encoders plus the logit temperature learned during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    /// Logit temperature τ; scores are `sigmoid(cos / τ)`.
    pub tau: f32,
}

impl DualEncoder {
    pub fn init<R: Rng>(visual: VisualConfig, text: TextConfig, tau: f32, rng: &mut R) -> Result<Self> {
        if visual.joint_dim != text.width {
            return Err(crate::error::Error::Invalid(format!(
                "joint dim {} differs from text width {}",
                visual.joint_dim, text.width
            )));
        }
        Ok(Self {
            visual: VisualEncoder::init(visual, rng)?,
            text: TextEncoder::init(text, rng),
            tau,
        })
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }
}
