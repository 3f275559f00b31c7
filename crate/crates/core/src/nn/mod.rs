//! Feedforward networks, initializers, Adam and gradient clipping.

mod adam;
mod checkpoint;
mod ffnn;
mod init;

pub use adam::{clip_gradients, Adam, AdamConfig, CLIP_RANGE};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ffnn::{Activation, BoundFfnn, Ffnn, Layer, LEAKY_SLOPE};
pub use init::{ffnn_default, init_default, init_near_identity, NEAR_IDENTITY_STD};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// A network together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Trainable {
    pub net: Ffnn,
    pub opt: Adam,
    name: String,
}

impl Trainable {
    pub fn new(net: Ffnn, config: AdamConfig, name: &str) -> Self {
        let names = net.param_names(name);
        let opt = Adam::new(config, &net.params(), names);
        Trainable {
            net,
            opt,
            name: name.to_string(),
        }
    }

    /// Clips `grads` elementwise into [`CLIP_RANGE`] and applies one Adam step.
    /// Non-finite gradients are rejected before clipping could mask them.
    pub fn update(&mut self, mut grads: Vec<Array>) -> Result<()> {
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            let name = self.net.param_names(&self.name).swap_remove(i);
            return Err(Error::NonFiniteGradient(name));
        }
        clip_gradients(&mut grads, CLIP_RANGE.0, CLIP_RANGE.1);
        let mut params = self.net.params_mut();
        self.opt.step(&mut params, &grads)
    }
}
