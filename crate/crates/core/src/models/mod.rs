//! Generator, discriminator and classifiers, with their training loops.

mod classifier;
mod discriminator;
mod generator;
mod params;
mod training;

pub use classifier::{Classifier, Variant, FEATURE_DIM};
pub use discriminator::{DiscForward, Discriminator};
pub use generator::{Generator, GeneratorArch, MappingNetwork, SynthesisStack, LATENT_DIM, STYLE_DIM};
pub use params::{load_checkpoint, save_checkpoint, Module, ParamMap};
pub use training::*;
