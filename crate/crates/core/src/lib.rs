pub mod checkpoint;
pub mod corruption;
pub mod data;
pub mod error;
pub mod features;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod rng;
pub mod seghead;
pub mod unet;

pub use error::{Error, Result};
pub use image::{ImageTensor, LabelMap};
