//! Training and analysis of convolutional networks whose backward error
//! pathway is selectable: exact backpropagation, feedback alignment with
//! dense or convolution-shaped random feedback, and two sign-symmetric rules.
//!
//! Start with [`network::Network`] and [`feedback::FeedbackRule`]; the
//! [`trainer`] and [`analysis`] modules build the experiment workflow on top.

pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod container;
pub mod conv;
pub mod data;
pub mod error;
pub mod feedback;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use feedback::FeedbackRule;
pub use network::{Architecture, InitConfig, LayerSpec, Network};
pub use tensor::{Scalar, Tensor};
pub use trainer::{evaluate, grid_search, train, Grid, TrainConfig};
