//! Grouped residual self-attention (GRSA) and the GRFormer super-resolution
//! network, built on a small reverse-mode tensor engine.
//!
//! Numeric code is generic over [`Scalar`]; the `*32`/`*64` aliases below
//! fix the precision for training (`f32`) and verification (`f64`).

pub mod attention;
pub mod complexity;
pub mod config;
pub mod error;
pub mod imaging;
pub mod network;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verification;
pub mod weights;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{Precision, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type GrformerParams32 = network::GrformerParams<f32>;
pub type GrformerParams64 = network::GrformerParams<f64>;
pub type GrsaParams32 = attention::GrsaParams<f32>;
pub type GrsaParams64 = attention::GrsaParams<f64>;
pub type PlaneF = imaging::Plane<f32>;
pub type PlaneD = imaging::Plane<f64>;
