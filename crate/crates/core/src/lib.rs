pub mod bench;
pub mod commands;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod featuremaps;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod paqg;
pub mod params;
pub mod rias;
pub mod scenesim;
pub mod tape;
pub mod tensor;
pub mod uaf;
