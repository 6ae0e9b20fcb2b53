pub mod density;
pub mod error;
pub mod raster;
pub mod seed;
pub mod simulation;
pub mod synth;
pub mod ddmem;
pub mod network;
pub mod hfem;
pub mod training;
pub mod checkpoint;
pub mod evaluation;
pub mod config;
