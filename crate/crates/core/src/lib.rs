pub mod data;
mod linalg;
pub mod model;
pub mod posterior;
pub mod optimizer;
pub mod cheb;
pub mod sparsegrid;
pub mod warp;
pub mod inference;
pub mod mixture;
pub mod ml;
pub mod simulation;
