pub mod cli;
pub mod config;
pub mod linalg;
pub mod matrix_io;
pub mod model;
pub mod pipeline;
pub mod riccati;
pub mod team;
pub mod incentive;
pub mod simulate;
pub mod svg;
pub mod verify;
