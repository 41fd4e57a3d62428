pub mod geometry;
pub mod operators;
pub mod problem;
pub mod solvers;
pub mod library;
pub mod analysis;
pub mod config;
pub mod runner;
