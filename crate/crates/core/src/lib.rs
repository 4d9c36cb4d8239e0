//! Socially-aware trajectory forecasting with adversarially trained
//! generators, transformer discriminators and test-time refinement.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod discriminator;
pub mod evalkit;
pub mod generator;
pub mod nn;
pub mod plot;
pub mod refine;
pub mod runner;
pub mod scene;
pub mod seeding;
pub mod sim;
pub mod synth;
pub mod training;
