pub mod analysis;
pub mod cli;
pub mod experiments;
pub mod forb;
pub mod game;
pub mod network;
pub mod polytope;
pub mod receding;
pub mod rng;
pub mod scenario;
