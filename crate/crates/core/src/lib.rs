pub mod numerics;
pub mod corpus;
pub mod container;
pub mod topics;
pub mod model;
pub mod evaluation;
pub mod training;
pub mod config;
pub mod verify;
pub mod cli;
