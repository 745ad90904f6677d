pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod field;
pub mod graph;
pub mod mvol;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod synth;
pub mod tokenizer;
pub mod trainer;
pub mod volume;
