pub mod cache;
pub mod config;
pub mod decomposer;
pub mod graph;
pub mod model;
pub mod orchestrator;
pub mod rules;
pub mod services;
pub mod template;
