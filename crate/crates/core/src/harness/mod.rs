//! Experiment orchestration (placeholder while modules are built).
use serde::Deserialize;

#[derive(Debug, Deserialize)]
pub struct ExperimentConfig {}

pub fn run_experiment(_config: &ExperimentConfig) -> Result<(), String> {
    Ok(())
}
