//! Online deep reinforcement learning over the simulated network.

mod agent;
mod memory;

pub use agent::{action_index, greedy_action, random_group_action, run_training, DrlAgent, EpochMetrics, Experience, TrainingOutcome};
pub use memory::{EpochRecord, ObservationPool, ReplayMemory};
