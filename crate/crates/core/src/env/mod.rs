//! Desk-scale federated learning: datasets, the logistic-regression global
//! model, and the round loop implementing the game's transitions and
//! rewards.

mod dataset;
mod fl;
mod idx;
mod synthetic;

pub use dataset::{
    eval_backdoor_metrics, eval_loss, model_param_len, BackdoorMetrics, Dataset, GlobalModel, PoisonedSet,
};
pub use fl::{
    rewards, DatasetSource, EnvConfig, EnvState, FederatedData, FlEnv, FlFamily, RewardSignMode, RewardSplit,
    Rewards, UpdateStats, ATTACKER_OBS_DIM, DEFENDER_OBS_DIM,
};
pub use idx::{load_idx_dataset, parse_idx_images, parse_idx_labels, pool_images, IdxImages};
pub use synthetic::{make_synthetic_dataset, SyntheticSpec, SyntheticTask};
