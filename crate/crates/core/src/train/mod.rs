pub mod freeze;
pub mod mix;
pub mod trainer;

pub use freeze::{apply_freeze, FreezeStrategy};
pub use mix::{make_mix, MixSpec};
pub use trainer::{continual_train, pretrain, FreezeAudit, StepRecord, TrainConfig, TrainLog};
