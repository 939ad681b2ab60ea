//! Phase I / Phase II orchestration, freeze schedule, optimizer and
//! checkpoints.

pub mod checkpoint;
pub mod freeze;
pub mod model;
pub mod optim;
pub mod phases;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LossRow, Metrics, Stage};
pub use freeze::{FreezeEntry, FreezeLedger, Phase};
pub use model::{Agent, PolyInter, Zoo};
pub use optim::Adam;
pub use phases::{
    adapt_phase2, init_phase1, init_phase2, pretrain_all, run_phase1, sample_neighbor, train,
};
pub use report::{
    changed_params, dense_prompt_count, frozen_fingerprint, param_report, resizer_count,
    trainable_param_report, ParamReport, ParamRow,
};
