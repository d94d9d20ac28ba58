//! Adversarial offline pretraining of the encoder, transformer, critic and
//! temporal-distance regressor from observation-only demonstrations.

mod config;
mod losses;
mod train;

pub use config::PretrainConfig;
pub use losses::{embed_pairs, embed_windows, loss_dis, loss_gen, loss_tdr, PretrainBatch, Transitions};
pub use train::{merge_datasets, pretrain, read_loss_csv, write_loss_csv, LossReport, PretrainOutcome, Pretrainer};
