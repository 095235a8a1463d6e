//! Command implementations behind the `vseg` binary.

pub mod commands;
pub mod config;
pub mod data;
pub mod report;

pub use commands::ablate::{cmd_ablate, AblationTable, Grid};
pub use commands::eval::{cmd_eval, EvalReport};
pub use commands::phantom::cmd_phantom;
pub use commands::segment::{cmd_segment, segment_volume, SegmentReport};
pub use commands::slices::{cmd_slices, SliceReport, TintCounts};
pub use commands::train::{cmd_train, TrainReport};
pub use config::RunConfig;
