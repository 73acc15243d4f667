//! AdamW, learning-rate schedules and zero-patience early stopping.

mod adamw;
mod early_stop;
mod schedule;

pub use adamw::{AdamW, AdamWConfig};
pub use early_stop::{EarlyStop, StopDecision, StopMetric};
pub use schedule::{Schedule, ScheduleKind};
