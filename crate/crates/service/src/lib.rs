//! Live annotation sessions over HTTP.

pub mod clock;
pub mod http;
pub mod manager;

pub use clock::{Clock, ManualClock, SystemClock};
pub use http::{router, run, serve, AppState};
pub use manager::{
    Assignment, CalibrationCurve, CreateSession, FinalizeSummary, Manager, Progress, ServiceConfig, ServiceError,
    SessionView, Status,
};
