//! Persistent HTTP service for annotation studies.

pub mod http;
pub mod report;
pub mod service;
pub mod setup;
pub mod store;

pub use report::{build_report, Report, ReportOptions};
pub use service::{ServiceConfig, ServiceError, StudyService};
pub use setup::StudySetup;
pub use store::{export_dump, EventLog, StoreError};
