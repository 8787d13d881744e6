pub mod bench;
pub mod http;
pub mod platform;

pub use bench::{load_fixtures, run_bench, BenchQuery, MetricsReport, Scenario};
pub use platform::{ErrorBody, Platform, QueryReply, QueryRequest};
