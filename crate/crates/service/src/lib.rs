//! HTTP service: event intake, recommendation inbox, feedback and rule
//! census over JSON, guarded by a static bearer token.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/homes/{home_id}/events` | 202 with an [`EventsReport`] |
//! | GET | `/homes/{home_id}/recommendations?status=pending` | list |
//! | POST | `/recommendations/{id}/feedback` | `useful` or `not_useful` |
//! | GET | `/rules` | [`RulesCensus`] |
//! | GET | `/health` | no token needed |
//!
//! Time is the event clock: the newest event of a home decides expiry and
//! feedback timestamps.

pub mod api;
pub mod config;
pub mod error;
pub mod service;
pub mod webhook;

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use error::ServiceError;
pub use service::{EventsReport, RecommendationView, RulesCensus, RuleView, Service};

use std::future::Future;

use tokio::net::TcpListener;

/// Opens the state and serves until `shutdown` resolves.
pub async fn serve(cfg: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let listen = cfg.listen;
    let service = Service::open(cfg)?;
    let deliveries = webhook::Deliveries::start(&service)?;
    let app = router(AppState::new(service, deliveries));
    let listener = TcpListener::bind(listen)
        .await
        .map_err(|e| ServiceError::Config(format!("cannot listen on {listen}: {e}")))?;
    tracing::info!(addr = %listen, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
