//! HTTP front end for the trust gateway.
//!
//! Agents post decision requests to `/v1/decide`; escalations are answered
//! through `/v1/feedback`. State is journaled to an append-only log with
//! periodic snapshots so a restart resumes with the same posterior.

pub mod app;
pub mod config;
pub mod error;
pub mod routes;
pub mod schema;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

pub use app::{App, Clock, ManualClock, SystemClock};
pub use config::ServiceConfig;
pub use error::{ApiError, ServiceError};
pub use routes::router;

/// Interval of the escalation expiry sweep.
const EXPIRY_TICK: Duration = Duration::from_secs(1);

/// Serves until ctrl-c, then writes a final snapshot.
pub async fn serve(config: ServiceConfig, addr: SocketAddr, state_dir: Option<PathBuf>) -> Result<(), ServiceError> {
    let app = App::open(config, state_dir, Arc::new(SystemClock))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");

    let ticker = {
        let app = app.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(EXPIRY_TICK);
            loop {
                interval.tick().await;
                if let Err(e) = app.expire_due() {
                    tracing::error!("expiry sweep failed: {e}");
                }
            }
        })
    };

    axum::serve(listener, router(app.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    ticker.abort();
    app.snapshot_now()
}

/// Blocking wrapper around [`serve`].
pub fn run(config: ServiceConfig, addr: SocketAddr, state_dir: Option<PathBuf>) -> Result<(), ServiceError> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(config, addr, state_dir))
}
