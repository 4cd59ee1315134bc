//! Serves the JSON editing API for a model.
//!
//! ```bash
//! cargo run --release --example serve -- toychair.ckpt
//! curl -s localhost:8080/meta
//! curl -s -XPOST localhost:8080/sample -d '{"seed": 1, "n": 1}'
//! ```

mod common;

use std::sync::Arc;

use partvae::service::{self, ServiceState, DEFAULT_STORE_CAPACITY};

#[tokio::main]
async fn main() -> std::io::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let model = common::model_from_args();
    let state = Arc::new(ServiceState::new(model, Some("toychair".into()), DEFAULT_STORE_CAPACITY));
    service::serve(state, ([127, 0, 0, 1], 8080).into()).await
}
