#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use teleop_core::center::CenterConfig;
use teleop_core::eventlog::EventLog;
use teleop_core::fsm::LegalProfile;
use teleop_service::{api, serve_vehicles, Service, ServiceConfig};
use tokio::net::TcpListener;

pub struct Harness {
    pub svc: Service,
    pub vehicles: SocketAddr,
    pub http: SocketAddr,
}

pub async fn start(profile: LegalProfile) -> Harness {
    let svc = Service::new(ServiceConfig::new(CenterConfig::new(profile)), Arc::new(EventLog::in_memory()));
    let vl = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let hl = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let vehicles = vl.local_addr().unwrap();
    let http = hl.local_addr().unwrap();
    tokio::spawn(serve_vehicles(svc.clone(), vl));
    let app = api::router(svc.clone());
    tokio::spawn(async move { axum::serve(hl, app).await });
    Harness { svc, vehicles, http }
}

/// Polls `f` every 10 ms until it yields a value or five seconds pass.
pub async fn eventually<T>(what: &str, mut f: impl FnMut() -> Option<T>) -> T {
    for _ in 0..500 {
        if let Some(v) = f() {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("timed out waiting for {what}");
}
