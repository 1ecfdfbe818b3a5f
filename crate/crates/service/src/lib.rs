//! Networked control center: a TCP listener for vehicles speaking the
//! NDJSON protocol, an HTTP API for consoles and a WebSocket stream.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use teleop_core::center::{CenterConfig, CenterError, ControlCenter, Notice, OperatorSession, ReleaseStep, StreamItem};
use teleop_core::eventlog::EventLog;
use teleop_core::fsm::Event;
use teleop_core::protocol::{AckOutcome, Message, MessageBody};
use tokio::sync::{broadcast, mpsc, oneshot};

pub mod api;
pub mod client;
mod vehicles;

pub use vehicles::serve_vehicles;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub center: CenterConfig,
    pub ack_timeout: Duration,
    pub fm_scan_period: Duration,
}

impl ServiceConfig {
    pub fn new(center: CenterConfig) -> Self {
        Self {
            center,
            ack_timeout: Duration::from_secs(2),
            fm_scan_period: Duration::from_secs(1),
        }
    }
}

struct Shared {
    center: ControlCenter,
    started: Instant,
    config: ServiceConfig,
    links: Mutex<HashMap<String, mpsc::UnboundedSender<Message>>>,
    acks: Mutex<HashMap<u64, oneshot::Sender<AckOutcome>>>,
    stream: broadcast::Sender<String>,
}

/// Cheap handle shared by every connection task.
#[derive(Clone)]
pub struct Service(Arc<Shared>);

impl Service {
    pub fn new(config: ServiceConfig, log: Arc<EventLog>) -> Self {
        let (stream, _) = broadcast::channel(1024);
        let fanout = stream.clone();
        let center = ControlCenter::new(config.center.clone(), log).with_observer(Box::new(move |item: StreamItem| {
            if let Ok(line) = serde_json::to_string(&item) {
                let _ = fanout.send(line);
            }
        }));
        Service(Arc::new(Shared {
            center,
            started: Instant::now(),
            config,
            links: Mutex::new(HashMap::new()),
            acks: Mutex::new(HashMap::new()),
            stream,
        }))
    }

    pub fn center(&self) -> &ControlCenter {
        &self.0.center
    }

    /// Milliseconds since the service started.
    pub fn now_ms(&self) -> u64 {
        self.0.started.elapsed().as_millis() as u64
    }

    pub fn subscribe(&self) -> broadcast::Receiver<String> {
        self.0.stream.subscribe()
    }

    pub fn is_connected(&self, vehicle_id: &str) -> bool {
        self.0.links.lock().expect("links lock").contains_key(vehicle_id)
    }

    fn attach(&self, vehicle_id: &str, tx: mpsc::UnboundedSender<Message>) {
        self.0.links.lock().expect("links lock").insert(vehicle_id.to_string(), tx);
    }

    fn detach(&self, vehicle_id: &str) {
        self.0.links.lock().expect("links lock").remove(vehicle_id);
    }

    /// Stamps a frame and queues it on the vehicle's connection under one
    /// lock, so frames leave in sequence order.
    fn send_with(
        &self,
        make: impl FnOnce() -> Result<Message, CenterError>,
        want_ack: bool,
    ) -> Result<(Message, Option<oneshot::Receiver<AckOutcome>>), CenterError> {
        let links = self.0.links.lock().expect("links lock");
        let msg = make()?;
        let tx = links.get(&msg.vehicle_id).ok_or(CenterError::NoAck(msg.msg_id))?;
        let rx = want_ack.then(|| {
            let (tx, rx) = oneshot::channel();
            self.0.acks.lock().expect("acks lock").insert(msg.msg_id, tx);
            rx
        });
        tx.send(msg.clone()).map_err(|_| CenterError::NoAck(msg.msg_id))?;
        Ok((msg, rx))
    }

    async fn await_ack(&self, msg_id: u64, rx: Option<oneshot::Receiver<AckOutcome>>) -> Result<AckOutcome, CenterError> {
        let rx = rx.expect("ack receiver requested");
        match tokio::time::timeout(self.0.config.ack_timeout, rx).await {
            Ok(Ok(outcome)) => Ok(outcome),
            _ => {
                self.0.acks.lock().expect("acks lock").remove(&msg_id);
                Err(CenterError::NoAck(msg_id))
            }
        }
    }

    pub async fn issue_command(&self, session_id: &str, event: Event) -> Result<AckOutcome, CenterError> {
        let now = self.now_ms();
        let (msg, rx) = self.send_with(|| self.0.center.begin_command(session_id, event, now), true)?;
        self.await_ack(msg.msg_id, rx).await
    }

    pub async fn release(&self, session_id: &str) -> Result<OperatorSession, CenterError> {
        let now = self.now_ms();
        let step = {
            let links = self.0.links.lock().expect("links lock");
            let step = self.0.center.release(session_id, now)?;
            match step {
                ReleaseStep::Closed(s) => return Ok(s),
                ReleaseStep::EndMonitoring(msg) => {
                    let (tx, rx) = oneshot::channel();
                    self.0.acks.lock().expect("acks lock").insert(msg.msg_id, tx);
                    let link = links.get(&msg.vehicle_id).ok_or(CenterError::NoAck(msg.msg_id))?;
                    link.send(msg.clone()).map_err(|_| CenterError::NoAck(msg.msg_id))?;
                    (msg.msg_id, rx)
                }
            }
        };
        self.await_ack(step.0, Some(step.1)).await?;
        self.0.center.complete_release(session_id, self.now_ms())
    }

    /// Relays a decision, classification answer or drive frame.
    pub fn session_message(&self, session_id: &str, body: MessageBody) -> Result<Message, CenterError> {
        let now = self.now_ms();
        self.send_with(|| self.0.center.session_message(session_id, body, now), false)
            .map(|(m, _)| m)
    }

    fn on_notices(&self, notices: Vec<Notice>) {
        for n in notices {
            if let Notice::Ack { ref_msg_id, outcome } = n {
                if let Some(tx) = self.0.acks.lock().expect("acks lock").remove(&ref_msg_id) {
                    let _ = tx.send(outcome);
                }
            }
        }
    }

    /// Runs the fleet-manager anomaly sweep forever.
    pub fn spawn_fm_scanner(&self) -> tokio::task::JoinHandle<()> {
        let svc = self.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(svc.0.config.fm_scan_period);
            loop {
                every.tick().await;
                if let Err(e) = svc.0.center.fm_scan(svc.now_ms()) {
                    tracing::warn!("fm scan: {e}");
                }
            }
        })
    }
}
