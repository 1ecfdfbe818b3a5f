//! HTTP and WebSocket surface used by operator consoles.

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use teleop_core::center::{CenterError, ClaimTarget};
use teleop_core::fsm::{Event, EventKind, Role};
use teleop_core::protocol::MessageBody;
use tokio::sync::broadcast::error::RecvError;

use crate::Service;

pub struct ApiError(CenterError);

impl From<CenterError> for ApiError {
    fn from(e: CenterError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &CenterError) -> StatusCode {
    match e {
        CenterError::NoSession(_) | CenterError::UnknownRequest(_) | CenterError::UnknownVehicle(_) => {
            StatusCode::NOT_FOUND
        }
        CenterError::VehicleBusy(_)
        | CenterError::OperatorBusy(_)
        | CenterError::RequestNotOpen(_)
        | CenterError::ReleaseRefusedMidManeuver => StatusCode::CONFLICT,
        CenterError::ForbiddenByProfile { .. } | CenterError::ActorNotPermitted { .. } => StatusCode::FORBIDDEN,
        CenterError::NoAck(_) => StatusCode::GATEWAY_TIMEOUT,
        _ => StatusCode::BAD_REQUEST,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.0.code(), "message": self.0.to_string() });
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn to_json<T: serde::Serialize>(v: &T) -> Json<Value> {
    Json(serde_json::to_value(v).expect("api types serialize"))
}

#[derive(Debug, Deserialize)]
pub struct ClaimBody {
    pub operator_id: String,
    #[serde(default = "remote_operator")]
    pub as_role: Role,
}

#[derive(Debug, Deserialize)]
pub struct CommandBody {
    pub kind: EventKind,
    #[serde(default = "remote_operator")]
    pub actor: Role,
}

/// Frame a console sends over `/stream`.
#[derive(Debug, Deserialize)]
pub struct ConsoleFrame {
    pub session_id: String,
    pub body: MessageBody,
}

#[derive(Debug, Deserialize)]
pub struct LogQuery {
    #[serde(default)]
    pub from: u64,
}

fn remote_operator() -> Role {
    Role::RemoteOperator
}

pub fn router(svc: Service) -> Router {
    Router::new()
        .route("/fleet", get(fleet))
        .route("/vehicles/{id}", get(vehicle))
        .route("/vehicles/{id}/claim", post(claim_vehicle))
        .route("/requests", get(requests))
        .route("/requests/{id}/claim", post(claim_request))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/command", post(command))
        .route("/sessions/{id}/message", post(message))
        .route("/sessions/{id}/release", post(release))
        .route("/log", get(log))
        .route("/stream", get(stream))
        .with_state(svc)
}

async fn fleet(State(svc): State<Service>) -> Json<Value> {
    to_json(&svc.center().fleet())
}

async fn vehicle(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult {
    let record = svc.center().vehicle(&id).ok_or(CenterError::UnknownVehicle(id.clone()))?;
    let mut v = to_json(&record).0;
    v["connected"] = Value::Bool(svc.is_connected(&id));
    Ok(Json(v))
}

async fn requests(State(svc): State<Service>) -> Json<Value> {
    to_json(&svc.center().requests())
}

async fn claim_vehicle(State(svc): State<Service>, Path(id): Path<String>, Json(body): Json<ClaimBody>) -> ApiResult {
    let target = ClaimTarget::Vehicle { vehicle_id: id };
    let s = svc.center().claim(&body.operator_id, &target, body.as_role, svc.now_ms())?;
    Ok(to_json(&s))
}

async fn claim_request(State(svc): State<Service>, Path(id): Path<String>, Json(body): Json<ClaimBody>) -> ApiResult {
    let target = ClaimTarget::Request { request_id: id };
    let s = svc.center().claim(&body.operator_id, &target, body.as_role, svc.now_ms())?;
    Ok(to_json(&s))
}

async fn session(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult {
    let center = svc.center();
    let s = center.session(&id).ok_or(CenterError::NoSession(id.clone()))?;
    let vehicle = center.vehicle(&s.vehicle_id);
    let valid = if s.is_open() { center.valid_events(&id)? } else { Vec::new() };
    Ok(Json(json!({
        "session": s,
        "vehicle": vehicle,
        "valid_events": valid,
    })))
}

async fn command(State(svc): State<Service>, Path(id): Path<String>, Json(body): Json<CommandBody>) -> ApiResult {
    let outcome = svc.issue_command(&id, Event::new(body.actor, body.kind)).await?;
    Ok(Json(json!({ "ack": outcome })))
}

async fn message(State(svc): State<Service>, Path(id): Path<String>, Json(body): Json<MessageBody>) -> ApiResult {
    let sent = svc.session_message(&id, body)?;
    Ok(Json(json!({ "msg_id": sent.msg_id, "seq": sent.seq })))
}

async fn release(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult {
    let s = svc.release(&id).await?;
    Ok(to_json(&s))
}

async fn log(State(svc): State<Service>, Query(q): Query<LogQuery>) -> Json<Value> {
    to_json(&svc.center().log().entries_from(q.from))
}

async fn stream(State(svc): State<Service>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| pump(svc, socket))
}

async fn pump(svc: Service, mut socket: WebSocket) {
    let mut feed = svc.subscribe();
    loop {
        tokio::select! {
            item = feed.recv() => match item {
                Ok(line) => {
                    if socket.send(WsMessage::Text(line.into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    let note = json!({ "stream": "lagged", "skipped": n }).to_string();
                    if socket.send(WsMessage::Text(note.into())).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Closed) => return,
            },
            frame = socket.recv() => match frame {
                Some(Ok(WsMessage::Text(text))) => {
                    let reply = match serde_json::from_str::<ConsoleFrame>(&text) {
                        Ok(f) => match svc.session_message(&f.session_id, f.body) {
                            Ok(m) => json!({ "stream": "sent", "msg_id": m.msg_id }),
                            Err(e) => json!({ "stream": "error", "error": e.code(), "message": e.to_string() }),
                        },
                        Err(e) => json!({ "stream": "error", "error": "bad_frame", "message": e.to_string() }),
                    };
                    if socket.send(WsMessage::Text(reply.to_string().into())).await.is_err() {
                        return;
                    }
                }
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
