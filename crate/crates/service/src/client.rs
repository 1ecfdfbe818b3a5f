//! Vehicle side of a network connection: drives a [`VehicleAgent`]
//! against a running control center.

use std::time::Duration;

use teleop_core::agent::VehicleAgent;
use teleop_core::fsm::{EventKind, TransitionError};
use teleop_core::protocol::{decode, encode, DecodeError, EncodeError, Message, MessageBody};
use teleop_core::scenario::{seconds_to_ms, SimClock};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpStream, ToSocketAddrs};

const HEARTBEAT_TICKS: u64 = 5;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("field operator preparation failed: {0}")]
    Prepare(TransitionError),
    #[error("control center refused the vehicle: {0}")]
    Refused(String),
}

#[derive(Debug, Clone, Copy)]
pub struct AgentOptions {
    /// Wall time per simulation tick.
    pub tick: Duration,
    /// Disconnect once the route is complete and nothing is in progress.
    pub stop_on_route_complete: bool,
}

impl Default for AgentOptions {
    fn default() -> Self {
        Self {
            tick: Duration::from_millis(100),
            stop_on_route_complete: true,
        }
    }
}

async fn send_all(wr: &mut OwnedWriteHalf, msgs: &[Message]) -> Result<(), ClientError> {
    for m in msgs {
        wr.write_all(&encode(m)?).await?;
    }
    Ok(())
}

/// Prepares the vehicle on site, connects and runs it until the scenario
/// horizon, route completion or disconnect. Returns the agent for inspection.
pub async fn run_agent(
    addr: impl ToSocketAddrs,
    mut agent: VehicleAgent,
    opts: AgentOptions,
) -> Result<VehicleAgent, ClientError> {
    let mut clock = SimClock::default();
    agent
        .field_operator(EventKind::PrepareVehicle, clock.now_ms)
        .map_err(ClientError::Prepare)?;
    let stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    let (rd, mut wr) = stream.into_split();
    let mut lines = BufReader::new(rd);
    send_all(&mut wr, &agent.hello(clock.now_ms)).await?;

    let horizon_ms = seconds_to_ms(agent.scenario().horizon_s);
    let mut ticks = tokio::time::interval(opts.tick);
    ticks.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut buf = Vec::new();
    let mut n = 0u64;
    loop {
        tokio::select! {
            _ = ticks.tick() => {
                clock.advance();
                n += 1;
                let mut out = agent.step(&clock);
                if n.is_multiple_of(HEARTBEAT_TICKS) {
                    out.push(agent.heartbeat(clock.now_ms));
                }
                send_all(&mut wr, &out).await?;
                if clock.now_ms >= horizon_ms {
                    break;
                }
                if opts.stop_on_route_complete
                    && agent.route_complete()
                    && !agent.maneuver_in_progress()
                    && !agent.has_pending_events()
                {
                    break;
                }
            }
            // read_until keeps partial input in `buf` when cancelled
            read = lines.read_until(b'\n', &mut buf) => {
                if read? == 0 {
                    break;
                }
                let msg = decode(&buf)?;
                buf.clear();
                if let MessageBody::Rejected { reason, .. } = &msg.body {
                    return Err(ClientError::Refused(reason.clone()));
                }
                let replies = agent.handle(&msg, clock.now_ms);
                send_all(&mut wr, &replies).await?;
            }
        }
    }
    wr.shutdown().await.ok();
    Ok(agent)
}
