use teleop_core::protocol::{decode, encode, Message, MessageBody};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

use crate::Service;

/// Accepts vehicle connections until the listener fails.
pub async fn serve_vehicles(svc: Service, listener: TcpListener) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let svc = svc.clone();
        tokio::spawn(async move {
            if let Err(e) = handle_vehicle(svc, stream).await {
                tracing::warn!("vehicle {peer}: {e}");
            }
        });
    }
}

async fn read_frame<R: AsyncBufReadExt + Unpin>(reader: &mut R, buf: &mut Vec<u8>) -> std::io::Result<bool> {
    buf.clear();
    Ok(reader.read_until(b'\n', buf).await? > 0)
}

fn refusal(vehicle_id: &str, reason: String) -> Vec<u8> {
    let msg = Message {
        msg_id: 0,
        seq: 1,
        sent_at: 0,
        vehicle_id: vehicle_id.to_string(),
        body: MessageBody::Rejected { ref_msg_id: 0, reason },
    };
    encode(&msg).unwrap_or_default()
}

async fn handle_vehicle(svc: Service, stream: TcpStream) -> std::io::Result<()> {
    let (rd, mut wr) = stream.into_split();
    let mut reader = BufReader::new(rd);
    let mut buf = Vec::new();
    if !read_frame(&mut reader, &mut buf).await? {
        return Ok(());
    }
    let hello = match decode(&buf) {
        Ok(m) => m,
        Err(e) => {
            wr.write_all(&refusal("", e.to_string())).await?;
            return Ok(());
        }
    };
    let vid = hello.vehicle_id.clone();
    let start = match svc.center().register_vehicle(&hello, svc.now_ms()) {
        Ok((_, start)) => start,
        Err(e) => {
            wr.write_all(&refusal(&vid, e.to_string())).await?;
            return Ok(());
        }
    };
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(msg) = rx.recv().await {
            match encode(&msg) {
                Ok(bytes) => {
                    if wr.write_all(&bytes).await.is_err() {
                        break;
                    }
                }
                Err(e) => tracing::warn!("dropping unencodable frame: {e}"),
            }
        }
    });
    if let Some(start) = start {
        let _ = tx.send(start);
    }
    svc.attach(&vid, tx);
    tracing::info!("vehicle {vid} registered");

    let result = async {
        while read_frame(&mut reader, &mut buf).await? {
            let msg = match decode(&buf) {
                Ok(m) if m.vehicle_id == vid => m,
                Ok(m) => {
                    tracing::warn!("{vid}: frame for {} ignored", m.vehicle_id);
                    continue;
                }
                Err(e) => {
                    tracing::warn!("{vid}: {e}");
                    continue;
                }
            };
            match svc.center().on_vehicle_message(&msg, svc.now_ms()) {
                Ok(notices) => svc.on_notices(notices),
                Err(e) => tracing::warn!("{vid}: {e}"),
            }
        }
        Ok::<_, std::io::Error>(())
    }
    .await;
    svc.detach(&vid);
    writer.abort();
    result
}
