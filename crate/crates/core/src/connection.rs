//! Frame I/O over a TCP stream: one reader task and one writer task per
//! connection, talking to their owner through channels.

use std::io;

use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::wire::{self, DecodeError, FrameReader, MessageEnvelope};

pub const DEFAULT_MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("protocol: {0}")]
    Protocol(#[from] DecodeError),
    #[error("peer closed the connection")]
    Closed,
}

/// Parses `tcp://host:port` (the scheme is optional).
pub fn parse_endpoint(endpoint: &str) -> Result<String, String> {
    let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
    if addr.rsplit_once(':').map_or(true, |(host, port)| host.is_empty() || port.parse::<u16>().is_err()) {
        return Err(format!("endpoint `{endpoint}` is not of the form tcp://host:port"));
    }
    Ok(addr.to_owned())
}

/// Splits a stream into frame channels. Incoming frames are tagged with
/// `tag` so several links can share one receiver; the final item for a
/// link is always an `Err`.
pub fn spawn_link<T, F>(
    stream: TcpStream,
    inbound: mpsc::UnboundedSender<T>,
    tag: F,
) -> mpsc::UnboundedSender<MessageEnvelope>
where
    T: Send + 'static,
    F: Fn(Result<MessageEnvelope, LinkError>) -> T + Send + 'static,
{
    let _ = stream.set_nodelay(true);
    let (mut read_half, mut write_half) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<MessageEnvelope>();

    tokio::spawn(async move {
        let mut buf = Vec::with_capacity(16 * 1024);
        while let Some(first) = out_rx.recv().await {
            buf.clear();
            if wire::encode_into(&first, &mut buf).is_err() {
                log::warn!("dropping unencodable envelope");
                continue;
            }
            while buf.len() < 256 * 1024 {
                match out_rx.try_recv() {
                    Ok(next) => {
                        if wire::encode_into(&next, &mut buf).is_err() {
                            log::warn!("dropping unencodable envelope");
                        }
                    }
                    Err(_) => break,
                }
            }
            if write_half.write_all(&buf).await.is_err() {
                break;
            }
        }
        let _ = write_half.shutdown().await;
    });

    tokio::spawn(async move {
        let mut reader = FrameReader::new(DEFAULT_MAX_FRAME);
        let mut chunk = vec![0u8; 64 * 1024];
        let end = loop {
            match read_half.read(&mut chunk).await {
                Ok(0) => break LinkError::Closed,
                Ok(n) => reader.extend(&chunk[..n]),
                Err(e) => break LinkError::Io(e),
            }
            let mut failed = None;
            loop {
                match reader.next_frame() {
                    Ok(Some(envelope)) => {
                        if inbound.send(tag(Ok(envelope))).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) if e.skippable().is_some() => {
                        log::warn!("skipping malformed frame: {e}");
                    }
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = failed {
                break LinkError::Protocol(e);
            }
        };
        let _ = inbound.send(tag(Err(end)));
    });

    out_tx
}
