//! Bridges a local TCP socket to one side of a DEBUG channel.
//!
//! Bytes read from the socket become frames; frames from the channel are
//! written to the socket and acked only after the write succeeded. When the
//! socket goes away the side detaches, and the next socket resumes from the
//! last frame actually written, so nothing is lost or repeated.

use std::sync::Arc;

use expd_core::relay::{AttachOutcome, Side};
use expd_core::wire::{ChannelAck, ChannelAttach, ChannelData, ChannelDetach, Message, MAX_LOG_CHUNK};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::conn::{Client, ClientError};

#[derive(Debug)]
pub enum BridgeEvent {
    Written { channel_id: u64, generation: u64, seq: u64 },
    LocalClosed { channel_id: u64, generation: u64 },
}

struct Link {
    generation: u64,
    tx: mpsc::UnboundedSender<(u64, Vec<u8>)>,
    reader: Option<JoinHandle<()>>,
}

pub struct Bridge {
    pub channel_id: u64,
    side: Side,
    client: Arc<Client>,
    link: Option<Link>,
    generation: u64,
    last_written: u64,
    /// Next seq the current link accepts; older ones are in-flight duplicates.
    expected: u64,
}

impl Bridge {
    pub fn new(client: Arc<Client>, channel_id: u64, side: Side) -> Self {
        Bridge {
            channel_id,
            side,
            client,
            link: None,
            generation: 0,
            last_written: 0,
            expected: 1,
        }
    }

    pub fn last_written(&self) -> u64 {
        self.last_written
    }

    pub fn is_linked(&self) -> bool {
        self.link.is_some()
    }

    /// Connects a local socket, replacing any previous one, and attaches.
    pub async fn link(
        &mut self,
        stream: TcpStream,
        events: mpsc::UnboundedSender<BridgeEvent>,
    ) -> Result<AttachOutcome, ClientError> {
        self.unlink_local();
        self.generation += 1;
        let generation = self.generation;
        let channel_id = self.channel_id;
        let (mut rd, mut wr) = stream.into_split();
        let (tx, mut rx) = mpsc::unbounded_channel::<(u64, Vec<u8>)>();
        let ev = events.clone();
        tokio::spawn(async move {
            while let Some((seq, payload)) = rx.recv().await {
                if wr.write_all(&payload).await.is_err() {
                    let _ = ev.send(BridgeEvent::LocalClosed { channel_id, generation });
                    return;
                }
                let _ = ev.send(BridgeEvent::Written {
                    channel_id,
                    generation,
                    seq,
                });
            }
        });
        self.link = Some(Link {
            generation,
            tx,
            reader: None,
        });
        self.expected = self.last_written + 1;
        let resume_from = self.last_written;
        let side = self.side;
        let outcome: AttachOutcome = match self
            .client
            .call_as(|id| {
                Message::ChannelAttach(ChannelAttach {
                    id,
                    channel_id,
                    side,
                    resume_from,
                })
            })
            .await
        {
            Ok(o) => o,
            Err(e) => {
                self.link = None;
                return Err(e);
            }
        };
        let client = self.client.clone();
        let reader = tokio::spawn(async move {
            let mut buf = vec![0u8; MAX_LOG_CHUNK];
            loop {
                match rd.read(&mut buf).await {
                    Ok(0) | Err(_) => break,
                    Ok(n) => {
                        let data = ChannelData {
                            channel_id,
                            seq: 0,
                            payload: buf[..n].to_vec(),
                        };
                        let msg = match side {
                            Side::Client => Message::ClientToTask(data),
                            Side::Task => Message::TaskToClient(data),
                        };
                        if client.send(msg).is_err() {
                            break;
                        }
                    }
                }
            }
            let _ = events.send(BridgeEvent::LocalClosed { channel_id, generation });
        });
        if let Some(l) = self.link.as_mut() {
            l.reader = Some(reader);
        }
        Ok(outcome)
    }

    /// A frame for this side arrived from the relay.
    pub fn on_frame(&mut self, d: ChannelData) {
        let Some(link) = &self.link else { return };
        if d.seq != self.expected {
            return;
        }
        self.expected += 1;
        let _ = link.tx.send((d.seq, d.payload));
    }

    /// Returns true if the local socket closed and the side was detached.
    pub fn on_event(&mut self, ev: BridgeEvent) -> bool {
        match ev {
            BridgeEvent::Written { generation, seq, .. } => {
                // Writes to a replaced socket do not count: that peer is gone,
                // so its frames are replayed to the new one.
                if self.link.as_ref().is_some_and(|l| l.generation == generation) {
                    self.last_written = seq;
                    let (channel_id, side) = (self.channel_id, self.side);
                    self.client.fire(|id| {
                        Message::ChannelAck(ChannelAck {
                            id,
                            channel_id,
                            side,
                            seq,
                        })
                    });
                }
                false
            }
            BridgeEvent::LocalClosed { generation, .. } => {
                if self.link.as_ref().is_some_and(|l| l.generation == generation) {
                    self.unlink_local();
                    let (channel_id, side) = (self.channel_id, self.side);
                    self.client
                        .fire(|id| Message::ChannelDetach(ChannelDetach { id, channel_id, side }));
                    true
                } else {
                    false
                }
            }
        }
    }

    fn unlink_local(&mut self) {
        if let Some(l) = self.link.take() {
            if let Some(r) = l.reader {
                r.abort();
            }
        }
    }

    /// Drops the local socket without telling the relay (channel is gone).
    pub fn shutdown(&mut self) {
        self.unlink_local();
    }
}
