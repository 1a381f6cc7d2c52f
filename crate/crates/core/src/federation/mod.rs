//! Clients, the server window, the wire format and cost accounting, plus a
//! logical-tick driver that runs one task round end to end.
//!
//! Both execution modes share one semantics. In deterministic mode clients
//! run one after another on the caller's thread. In threaded mode each
//! selected client runs on its own scoped thread and hands its encoded
//! uploads to the server over a channel; the server sorts them by client id
//! before processing, so both modes produce the same results.

pub mod client;
pub mod cost;
pub mod events;
pub mod server;
pub mod wire;

use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FrozenBackbone;

pub use client::{BroadcastOutcome, ClientError, ClientSettings, ClientState, ClientTask};
pub use cost::{comm_cost, enhancer_flops, CostTable};
pub use events::{Event, EventLog, EVENTS_HEADER};
pub use server::{Aggregation, UploadRecord, Broadcast, ServerError, ServerSettings, ServerState};
pub use wire::{deserialize_group, serialize_group, GroupUpload, WireError};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("tick {tick}, client {client}: {source}")]
    Client {
        tick: u64,
        client: u32,
        source: ClientError,
    },
    #[error("tick {tick}, server: {source}")]
    Server { tick: u64, source: ServerError },
    #[error("tick {tick}: {source}")]
    Wire { tick: u64, source: WireError },
}

pub type Result<T> = std::result::Result<T, FederationError>;

/// SplitMix64 over `base` and `parts`; stable sub-seeds for every component.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    #[default]
    Deterministic,
    Threaded,
}

/// Client algorithm for a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientAlgorithm {
    /// Temporary group, memory and local double distillation.
    Incremental,
    /// Widen the head and train on new data alone.
    Finetune,
}

/// Server plus clients on one logical clock.
#[derive(Debug, Clone)]
pub struct Federation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub tick: u64,
    pub mode: ExecutionMode,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundStats {
    pub uploads: usize,
    pub upload_bytes: u64,
    pub broadcast_bytes: u64,
    pub consolidations: usize,
}

impl Federation {
    pub fn new(server: ServerState, clients: Vec<ClientState>, mode: ExecutionMode) -> Self {
        Self {
            server,
            clients,
            tick: 0,
            mode,
        }
    }

    fn run_clients(
        &mut self,
        tasks: Vec<(usize, ClientTask)>,
        backbone: &FrozenBackbone,
        settings: &ClientSettings,
        algorithm: ClientAlgorithm,
    ) -> Result<Vec<(u32, Vec<Vec<u8>>)>> {
        let tick = self.tick;
        let round = |c: &mut ClientState, task: &ClientTask| -> std::result::Result<Vec<Vec<u8>>, FederationError> {
            let uploads = match algorithm {
                ClientAlgorithm::Incremental => c.client_round(task, backbone, settings),
                ClientAlgorithm::Finetune => c.finetune_round(task, backbone, settings),
            }
            .map_err(|source| FederationError::Client {
                tick,
                client: c.client_id,
                source,
            })?;
            uploads
                .iter()
                .map(|u| u.encode().map_err(|source| FederationError::Wire { tick, source }))
                .collect()
        };

        let mut by_index: Vec<Option<ClientTask>> = vec![None; self.clients.len()];
        for (i, t) in tasks {
            by_index[i] = Some(t);
        }
        let mut results: Vec<(u32, Result<Vec<Vec<u8>>>)> = match self.mode {
            ExecutionMode::Deterministic => self
                .clients
                .iter_mut()
                .zip(by_index)
                .filter_map(|(c, t)| t.map(|t| (c.client_id, round(c, &t))))
                .collect(),
            ExecutionMode::Threaded => std::thread::scope(|s| {
                let (tx, rx) = mpsc::channel();
                for (c, t) in self.clients.iter_mut().zip(by_index) {
                    let Some(t) = t else { continue };
                    let tx = tx.clone();
                    let round = &round;
                    s.spawn(move || {
                        let r = round(c, &t);
                        let _ = tx.send((c.client_id, r));
                    });
                }
                drop(tx);
                rx.iter().collect()
            }),
        };
        results.sort_by_key(|(id, _)| *id);
        results.into_iter().map(|(id, r)| r.map(|u| (id, u))).collect()
    }

    /// One task round: clients train and upload at the current tick, the
    /// clock then advances until every window opened this round has closed,
    /// broadcasting each result to all clients. Leaves `tick` one past the
    /// last processed tick.
    pub fn run_round(
        &mut self,
        tasks: Vec<(usize, ClientTask)>,
        backbone: &FrozenBackbone,
        settings: &ClientSettings,
        algorithm: ClientAlgorithm,
    ) -> Result<RoundStats> {
        let mut stats = RoundStats::default();
        let selector = self.server.selector.clone();
        for c in &mut self.clients {
            c.selector = selector.clone();
        }
        for (id, uploads) in self.run_clients(tasks, backbone, settings, algorithm)? {
            for bytes in uploads {
                self.submit(&bytes)
                    .map_err(|source| FederationError::Server { tick: self.tick, source })?;
                stats.uploads += 1;
                stats.upload_bytes += bytes.len() as u64;
                log::trace!("client {id} uploaded {} bytes", bytes.len());
            }
        }
        let end = self.tick + self.server.settings.window;
        while self.tick <= end {
            let done = self.step(backbone)?;
            stats.consolidations += done.0;
            stats.broadcast_bytes += done.1;
        }
        Ok(stats)
    }

    /// Hands one encoded upload to the server at the current tick.
    pub fn submit(&mut self, encoded: &[u8]) -> std::result::Result<(), ServerError> {
        self.server.receive(self.tick, encoded)
    }

    /// Processes the current tick: deliver queued broadcasts, close due
    /// windows and broadcast their results. Returns (consolidations, bytes sent).
    pub fn step(&mut self, backbone: &FrozenBackbone) -> Result<(usize, u64)> {
        let tick = self.tick;
        for i in 0..self.clients.len() {
            let outcomes = self.clients[i].tick();
            for o in outcomes {
                self.handle_outcome(i, o, None)?;
            }
        }
        let broadcasts = self
            .server
            .advance(tick, backbone)
            .map_err(|source| FederationError::Server { tick, source })?;
        let mut sent = 0;
        for b in &broadcasts {
            sent += self.broadcast(b)?;
        }
        self.tick += 1;
        Ok((broadcasts.len(), sent))
    }

    /// Sends a group to every client; returns bytes put on the wire.
    pub fn broadcast(&mut self, b: &Broadcast) -> Result<u64> {
        let mut sent = 0;
        for i in 0..self.clients.len() {
            let outcome = self.clients[i].receive_broadcast(&b.bytes);
            sent += b.bytes.len() as u64;
            self.handle_outcome(i, outcome, Some(b))?;
        }
        Ok(sent)
    }

    fn handle_outcome(
        &mut self,
        i: usize,
        outcome: std::result::Result<BroadcastOutcome, ClientError>,
        b: Option<&Broadcast>,
    ) -> Result<()> {
        let tick = self.tick;
        let id = self.clients[i].client_id;
        let (gid, len) = b.map(|b| (Some(b.group_id), b.bytes.len() as u64)).unwrap_or((None, 0));
        match outcome {
            Ok(BroadcastOutcome::Queued) => self.server.log.push(tick, "queued", Some(id), gid, len, "offline"),
            Ok(o) => {
                let event = if b.is_some() { "broadcast" } else { "delivered" };
                self.server.log.push(tick, event, Some(id), gid, len, format!("{o:?}").to_lowercase());
            }
            Err(e @ (ClientError::ShapeMismatch { .. } | ClientError::UnknownGroup(_))) => {
                self.server.log.push(tick, "sync_request", Some(id), gid, 0, e.to_string());
                let payload = self
                    .server
                    .full_sync_payload()
                    .map_err(|source| FederationError::Server { tick, source })?;
                let bytes: u64 = payload.iter().map(|p| p.len() as u64).sum();
                let selector = self.server.selector.clone();
                self.clients[i]
                    .full_sync(&payload, selector)
                    .map_err(|source| FederationError::Client { tick, client: id, source })?;
                self.server.log.push(tick, "full_sync", Some(id), None, bytes, format!("groups={}", payload.len()));
            }
            Err(source) => return Err(FederationError::Client { tick, client: id, source }),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }
}
