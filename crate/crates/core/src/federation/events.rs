//! Federation event log, written as `events.csv`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::enhancer::GroupId;

pub const EVENTS_HEADER: &str = "tick,event,client_id,group_id,bytes,detail";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub tick: u64,
    pub event: &'static str,
    pub client_id: Option<u32>,
    pub group_id: Option<GroupId>,
    pub bytes: u64,
    /// Free text; commas are replaced so the CSV stays one field per column.
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    events: Vec<Event>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        tick: u64,
        event: &'static str,
        client_id: Option<u32>,
        group_id: Option<GroupId>,
        bytes: u64,
        detail: impl Into<String>,
    ) {
        let detail = detail.into().replace([',', '\n'], ";");
        log::debug!("tick {tick} {event} client={client_id:?} group={group_id:?} bytes={bytes} {detail}");
        self.events.push(Event {
            tick,
            event,
            client_id,
            group_id,
            bytes,
            detail,
        });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn extend(&mut self, other: EventLog) {
        self.events.extend(other.events);
    }

    /// Total bytes over events of kind `event`.
    pub fn bytes_of(&self, event: &str) -> u64 {
        self.events.iter().filter(|e| e.event == event).map(|e| e.bytes).sum()
    }

    pub fn count(&self, event: &str) -> usize {
        self.events.iter().filter(|e| e.event == event).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVENTS_HEADER);
        s.push('\n');
        let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.tick,
                e.event,
                opt(e.client_id),
                opt(e.group_id),
                e.bytes,
                e.detail
            );
        }
        s
    }
}
