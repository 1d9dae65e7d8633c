//! Structured event log shared by the manager, the compute backends and the
//! data layer. One entry per state transition; entries are totally ordered
//! by `seq`.

use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Entity {
    Pilot(String),
    Unit(String),
    DataUnit(String),
    Container(String),
    /// A replica of a data unit on a storage space.
    Replica { du: String, space: String },
    Space(String),
}

impl fmt::Display for Entity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entity::Pilot(id) => write!(f, "pilot:{id}"),
            Entity::Unit(id) => write!(f, "unit:{id}"),
            Entity::DataUnit(id) => write!(f, "du:{id}"),
            Entity::Container(id) => write!(f, "container:{id}"),
            Entity::Replica { du, space } => write!(f, "replica:{du}@{space}"),
            Entity::Space(id) => write!(f, "space:{id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEvent {
    pub seq: u64,
    pub at_us: u64,
    pub entity: Entity,
    pub from: String,
    pub to: String,
    pub reason: String,
}

impl fmt::Display for LogEvent {
    /// `<at_us> <seq> <entity> <from>-><to> <reason>`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}->{} {}",
            self.at_us, self.seq, self.entity, self.from, self.to, self.reason
        )
    }
}

struct Inner {
    start: Instant,
    entries: Mutex<Vec<LogEvent>>,
}

/// Cheaply cloneable handle to one log.
#[derive(Clone)]
pub struct EventLog {
    inner: Arc<Inner>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog").field("len", &self.len()).finish()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Inner {
                start: Instant::now(),
                entries: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn record(
        &self,
        entity: Entity,
        from: impl fmt::Display,
        to: impl fmt::Display,
        reason: impl Into<String>,
    ) -> u64 {
        let mut entries = self.inner.entries.lock();
        // timestamp taken under the lock so at_us is monotone in seq
        let at_us = self.inner.start.elapsed().as_micros() as u64;
        let seq = entries.len() as u64;
        let event = LogEvent {
            seq,
            at_us,
            entity,
            from: from.to_string(),
            to: to.to_string(),
            reason: reason.into(),
        };
        log::trace!("{event}");
        entries.push(event);
        seq
    }

    pub fn len(&self) -> usize {
        self.inner.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<LogEvent> {
        self.inner.entries.lock().clone()
    }

    pub fn events_for(&self, entity: &Entity) -> Vec<LogEvent> {
        self.inner
            .entries
            .lock()
            .iter()
            .filter(|e| &e.entity == entity)
            .cloned()
            .collect()
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        for e in self.inner.entries.lock().iter() {
            writeln!(out, "{e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format_and_order() {
        let log = EventLog::new();
        log.record(Entity::Unit("cu-1".into()), "NEW", "SCHEDULED", "placed on p1");
        log.record(Entity::Replica { du: "du-1".into(), space: "s1".into() }, "ABSENT", "PRESENT", "import");
        let events = log.snapshot();
        assert_eq!(events.len(), 2);
        assert!(events[0].seq < events[1].seq && events[0].at_us <= events[1].at_us);
        let line = events[0].to_string();
        assert!(line.ends_with(" 0 unit:cu-1 NEW->SCHEDULED placed on p1"), "{line}");
        assert!(events[1].to_string().contains("replica:du-1@s1 ABSENT->PRESENT"));
        let mut buf = Vec::new();
        log.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }
}
