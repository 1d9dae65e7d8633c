use std::fmt;

use serde::{Deserialize, Serialize};

/// Datacenter and machine affinity labels. Labels are flat strings compared
/// by exact equality.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AffinityLabels {
    pub datacenter: Option<String>,
    pub machine: Option<String>,
}

impl AffinityLabels {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn machine(machine: impl Into<String>) -> Self {
        Self {
            datacenter: None,
            machine: Some(machine.into()),
        }
    }

    pub fn new(datacenter: Option<&str>, machine: Option<&str>) -> Self {
        Self {
            datacenter: datacenter.map(str::to_owned),
            machine: machine.map(str::to_owned),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.datacenter.is_none() && self.machine.is_none()
    }

    /// 2 when machine labels match, 1 when only datacenter labels match,
    /// 0 otherwise. A label that is absent on either side never matches.
    pub fn locality_score(&self, other: &AffinityLabels) -> u8 {
        fn eq(a: &Option<String>, b: &Option<String>) -> bool {
            matches!((a, b), (Some(a), Some(b)) if a == b)
        }
        if eq(&self.machine, &other.machine) {
            2
        } else if eq(&self.datacenter, &other.datacenter) {
            1
        } else {
            0
        }
    }

    /// Whether storage carrying `self` is reachable from compute carrying
    /// `pilot`. Unlabeled storage is shared and reachable everywhere;
    /// machine-labeled storage only from that machine; datacenter-only
    /// storage from anywhere in that datacenter.
    pub fn reachable_from(&self, pilot: &AffinityLabels) -> bool {
        match (&self.machine, &self.datacenter) {
            (None, None) => true,
            (Some(m), _) => pilot.machine.as_deref() == Some(m.as_str()),
            (None, Some(dc)) => pilot.datacenter.as_deref() == Some(dc.as_str()),
        }
    }

    /// The non-empty label strings, datacenter first.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.datacenter
            .as_deref()
            .into_iter()
            .chain(self.machine.as_deref())
    }
}

impl fmt::Display for AffinityLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}",
            self.datacenter.as_deref().unwrap_or("-"),
            self.machine.as_deref().unwrap_or("-")
        )
    }
}
