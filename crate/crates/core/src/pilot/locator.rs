use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Registered backend kinds, one per URL scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackendKind {
    Local,
    BatchEmu,
    YarnEmu,
    File,
    Mem,
}

impl BackendKind {
    pub const ALL: [BackendKind; 5] = [
        BackendKind::Local,
        BackendKind::BatchEmu,
        BackendKind::YarnEmu,
        BackendKind::File,
        BackendKind::Mem,
    ];

    pub fn scheme(self) -> &'static str {
        match self {
            BackendKind::Local => "local",
            BackendKind::BatchEmu => "batch-emu",
            BackendKind::YarnEmu => "yarn-emu",
            BackendKind::File => "file",
            BackendKind::Mem => "mem",
        }
    }

    pub fn from_scheme(scheme: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.scheme() == scheme)
    }

    pub fn is_compute(self) -> bool {
        matches!(self, BackendKind::Local | BackendKind::BatchEmu | BackendKind::YarnEmu)
    }

    pub fn is_storage(self) -> bool {
        !self.is_compute()
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.scheme())
    }
}

/// A parsed `scheme://target` backend locator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Locator {
    pub kind: BackendKind,
    pub target: String,
}

impl Locator {
    pub fn parse(url: &str) -> Result<Self> {
        let (scheme, target) = url
            .split_once("://")
            .ok_or_else(|| Error::UnknownBackend(url.to_owned()))?;
        let kind =
            BackendKind::from_scheme(scheme).ok_or_else(|| Error::UnknownBackend(url.to_owned()))?;
        Ok(Locator {
            kind,
            target: target.to_owned(),
        })
    }
}

impl FromStr for Locator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Locator::parse(s)
    }
}

impl fmt::Display for Locator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.kind, self.target)
    }
}
