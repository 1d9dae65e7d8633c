use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Milliseconds with microsecond resolution, so the CSV shows short
/// decimals.
pub fn wall_ms(d: Duration) -> f64 {
    d.as_micros() as f64 / 1000.0
}

pub const CSV_HEADER: &str = "scenario,backend,partitions,reducers,iteration,phase,wall_ms,bytes_moved";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Load,
    Map,
    Shuffle,
    Reduce,
    Total,
    Put,
    Get,
    ParallelRead,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Load => "load",
            Phase::Map => "map",
            Phase::Shuffle => "shuffle",
            Phase::Reduce => "reduce",
            Phase::Total => "total",
            Phase::Put => "put",
            Phase::Get => "get",
            Phase::ParallelRead => "parallel_read",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Phase::Load,
            Phase::Map,
            Phase::Shuffle,
            Phase::Reduce,
            Phase::Total,
            Phase::Put,
            Phase::Get,
            Phase::ParallelRead,
        ]
        .into_iter()
        .find(|p| p.to_string() == s)
        .ok_or_else(|| Error::Encoding(format!("unknown phase {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub backend: String,
    pub partitions: usize,
    pub reducers: usize,
    pub iteration: u32,
    pub phase: Phase,
    pub wall_ms: f64,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

impl BenchResult {
    pub fn push(&mut self, row: BenchRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: BenchResult) {
        self.rows.extend(other.rows);
    }

    /// Sum of `wall_ms` over rows of `phase`.
    pub fn total_ms(&self, phase: Phase) -> f64 {
        self.rows.iter().filter(|r| r.phase == phase).map(|r| r.wall_ms).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(','))
                .map_err(|e| Error::Encoding(e.to_string()))?;
        }
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Encoding(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is ASCII")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r
            .headers()
            .map_err(|e| Error::Encoding(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header.join(",") != CSV_HEADER {
            return Err(Error::Encoding(format!("unexpected header {:?}", header.join(","))));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<BenchRow>, _>>()
            .map_err(|e| Error::Encoding(e.to_string()))?;
        Ok(Self { rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_and_empty_result() {
        assert_eq!(BenchResult::default().to_csv(), format!("{CSV_HEADER}\n"));
        let row = BenchRow {
            scenario: "s".into(),
            backend: "memory".into(),
            partitions: 4,
            reducers: 3,
            iteration: 1,
            phase: Phase::ParallelRead,
            wall_ms: 1.5,
            bytes_moved: 10,
        };
        let csv = BenchResult { rows: vec![row] }.to_csv();
        assert_eq!(csv, format!("{CSV_HEADER}\ns,memory,4,3,1,parallel_read,1.5,10\n"));
        assert!(BenchResult::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn rows_parse_back(rows in prop::collection::vec(
            ("[a-z0-9-]{1,12}", 0usize..64, 0usize..64, 0u32..100, 0usize..8, 0.0f64..1e6, any::<u64>()), 0..20)) {
            let phases = [Phase::Load, Phase::Map, Phase::Shuffle, Phase::Reduce, Phase::Total,
                          Phase::Put, Phase::Get, Phase::ParallelRead];
            let result = BenchResult {
                rows: rows.into_iter().map(|(s, p, r, i, ph, ms, b)| BenchRow {
                    scenario: s,
                    backend: "file".into(),
                    partitions: p,
                    reducers: r,
                    iteration: i,
                    phase: phases[ph],
                    wall_ms: ms,
                    bytes_moved: b,
                }).collect(),
            };
            let back = BenchResult::read_csv(result.to_csv().as_bytes()).unwrap();
            prop_assert_eq!(back, result);
        }
    }
}
