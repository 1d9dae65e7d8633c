//! Write, read and parallel-read timings of the storage tiers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use super::results::{wall_ms, BenchResult, BenchRow, Phase};
use super::{EngineBackend, Session};
use crate::compute::TaskContext;
use crate::data::MB;
use crate::error::{Error, FieldError, Result};
use crate::pilot::UnitState;
use crate::pilot::{AffinityLabels, ComputeUnitDescription, PilotState, UnitKind};

static NEXT_RUN: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchIoConfig {
    /// Blob sizes in MB.
    pub sizes: Vec<u64>,
    pub backends: Vec<EngineBackend>,
    /// Readers in the parallel read; defaults to the running cores.
    #[serde(default)]
    pub partitions: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl BenchIoConfig {
    pub fn new(sizes: Vec<u64>, backends: Vec<EngineBackend>) -> Self {
        Self {
            sizes,
            backends,
            partitions: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.sizes.is_empty() {
            errors.push(FieldError::new("sizes", "must list at least one size"));
        }
        if self.backends.is_empty() {
            errors.push(FieldError::new("backends", "must list at least one backend"));
        }
        if self.partitions == Some(0) {
            errors.push(FieldError::new("partitions", "must be at least 1"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IoMeasurement {
    pub size_mb: u64,
    pub backend: EngineBackend,
    pub partitions: usize,
    pub put: Duration,
    pub get: Duration,
    pub parallel_read: Duration,
}

fn throughput(size_mb: u64, d: Duration) -> f64 {
    if size_mb == 0 || d.is_zero() {
        0.0
    } else {
        size_mb as f64 / d.as_secs_f64()
    }
}

impl IoMeasurement {
    /// MB/s of the single writer.
    pub fn put_throughput(&self) -> f64 {
        throughput(self.size_mb, self.put)
    }

    pub fn get_throughput(&self) -> f64 {
        throughput(self.size_mb, self.get)
    }

    pub fn parallel_read_throughput(&self) -> f64 {
        throughput(self.size_mb, self.parallel_read)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IoReport {
    pub results: BenchResult,
    pub measurements: Vec<IoMeasurement>,
}

/// For every size and backend: put a blob as one data unit of
/// `partitions` chunks, read it back on the driver, then read the chunks
/// with one map task each. Every read is checked against the written bytes.
pub fn bench_io(session: &Session, config: &BenchIoConfig) -> Result<IoReport> {
    config.validate()?;
    let pilots = session.manager().pilots();
    if !pilots
        .iter()
        .any(|p| matches!(p.state, PilotState::Running | PilotState::Pending))
    {
        return Err(Error::NoPilots);
    }
    let partitions = config
        .partitions
        .unwrap_or_else(|| (session.running_cores() as usize).max(1));

    let task = format!("bench-io-{}", NEXT_RUN.fetch_add(1, Ordering::Relaxed));
    let data = session.data().clone();
    session.compute().register_task(
        &task,
        Arc::new(move |ctx: &TaskContext| {
            let mut parts = ctx.payload_arg().splitn(3, '#');
            let (Some(du), Some(item), Some(sum)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Encoding(format!("bad payload {:?}", ctx.payload)));
            };
            let bytes = data.read_item(du, item, None)?;
            if format!("{:016x}", xxh64(&bytes, 0)) != sum {
                return Err(Error::Encoding(format!("{du}/{item} read back different bytes")));
            }
            Ok(())
        }),
    );
    let mut report = IoReport::default();
    let mut outcome = Ok(());
    'outer: for &size in &config.sizes {
        let blob = blob(size, config.seed);
        for &backend in &config.backends {
            match measure(session, &task, &blob, size, backend, partitions) {
                Ok(m) => {
                    let row = |phase, d: Duration| BenchRow {
                        scenario: format!("io-{size}mb"),
                        backend: backend.to_string(),
                        partitions,
                        reducers: 0,
                        iteration: 0,
                        phase,
                        wall_ms: wall_ms(d),
                        bytes_moved: blob.len() as u64,
                    };
                    report.results.push(row(Phase::Put, m.put));
                    report.results.push(row(Phase::Get, m.get));
                    report.results.push(row(Phase::ParallelRead, m.parallel_read));
                    report.measurements.push(m);
                }
                Err(e) => {
                    outcome = Err(e);
                    break 'outer;
                }
            }
        }
    }
    session.compute().unregister_task(&task);
    outcome.map(|()| report)
}

fn blob(size_mb: u64, seed: u64) -> Bytes {
    let mut buf = vec![0u8; (size_mb * MB) as usize];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut buf);
    Bytes::from(buf)
}

fn measure(
    session: &Session,
    task: &str,
    blob: &Bytes,
    size: u64,
    backend: EngineBackend,
    partitions: usize,
) -> Result<IoMeasurement> {
    let space = session.create_space(backend, size + partitions as u64 + 4)?;
    let result = measure_in(session, task, blob, size, backend, partitions, &space.id);
    let _ = session.data().release_space(&space.id);
    result
}

fn measure_in(
    session: &Session,
    task: &str,
    blob: &Bytes,
    size: u64,
    backend: EngineBackend,
    partitions: usize,
    space: &str,
) -> Result<IoMeasurement> {
    let data = session.data();
    let chunk = blob.len().div_ceil(partitions).max(1);
    let items: Vec<(String, Bytes)> = (0..partitions)
        .map(|p| {
            let lo = (p * chunk).min(blob.len());
            let hi = ((p + 1) * chunk).min(blob.len());
            (format!("chunk-{p:05}"), blob.slice(lo..hi))
        })
        .collect();

    let start = Instant::now();
    let du = data.put_data_unit(AffinityLabels::none(), items.clone(), space)?;
    let put = start.elapsed();

    let start = Instant::now();
    let mut read = Vec::with_capacity(blob.len());
    for (name, _) in &items {
        read.extend_from_slice(&data.read_item(&du.id, name, None)?);
    }
    let get = start.elapsed();
    if read != blob[..] {
        return Err(Error::Encoding(format!("{} read back different bytes", du.id)));
    }
    drop(read);

    let manager = session.manager();
    let start = Instant::now();
    let ids = items
        .iter()
        .map(|(name, bytes)| {
            let payload = format!("{task}#{}#{name}#{:016x}", du.id, xxh64(bytes, 0));
            manager.submit_compute_unit(ComputeUnitDescription::task(UnitKind::MapTask, payload))
        })
        .collect::<Result<Vec<_>>>()?;
    let states = manager.wait_units(&ids, Duration::from_secs(600))?;
    let parallel_read = start.elapsed();
    for (id, state) in ids.iter().zip(states) {
        if state != UnitState::Done {
            let reason = match manager.unit_info(id)?.outcome {
                Some(crate::manager::UnitOutcome::Failure { reason }) => reason,
                _ => format!("unit ended {state}"),
            };
            return Err(Error::TaskFailed {
                unit_id: id.clone(),
                attempt: 1,
                reason,
            });
        }
    }
    Ok(IoMeasurement {
        size_mb: size,
        backend,
        partitions,
        put,
        get,
        parallel_read,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_bytes_round_trip_with_zero_throughput() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::local(dir.path(), 2).unwrap();
        let cfg = BenchIoConfig::new(vec![0, 1], vec![EngineBackend::File, EngineBackend::Memory]);
        let r = bench_io(&s, &cfg).unwrap();
        assert_eq!(r.measurements.len(), 4);
        assert_eq!(r.results.rows.len(), 12);
        let zero = &r.measurements[0];
        assert_eq!(zero.put_throughput(), 0.0);
        assert_eq!(zero.parallel_read_throughput(), 0.0);
        assert_eq!(r.measurements[3].partitions, 2);
        assert_eq!(r.results.rows[3].scenario, "io-0mb");
        assert_eq!(r.results.rows[11].bytes_moved, MB);
        assert!(r.measurements[3].get_throughput() > 0.0);
    }

    #[test]
    fn empty_lists_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::local(dir.path(), 1).unwrap();
        let err = bench_io(&s, &BenchIoConfig::new(vec![], vec![])).unwrap_err();
        assert!(err.to_string().contains("sizes"));
    }
}
