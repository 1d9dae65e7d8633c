//! In-memory map/reduce over partitioned data units.
//!
//! An [`InMemoryDataUnit`] is a data unit split into partitions of
//! key/value tuples, each held in a Pilot-Data space through a
//! [`MemoryBackend`]. [`Engine::map_reduce`] runs one MAP_TASK compute-unit
//! per partition, labeled with the partition's location, then moves map
//! output through the spaces to R REDUCE_TASK units.
//!
//! Intermediate keys go to reducer `xxh64(key, SHUFFLE_SEED) % R`. A reduce
//! call sees its values ordered by the global index of the input record
//! that produced them (then by emission order), and each output partition
//! is sorted by key. Output therefore does not depend on P, on the number
//! of workers or on scheduling.

mod backend;
mod job;
pub mod tuple;

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::Mutex;

pub use backend::{FileBackend, InMemoryBackend, MemoryBackend};
pub use job::{map_fn, reduce_fn, Collector, Emitter, MapFn, ReduceFn, TaskEnv};
pub use tuple::{decode_tuples, encode_tuples, reducer_for, shuffle_hash, Records, SHUFFLE_SEED};

use job::{BroadcastSource, Counters, Job, JobKind};
use tuple::{Layout, PartitionWriter};

use crate::compute::ComputeService;
use crate::data::{DataStore, DataUnit, DuState, SpaceHandle};
use crate::error::{Error, FieldError, Result};
use crate::pilot::{AffinityLabels, ComputeUnitDescription, PilotState, UnitKind, UnitState};

static NEXT_IMDU: AtomicU64 = AtomicU64::new(1);
static NEXT_JOB: AtomicU64 = AtomicU64::new(1);
static NEXT_BROADCAST: AtomicU64 = AtomicU64::new(1);

pub(crate) fn partition_name(imdu: &str, p: usize) -> String {
    format!("{imdu}/p-{p:05}")
}

pub(crate) fn bucket_name(job: &str, p: usize, j: usize) -> String {
    format!("{job}/m-{p:05}-r-{j:05}")
}

pub(crate) fn shuffle_name(job: &str, j: usize, p: usize) -> String {
    format!("{job}/s-{j:05}-{p:05}")
}

/// How `load` turns item bytes into tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Splitter {
    /// One tuple per `\n`-terminated line; key is the line number across
    /// the whole unit as u64 big-endian, value the line without `\n`.
    #[default]
    Lines,
    /// Records of `n` bytes (the last one may be shorter), keyed like
    /// `Lines`.
    FixedWidth(usize),
    /// Items already hold the tuple encoding. When the partition count
    /// equals the item count, item `i` becomes partition `i`.
    Tuples,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionInfo {
    pub partition_id: usize,
    pub space_id: String,
    pub labels: AffinityLabels,
    pub tuple_count: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InMemoryDataUnit {
    pub id: String,
    pub partitions: Vec<PartitionInfo>,
    pub origin_du: Option<String>,
    pub splitter: Splitter,
}

impl InMemoryDataUnit {
    pub fn tuple_count(&self) -> u64 {
        self.partitions.iter().map(|p| p.tuple_count).sum()
    }

    pub fn bytes(&self) -> u64 {
        self.partitions.iter().map(|p| p.bytes).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BroadcastRef {
    pub id: String,
    pub version: u64,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub broadcast_limit: usize,
    /// Attempts per task before the job fails.
    pub max_attempts: u32,
    /// Upper bound on each phase.
    pub phase_timeout: Duration,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            broadcast_limit: 64 << 20,
            max_attempts: 3,
            phase_timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JobOptions {
    /// Pre-reduce each map task's output with the reduce function. Only
    /// valid for associative reductions that keep their key.
    pub combine: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseStats {
    pub wall: Duration,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JobStats {
    pub job_id: String,
    pub map: PhaseStats,
    pub shuffle: PhaseStats,
    pub reduce: PhaseStats,
    pub input_tuples: u64,
    pub map_output_tuples: u64,
    pub reduce_input_tuples: u64,
    pub output_tuples: u64,
}

struct BroadcastEntry {
    version: u64,
    space_id: String,
    name: String,
}

pub struct Engine {
    compute: Arc<ComputeService>,
    data: Arc<DataStore>,
    backend: Arc<dyn MemoryBackend>,
    spaces: Vec<String>,
    config: EngineConfig,
    broadcasts: Mutex<BTreeMap<String, BroadcastEntry>>,
    freed: Mutex<HashSet<String>>,
}

impl Engine {
    /// An engine keeping partitions in `spaces`, which must all belong to
    /// the backend's storage kind.
    pub fn new(
        compute: Arc<ComputeService>,
        backend: Arc<dyn MemoryBackend>,
        spaces: Vec<String>,
        config: EngineConfig,
    ) -> Result<Self> {
        let data = compute.manager().data().clone();
        if spaces.is_empty() {
            return Err(Error::Validation(vec![FieldError::new("spaces", "at least one space is required")]));
        }
        for id in &spaces {
            let h = data.space(id)?;
            if h.kind != backend.kind() {
                return Err(Error::UnknownBackend(format!(
                    "{id} is a {}:// space, the engine backend is {}://",
                    h.kind,
                    backend.kind()
                )));
            }
        }
        Ok(Self {
            compute,
            data,
            backend,
            spaces,
            config,
            broadcasts: Mutex::new(BTreeMap::new()),
            freed: Mutex::new(HashSet::new()),
        })
    }

    /// Engine over `mem://` spaces.
    pub fn in_memory(compute: Arc<ComputeService>, spaces: Vec<String>) -> Result<Self> {
        let data = compute.manager().data().clone();
        Self::new(compute, Arc::new(InMemoryBackend::new(data)), spaces, EngineConfig::default())
    }

    /// Engine over `file://` spaces.
    pub fn file_based(compute: Arc<ComputeService>, spaces: Vec<String>) -> Result<Self> {
        let data = compute.manager().data().clone();
        Self::new(compute, Arc::new(FileBackend::new(data)), spaces, EngineConfig::default())
    }

    pub fn backend(&self) -> &Arc<dyn MemoryBackend> {
        &self.backend
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn compute(&self) -> &Arc<ComputeService> {
        &self.compute
    }

    /// `n` spaces to place partitions on: the live engine spaces closest to
    /// a running pilot, used round-robin.
    fn spread(&self, n: usize) -> Result<Vec<SpaceHandle>> {
        let running: Vec<AffinityLabels> = self
            .compute
            .manager()
            .pilots()
            .into_iter()
            .filter(|p| p.state == PilotState::Running)
            .map(|p| p.labels)
            .collect();
        let mut live: Vec<(u8, SpaceHandle)> = self
            .spaces
            .iter()
            .filter_map(|id| self.data.space(id).ok())
            .map(|h| {
                let score = running.iter().map(|l| l.locality_score(&h.labels)).max().unwrap_or(0);
                (score, h)
            })
            .collect();
        let best = live
            .iter()
            .map(|(s, _)| *s)
            .max()
            .ok_or_else(|| Error::AllocFailed("no live engine space".into()))?;
        live.retain(|(s, _)| *s == best);
        Ok((0..n).map(|i| live[i % live.len()].1.clone()).collect())
    }

    /// Labels a task touching `space` should carry: the space's labels when
    /// some running pilot matches them.
    fn task_labels(&self, labels: &AffinityLabels) -> AffinityLabels {
        let matched = self
            .compute
            .manager()
            .pilots()
            .iter()
            .any(|p| p.state == PilotState::Running && p.labels.locality_score(labels) > 0);
        if matched {
            labels.clone()
        } else {
            AffinityLabels::none()
        }
    }

    fn store_partitions(&self, id: &str, writers: Vec<PartitionWriter>) -> Result<Vec<PartitionInfo>> {
        let spaces = self.spread(writers.len())?;
        let mut parts = Vec::with_capacity(writers.len());
        for (p, (w, space)) in writers.into_iter().zip(spaces).enumerate() {
            let bytes = w.buf.freeze();
            let len = bytes.len() as u64;
            let stored = self
                .backend
                .alloc(&space.id, len)
                .and_then(|_| self.backend.store(&space.id, &partition_name(id, p), bytes));
            if let Err(e) = stored {
                for q in &parts {
                    let q: &PartitionInfo = q;
                    let _ = self.backend.dealloc(&q.space_id, &partition_name(id, q.partition_id));
                }
                return Err(e);
            }
            parts.push(PartitionInfo {
                partition_id: p,
                space_id: space.id,
                labels: space.labels,
                tuple_count: w.count,
                bytes: len,
            });
        }
        Ok(parts)
    }

    /// Split an AVAILABLE data unit into `partitions` partitions. Items are
    /// taken in logical-name order; records go to partitions round-robin.
    pub fn load(&self, du_id: &str, partitions: usize, splitter: Splitter) -> Result<InMemoryDataUnit> {
        if partitions == 0 {
            return Err(Error::Validation(vec![FieldError::new("partitions", "must be at least 1")]));
        }
        if let Splitter::FixedWidth(0) = splitter {
            return Err(Error::Validation(vec![FieldError::new("splitter", "record width must be at least 1")]));
        }
        let du = self.data.data_unit(du_id)?;
        if du.state != DuState::Available {
            return Err(Error::DuNotAvailable(format!("{du_id} is {}", du.state)));
        }
        let mut writers: Vec<PartitionWriter> = (0..partitions).map(|_| PartitionWriter::default()).collect();
        let preserve = splitter == Splitter::Tuples && du.items.len() == partitions;
        let mut index = 0u64;
        for (n, name) in du.items.keys().enumerate() {
            let bytes = self.data.read_item(du_id, name, None)?;
            let mut push = |key: Option<&[u8]>, value: &[u8]| {
                let p = if preserve { n } else { (index % partitions as u64) as usize };
                match key {
                    Some(k) => writers[p].push(index, k, value),
                    None => writers[p].push(index, &index.to_be_bytes(), value),
                }
                index += 1;
            };
            match splitter {
                Splitter::Lines => {
                    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
                    if !bytes.is_empty() {
                        for line in body.split(|&b| b == b'\n') {
                            push(None, line);
                        }
                    }
                }
                Splitter::FixedWidth(w) => {
                    for rec in bytes.chunks(w) {
                        push(None, rec);
                    }
                }
                Splitter::Tuples => {
                    for (k, v) in decode_tuples(&bytes)? {
                        push(Some(&k), &v);
                    }
                }
            }
        }
        let id = format!("imdu-{:06}", NEXT_IMDU.fetch_add(1, Ordering::Relaxed));
        let parts = self.store_partitions(&id, writers)?;
        Ok(InMemoryDataUnit {
            id,
            partitions: parts,
            origin_du: Some(du_id.to_owned()),
            splitter,
        })
    }

    /// Build an IMDU directly from tuples, partitioned round-robin. It has
    /// no origin data unit to reload from.
    pub fn from_tuples<K: AsRef<[u8]>, V: AsRef<[u8]>>(
        &self,
        tuples: impl IntoIterator<Item = (K, V)>,
        partitions: usize,
    ) -> Result<InMemoryDataUnit> {
        if partitions == 0 {
            return Err(Error::Validation(vec![FieldError::new("partitions", "must be at least 1")]));
        }
        let mut writers: Vec<PartitionWriter> = (0..partitions).map(|_| PartitionWriter::default()).collect();
        for (i, (k, v)) in tuples.into_iter().enumerate() {
            writers[i % partitions].push(i as u64, k.as_ref(), v.as_ref());
        }
        let id = format!("imdu-{:06}", NEXT_IMDU.fetch_add(1, Ordering::Relaxed));
        let parts = self.store_partitions(&id, writers)?;
        Ok(InMemoryDataUnit {
            id,
            partitions: parts,
            origin_du: None,
            splitter: Splitter::Tuples,
        })
    }

    /// Fail with `PartitionLost` if a partition's space is gone.
    fn check_live(&self, imdu: &InMemoryDataUnit) -> Result<()> {
        if self.freed.lock().contains(&imdu.id) {
            return Err(Error::UnknownDataUnit(format!("{} (deallocated)", imdu.id)));
        }
        for p in &imdu.partitions {
            if self.data.space(&p.space_id).is_err() {
                return Err(Error::PartitionLost {
                    imdu: imdu.id.clone(),
                    partition: p.partition_id,
                });
            }
        }
        Ok(())
    }

    /// Decoded partition `p`.
    pub fn partition(&self, imdu: &InMemoryDataUnit, p: usize) -> Result<Arc<Records>> {
        self.check_live(imdu)?;
        let info = imdu.partitions.get(p).ok_or_else(|| Error::PartitionLost {
            imdu: imdu.id.clone(),
            partition: p,
        })?;
        self.backend
            .fetch_records(&info.space_id, &partition_name(&imdu.id, p), Layout::Partition)
    }

    /// All tuples, partition by partition.
    pub fn collect(&self, imdu: &InMemoryDataUnit) -> Result<Vec<(Bytes, Bytes)>> {
        let mut out = Vec::with_capacity(imdu.tuple_count() as usize);
        for p in 0..imdu.partitions.len() {
            let records = self.partition(imdu, p)?;
            out.extend(
                records
                    .tuples()
                    .map(|(k, v)| (Bytes::copy_from_slice(k), Bytes::copy_from_slice(v))),
            );
        }
        Ok(out)
    }

    /// Every tuple sorted by key then value, in the tuple encoding. Equal
    /// for two IMDUs exactly when they hold the same multiset of tuples.
    pub fn canonical_bytes(&self, imdu: &InMemoryDataUnit) -> Result<Bytes> {
        let mut tuples = self.collect(imdu)?;
        tuples.sort();
        Ok(encode_tuples(tuples))
    }

    pub fn map_reduce(
        &self,
        imdu: &InMemoryDataUnit,
        map: impl MapFn + 'static,
        reduce: impl ReduceFn + 'static,
        reducers: usize,
    ) -> Result<InMemoryDataUnit> {
        self.map_reduce_with(imdu, Arc::new(map), Arc::new(reduce), reducers, JobOptions::default())
            .map(|(out, _)| out)
    }

    /// `map_reduce` with options, returning per-phase statistics.
    pub fn map_reduce_with(
        &self,
        imdu: &InMemoryDataUnit,
        map: Arc<dyn MapFn>,
        reduce: Arc<dyn ReduceFn>,
        reducers: usize,
        options: JobOptions,
    ) -> Result<(InMemoryDataUnit, JobStats)> {
        if reducers == 0 {
            return Err(Error::Validation(vec![FieldError::new("reducers", "must be at least 1")]));
        }
        self.check_live(imdu)?;
        let output_spaces = self.spread(reducers)?;
        let job = self.new_job(
            JobKind::MapReduce {
                reducers,
                combine: options.combine,
            },
            imdu,
            output_spaces.iter().map(|s| s.id.clone()).collect(),
            map,
            Some(reduce),
        );
        let guard = JobGuard::new(self, &job);
        let mut stats = JobStats {
            job_id: job.id.clone(),
            input_tuples: imdu.tuple_count(),
            ..JobStats::default()
        };

        let t = Instant::now();
        let maps: Vec<(String, AffinityLabels)> = imdu
            .partitions
            .iter()
            .map(|p| (format!("{}#map#{}", job.id, p.partition_id), self.task_labels(&p.labels)))
            .collect();
        self.run_phase(&job, UnitKind::MapTask, maps)?;
        stats.map = PhaseStats {
            wall: t.elapsed(),
            bytes: imdu.bytes(),
        };

        let t = Instant::now();
        let mut moved = 0;
        for p in &imdu.partitions {
            for (j, to) in job.output_spaces.iter().enumerate() {
                let from = bucket_name(&job.id, p.partition_id, j);
                let bytes = self.backend.fetch(&p.space_id, &from)?;
                moved += bytes.len() as u64;
                self.backend.alloc(to, bytes.len() as u64)?;
                self.backend.store(to, &shuffle_name(&job.id, j, p.partition_id), bytes)?;
                self.backend.dealloc(&p.space_id, &from)?;
            }
        }
        stats.shuffle = PhaseStats {
            wall: t.elapsed(),
            bytes: moved,
        };

        let t = Instant::now();
        let reduces: Vec<(String, AffinityLabels)> = output_spaces
            .iter()
            .enumerate()
            .map(|(j, s)| (format!("{}#reduce#{j}", job.id), self.task_labels(&s.labels)))
            .collect();
        self.run_phase(&job, UnitKind::ReduceTask, reduces)?;
        let out = self.finish_output(&job, &output_spaces);
        stats.reduce = PhaseStats {
            wall: t.elapsed(),
            bytes: out.bytes(),
        };
        stats.map_output_tuples = job.counters.map_output.load(Ordering::Relaxed);
        stats.reduce_input_tuples = job.counters.reduce_input.load(Ordering::Relaxed);
        stats.output_tuples = out.tuple_count();
        guard.succeed();
        Ok((out, stats))
    }

    /// Run `map` over every partition without a shuffle. Output partition
    /// `p` holds the output of input partition `p`, on the same space.
    pub fn map_only(&self, imdu: &InMemoryDataUnit, map: impl MapFn + 'static) -> Result<(InMemoryDataUnit, JobStats)> {
        self.check_live(imdu)?;
        let spaces: Vec<SpaceHandle> = imdu
            .partitions
            .iter()
            .map(|p| self.data.space(&p.space_id))
            .collect::<Result<_>>()?;
        let job = self.new_job(
            JobKind::MapOnly,
            imdu,
            spaces.iter().map(|s| s.id.clone()).collect(),
            Arc::new(map),
            None,
        );
        let guard = JobGuard::new(self, &job);
        let t = Instant::now();
        let maps: Vec<(String, AffinityLabels)> = imdu
            .partitions
            .iter()
            .map(|p| (format!("{}#map#{}", job.id, p.partition_id), self.task_labels(&p.labels)))
            .collect();
        self.run_phase(&job, UnitKind::MapTask, maps)?;
        let out = self.finish_output(&job, &spaces);
        let stats = JobStats {
            job_id: job.id.clone(),
            map: PhaseStats {
                wall: t.elapsed(),
                bytes: imdu.bytes(),
            },
            input_tuples: imdu.tuple_count(),
            map_output_tuples: job.counters.map_output.load(Ordering::Relaxed),
            output_tuples: out.tuple_count(),
            ..JobStats::default()
        };
        guard.succeed();
        Ok((out, stats))
    }

    fn new_job(
        &self,
        kind: JobKind,
        imdu: &InMemoryDataUnit,
        output_spaces: Vec<String>,
        map: Arc<dyn MapFn>,
        reduce: Option<Arc<dyn ReduceFn>>,
    ) -> Arc<Job> {
        let broadcasts = self
            .broadcasts
            .lock()
            .iter()
            .map(|(id, e)| BroadcastSource {
                r: BroadcastRef {
                    id: id.clone(),
                    version: e.version,
                },
                space_id: e.space_id.clone(),
                name: e.name.clone(),
            })
            .collect();
        let n_out = output_spaces.len();
        Arc::new(Job {
            id: format!("job-{:06}", NEXT_JOB.fetch_add(1, Ordering::Relaxed)),
            kind,
            input: imdu.clone(),
            output_id: format!("imdu-{:06}", NEXT_IMDU.fetch_add(1, Ordering::Relaxed)),
            output_spaces,
            map,
            reduce,
            backend: self.backend.clone(),
            broadcasts,
            lost: Mutex::new(None),
            counters: Counters::default(),
            outputs: Mutex::new(vec![None; n_out]),
        })
    }

    fn finish_output(&self, job: &Job, spaces: &[SpaceHandle]) -> InMemoryDataUnit {
        let outputs = job.outputs.lock();
        InMemoryDataUnit {
            id: job.output_id.clone(),
            partitions: spaces
                .iter()
                .enumerate()
                .map(|(j, s)| {
                    let (tuple_count, bytes) = outputs[j].unwrap_or((0, 0));
                    PartitionInfo {
                        partition_id: j,
                        space_id: s.id.clone(),
                        labels: s.labels.clone(),
                        tuple_count,
                        bytes,
                    }
                })
                .collect(),
            origin_du: None,
            splitter: Splitter::Tuples,
        }
    }

    /// Submit one unit per task and wait for all of them, resubmitting
    /// failed tasks up to `max_attempts` times.
    fn run_phase(&self, job: &Arc<Job>, kind: UnitKind, tasks: Vec<(String, AffinityLabels)>) -> Result<()> {
        let manager = self.compute.manager();
        if tasks.is_empty() {
            return Ok(());
        }
        if !manager
            .pilots()
            .iter()
            .any(|p| matches!(p.state, PilotState::Running | PilotState::Pending))
        {
            return Err(Error::NoPilots);
        }
        let submit = |i: usize| {
            let (payload, labels) = &tasks[i];
            manager.submit_compute_unit(ComputeUnitDescription::task(kind, payload.clone()).with_labels(labels))
        };
        let mut attempts = vec![1u32; tasks.len()];
        let mut open: Vec<(usize, String)> = (0..tasks.len())
            .map(|i| submit(i).map(|id| (i, id)))
            .collect::<Result<_>>()?;
        let deadline = Instant::now() + self.config.phase_timeout;
        while !open.is_empty() {
            let ids: Vec<String> = open.iter().map(|(_, id)| id.clone()).collect();
            let left = deadline.saturating_duration_since(Instant::now());
            let states = match manager.wait_units(&ids, left) {
                Ok(s) => s,
                Err(e) => {
                    for id in &ids {
                        let _ = manager.cancel_unit(id);
                    }
                    return Err(e);
                }
            };
            if let Some(p) = *job.lost.lock() {
                return Err(Error::PartitionLost {
                    imdu: job.input.id.clone(),
                    partition: p,
                });
            }
            let mut retry = Vec::new();
            for ((i, id), state) in open.iter().zip(states) {
                if state == UnitState::Done {
                    continue;
                }
                if attempts[*i] >= self.config.max_attempts {
                    let reason = match manager.unit_info(id)?.outcome {
                        Some(crate::manager::UnitOutcome::Failure { reason }) => reason,
                        _ => format!("unit ended {state}"),
                    };
                    return Err(Error::TaskFailed {
                        unit_id: id.clone(),
                        attempt: attempts[*i],
                        reason,
                    });
                }
                attempts[*i] += 1;
                retry.push((*i, submit(*i)?));
            }
            open = retry;
        }
        Ok(())
    }

    /// Write every partition as item `partition-NNNNN` of a new data unit on
    /// a durable space.
    pub fn persist(&self, imdu: &InMemoryDataUnit, space_id: &str) -> Result<DataUnit> {
        let space = self.data.space(space_id)?;
        if space.tier.is_volatile() {
            return Err(Error::Validation(vec![FieldError::new(
                "target_space",
                format!("{space_id} is on the volatile {} tier", space.tier),
            )]));
        }
        let items = (0..imdu.partitions.len())
            .map(|p| Ok((format!("partition-{p:05}"), self.partition(imdu, p)?.to_tuple_bytes())))
            .collect::<Result<Vec<_>>>()?;
        self.data.put_data_unit(space.labels.clone(), items, space_id)
    }

    /// Rebuild a lost IMDU from its origin data unit, with the same
    /// partition count and splitter.
    pub fn reload(&self, imdu: &InMemoryDataUnit) -> Result<InMemoryDataUnit> {
        let Some(origin) = &imdu.origin_du else {
            let partition = imdu
                .partitions
                .iter()
                .find(|p| self.data.space(&p.space_id).is_err())
                .map_or(0, |p| p.partition_id);
            return Err(Error::PartitionLost {
                imdu: imdu.id.clone(),
                partition,
            });
        };
        let _ = self.dealloc(imdu);
        self.load(origin, imdu.partitions.len(), imdu.splitter)
    }

    /// Free every partition. Later access to `imdu` fails.
    pub fn dealloc(&self, imdu: &InMemoryDataUnit) -> Result<()> {
        self.freed.lock().insert(imdu.id.clone());
        for p in &imdu.partitions {
            self.backend.dealloc(&p.space_id, &partition_name(&imdu.id, p.partition_id))?;
        }
        Ok(())
    }

    /// Make `value` readable by the tasks of every later job until
    /// released.
    pub fn broadcast(&self, value: Bytes) -> Result<BroadcastRef> {
        let id = format!("bc-{:06}", NEXT_BROADCAST.fetch_add(1, Ordering::Relaxed));
        self.put_broadcast(id, 1, value)
    }

    /// Replace the value behind `r`. Tasks of later jobs see only the new
    /// version; `r` itself stops resolving.
    pub fn rebroadcast(&self, r: &BroadcastRef, value: Bytes) -> Result<BroadcastRef> {
        let current = self.broadcasts.lock().get(&r.id).map(|e| e.version);
        if current != Some(r.version) {
            return Err(Error::UnknownBroadcast(format!("{}@v{}", r.id, r.version)));
        }
        let next = self.put_broadcast(r.id.clone(), r.version + 1, value)?;
        let old = format!("{}/v{}", r.id, r.version);
        let space = self.broadcasts.lock()[&r.id].space_id.clone();
        self.backend.dealloc(&space, &old)?;
        Ok(next)
    }

    fn put_broadcast(&self, id: String, version: u64, value: Bytes) -> Result<BroadcastRef> {
        if value.len() > self.config.broadcast_limit {
            return Err(Error::BroadcastTooLarge {
                size: value.len(),
                limit: self.config.broadcast_limit,
            });
        }
        let space = self.spread(1)?.remove(0);
        let name = format!("{id}/v{version}");
        self.backend.alloc(&space.id, value.len() as u64)?;
        self.backend.store(&space.id, &name, value)?;
        self.broadcasts.lock().insert(
            id.clone(),
            BroadcastEntry {
                version,
                space_id: space.id,
                name,
            },
        );
        Ok(BroadcastRef { id, version })
    }

    pub fn release_broadcast(&self, r: &BroadcastRef) -> Result<()> {
        let mut table = self.broadcasts.lock();
        match table.get(&r.id) {
            Some(e) if e.version == r.version => {
                let e = table.remove(&r.id).expect("present");
                drop(table);
                self.backend.dealloc(&e.space_id, &e.name)
            }
            _ => Err(Error::UnknownBroadcast(format!("{}@v{}", r.id, r.version))),
        }
    }
}

/// Registers the job's task for its lifetime and removes its intermediate
/// items, plus its output unless the job succeeded.
struct JobGuard<'a> {
    engine: &'a Engine,
    job: Arc<Job>,
    ok: std::cell::Cell<bool>,
}

impl<'a> JobGuard<'a> {
    fn new(engine: &'a Engine, job: &Arc<Job>) -> Self {
        let j = job.clone();
        engine
            .compute
            .register_task(&job.id, Arc::new(move |ctx: &crate::compute::TaskContext| j.run(ctx)));
        Self {
            engine,
            job: job.clone(),
            ok: std::cell::Cell::new(false),
        }
    }

    fn succeed(self) {
        self.ok.set(true);
    }
}

impl Drop for JobGuard<'_> {
    fn drop(&mut self) {
        let engine = self.engine;
        let job = &self.job;
        engine.compute.unregister_task(&job.id);
        let backend = &engine.backend;
        for p in &job.input.partitions {
            for (j, space) in job.output_spaces.iter().enumerate().take(job.reducers()) {
                let _ = backend.dealloc(&p.space_id, &bucket_name(&job.id, p.partition_id, j));
                let _ = backend.dealloc(space, &shuffle_name(&job.id, j, p.partition_id));
            }
        }
        if !self.ok.get() {
            for (j, space) in job.output_spaces.iter().enumerate() {
                let _ = backend.dealloc(space, &partition_name(&job.output_id, j));
            }
        }
    }
}
