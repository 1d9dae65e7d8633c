use std::any::Any;
use std::cell::OnceCell;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use bytes::{Bytes, BytesMut};
use parking_lot::Mutex;
use rustc_hash::FxHashMap;

use super::backend::MemoryBackend;
use super::tuple::{put_bucket_record, reducer_for, Layout, PartitionWriter, Records};
use super::{bucket_name, partition_name, shuffle_name, BroadcastRef, InMemoryDataUnit};
use crate::compute::TaskContext;
use crate::error::{Error, Result};

/// A map function: called once per input tuple, emitting any number of
/// intermediate tuples.
pub trait MapFn: Send + Sync {
    fn map(&self, env: &TaskEnv, key: &[u8], value: &[u8], out: &mut Emitter) -> Result<()>;
}

/// A reduce function: called once per intermediate key with the values in
/// source record order.
pub trait ReduceFn: Send + Sync {
    fn reduce(&self, env: &TaskEnv, key: &[u8], values: &[&[u8]], out: &mut Collector) -> Result<()>;
}

struct FnMap<F>(F);

impl<F> MapFn for FnMap<F>
where
    F: Fn(&TaskEnv, &[u8], &[u8], &mut Emitter) -> Result<()> + Send + Sync,
{
    fn map(&self, env: &TaskEnv, key: &[u8], value: &[u8], out: &mut Emitter) -> Result<()> {
        (self.0)(env, key, value, out)
    }
}

struct FnReduce<F>(F);

impl<F> ReduceFn for FnReduce<F>
where
    F: Fn(&TaskEnv, &[u8], &[&[u8]], &mut Collector) -> Result<()> + Send + Sync,
{
    fn reduce(&self, env: &TaskEnv, key: &[u8], values: &[&[u8]], out: &mut Collector) -> Result<()> {
        (self.0)(env, key, values, out)
    }
}

/// Wrap a closure as a [`MapFn`].
pub fn map_fn<F>(f: F) -> impl MapFn + 'static
where
    F: Fn(&TaskEnv, &[u8], &[u8], &mut Emitter) -> Result<()> + Send + Sync + 'static,
{
    FnMap(f)
}

/// Wrap a closure as a [`ReduceFn`].
pub fn reduce_fn<F>(f: F) -> impl ReduceFn + 'static
where
    F: Fn(&TaskEnv, &[u8], &[&[u8]], &mut Collector) -> Result<()> + Send + Sync + 'static,
{
    FnReduce(f)
}

#[derive(Clone)]
pub(crate) struct BroadcastSource {
    pub(crate) r: BroadcastRef,
    pub(crate) space_id: String,
    pub(crate) name: String,
}

struct Slot {
    source: BroadcastSource,
    bytes: OnceCell<Bytes>,
    typed: OnceCell<Box<dyn Any + Send + Sync>>,
}

/// Per-task view of the job: identity and broadcast values. Broadcast
/// bytes and decoded forms are fetched once per task.
pub struct TaskEnv {
    unit_id: String,
    attempt: u32,
    index: usize,
    backend: Arc<dyn MemoryBackend>,
    slots: Vec<Slot>,
}

impl TaskEnv {
    fn new(ctx: &TaskContext, index: usize, job: &Job) -> Self {
        Self {
            unit_id: ctx.unit_id.clone(),
            attempt: ctx.attempt,
            index,
            backend: job.backend.clone(),
            slots: job
                .broadcasts
                .iter()
                .map(|s| Slot {
                    source: s.clone(),
                    bytes: OnceCell::new(),
                    typed: OnceCell::new(),
                })
                .collect(),
        }
    }

    pub fn unit_id(&self) -> &str {
        &self.unit_id
    }

    pub fn attempt(&self) -> u32 {
        self.attempt
    }

    /// Partition index for map tasks, reducer index for reduce tasks.
    pub fn task_index(&self) -> usize {
        self.index
    }

    fn slot(&self, r: &BroadcastRef) -> Result<&Slot> {
        self.slots
            .iter()
            .find(|s| s.source.r == *r)
            .ok_or_else(|| Error::UnknownBroadcast(format!("{}@v{}", r.id, r.version)))
    }

    pub fn broadcast(&self, r: &BroadcastRef) -> Result<&Bytes> {
        let slot = self.slot(r)?;
        if slot.bytes.get().is_none() {
            let b = self.backend.fetch(&slot.source.space_id, &slot.source.name)?;
            let _ = slot.bytes.set(b);
        }
        Ok(slot.bytes.get().expect("set above"))
    }

    /// The broadcast decoded with `decode`, decoded at most once per task.
    pub fn cached<T: Any + Send + Sync>(
        &self,
        r: &BroadcastRef,
        decode: impl FnOnce(&Bytes) -> Result<T>,
    ) -> Result<&T> {
        let slot = self.slot(r)?;
        if slot.typed.get().is_none() {
            let value = decode(self.broadcast(r)?)?;
            let _ = slot.typed.set(Box::new(value));
        }
        slot.typed
            .get()
            .and_then(|b| b.downcast_ref::<T>())
            .ok_or_else(|| Error::Encoding(format!("broadcast {} cached as another type", r.id)))
    }
}

enum Target {
    Buckets(Vec<BytesMut>),
    Partition(PartitionWriter),
}

/// Sink for map output.
pub struct Emitter {
    target: Target,
    index: u64,
    seq: u32,
    count: u64,
}

impl Emitter {
    fn buckets(reducers: usize) -> Self {
        Self {
            target: Target::Buckets((0..reducers).map(|_| BytesMut::new()).collect()),
            index: 0,
            seq: 0,
            count: 0,
        }
    }

    fn partition() -> Self {
        Self {
            target: Target::Partition(PartitionWriter::default()),
            index: 0,
            seq: 0,
            count: 0,
        }
    }

    fn begin(&mut self, index: u64) {
        self.index = index;
        self.seq = 0;
    }

    pub fn emit(&mut self, key: &[u8], value: &[u8]) {
        match &mut self.target {
            Target::Buckets(b) => {
                let j = if b.len() == 1 { 0 } else { reducer_for(key, b.len()) };
                put_bucket_record(&mut b[j], self.index, self.seq, key, value);
            }
            Target::Partition(w) => w.push((self.index << 16) | u64::from(self.seq & 0xffff), key, value),
        }
        self.seq += 1;
        self.count += 1;
    }

    /// Tuples emitted so far.
    pub fn emitted(&self) -> u64 {
        self.count
    }
}

/// Sink for reduce output.
#[derive(Default)]
pub struct Collector {
    buf: Vec<u8>,
    spans: Vec<(usize, usize, usize)>,
}

impl Collector {
    pub fn emit(&mut self, key: &[u8], value: &[u8]) {
        let start = self.buf.len();
        self.buf.extend_from_slice(key);
        self.buf.extend_from_slice(value);
        self.spans.push((start, key.len(), value.len()));
    }

    fn key(&self, i: usize) -> &[u8] {
        let (s, k, _) = self.spans[i];
        &self.buf[s..s + k]
    }

    fn value(&self, i: usize) -> &[u8] {
        let (s, k, v) = self.spans[i];
        &self.buf[s + k..s + k + v]
    }

    fn clear(&mut self) {
        self.buf.clear();
        self.spans.clear();
    }
}

pub(crate) enum JobKind {
    MapReduce { reducers: usize, combine: bool },
    MapOnly,
}

#[derive(Default)]
pub(crate) struct Counters {
    pub(crate) map_input: AtomicU64,
    pub(crate) map_output: AtomicU64,
    pub(crate) reduce_input: AtomicU64,
}

pub(crate) struct Job {
    pub(crate) id: String,
    pub(crate) kind: JobKind,
    pub(crate) input: InMemoryDataUnit,
    pub(crate) output_id: String,
    /// Reducer spaces, or one space per input partition for map-only jobs.
    pub(crate) output_spaces: Vec<String>,
    pub(crate) map: Arc<dyn MapFn>,
    pub(crate) reduce: Option<Arc<dyn ReduceFn>>,
    pub(crate) backend: Arc<dyn MemoryBackend>,
    pub(crate) broadcasts: Vec<BroadcastSource>,
    /// Partition whose space died under a map task.
    pub(crate) lost: Mutex<Option<usize>>,
    pub(crate) counters: Counters,
    /// `(tuples, bytes)` per output partition.
    pub(crate) outputs: Mutex<Vec<Option<(u64, u64)>>>,
}

impl Job {
    pub(crate) fn reducers(&self) -> usize {
        match self.kind {
            JobKind::MapReduce { reducers, .. } => reducers,
            JobKind::MapOnly => 0,
        }
    }

    /// Entry point of the job's registered task.
    pub(crate) fn run(&self, ctx: &TaskContext) -> Result<()> {
        let mut parts = ctx.payload_arg().splitn(2, '#');
        let phase = parts.next().unwrap_or_default();
        let index: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Encoding(format!("bad task payload {:?}", ctx.payload)))?;
        match phase {
            "map" => self.run_map(ctx, index),
            "reduce" => self.run_reduce(ctx, index),
            other => Err(Error::Encoding(format!("unknown task phase {other:?}"))),
        }
    }

    fn run_map(&self, ctx: &TaskContext, p: usize) -> Result<()> {
        let part = &self.input.partitions[p];
        let records = match self.backend.fetch_records(
            &part.space_id,
            &partition_name(&self.input.id, p),
            Layout::Partition,
        ) {
            Ok(r) => r,
            Err(e) => {
                if ctx.data.space(&part.space_id).is_err() {
                    *self.lost.lock() = Some(p);
                }
                return Err(e);
            }
        };
        let env = TaskEnv::new(ctx, p, self);
        let mut out = match self.kind {
            JobKind::MapReduce { reducers, .. } => Emitter::buckets(reducers),
            JobKind::MapOnly => Emitter::partition(),
        };
        for (n, r) in records.recs.iter().enumerate() {
            if n % 4096 == 0 && ctx.is_aborted() {
                return Err(aborted(ctx));
            }
            out.begin(r.index);
            self.map.map(&env, records.key_of(r), records.value_of(r), &mut out)?;
        }
        self.counters
            .map_input
            .fetch_add(records.len() as u64, Ordering::Relaxed);
        if ctx.is_aborted() {
            return Err(aborted(ctx));
        }
        match out.target {
            Target::Buckets(buckets) => {
                let combine = matches!(self.kind, JobKind::MapReduce { combine: true, .. });
                let buckets = if combine {
                    self.combine(&env, buckets)?
                } else {
                    self.counters.map_output.fetch_add(out.count, Ordering::Relaxed);
                    buckets
                };
                for (j, b) in buckets.into_iter().enumerate() {
                    let b = b.freeze();
                    self.backend.alloc(&part.space_id, b.len() as u64)?;
                    self.backend.store(&part.space_id, &bucket_name(&self.id, p, j), b)?;
                }
            }
            Target::Partition(w) => {
                self.counters.map_output.fetch_add(w.count, Ordering::Relaxed);
                let space = &self.output_spaces[p];
                let bytes = w.buf.freeze();
                let len = bytes.len() as u64;
                self.backend.alloc(space, len)?;
                self.backend.store(space, &partition_name(&self.output_id, p), bytes)?;
                self.outputs.lock()[p] = Some((w.count, len));
            }
        }
        Ok(())
    }

    /// Pre-reduce every bucket with the job's reduce function.
    fn combine(&self, env: &TaskEnv, buckets: Vec<BytesMut>) -> Result<Vec<BytesMut>> {
        let reduce = self.reduce.as_ref().expect("map-reduce job");
        let r = buckets.len();
        let mut combined: Vec<Vec<(u64, u32, Vec<u8>, Vec<u8>)>> = vec![Vec::new(); r];
        let mut collector = Collector::default();
        for bucket in buckets {
            let records = Records::decode(bucket.freeze(), Layout::Bucket)?;
            let mut values: Vec<&[u8]> = Vec::new();
            let groups = group_by_key(&[&records]);
            for n in 0..groups.len() {
                let (key, group) = groups.get(n);
                let first = records.recs[group[0].1 as usize].index;
                values.clear();
                values.extend(group.iter().map(|&(_, i)| records.value_of(&records.recs[i as usize])));
                collector.clear();
                reduce.reduce(env, key, &values, &mut collector)?;
                for i in 0..collector.spans.len() {
                    let k = collector.key(i);
                    let j = if r == 1 { 0 } else { reducer_for(k, r) };
                    combined[j].push((first, i as u32, k.to_vec(), collector.value(i).to_vec()));
                }
            }
        }
        let mut out = Vec::with_capacity(r);
        for mut recs in combined {
            recs.sort_by_key(|x| (x.0, x.1));
            self.counters.map_output.fetch_add(recs.len() as u64, Ordering::Relaxed);
            let mut buf = BytesMut::new();
            for (index, seq, k, v) in &recs {
                put_bucket_record(&mut buf, *index, *seq, k, v);
            }
            out.push(buf);
        }
        Ok(out)
    }

    fn run_reduce(&self, ctx: &TaskContext, j: usize) -> Result<()> {
        let reduce = self.reduce.as_ref().expect("map-reduce job");
        let space = &self.output_spaces[j];
        let inputs: Vec<Arc<Records>> = (0..self.input.partitions.len())
            .map(|p| self.backend.fetch_records(space, &shuffle_name(&self.id, j, p), Layout::Bucket))
            .collect::<Result<_>>()?;
        let inputs_ref: Vec<&Records> = inputs.iter().map(|r| r.as_ref()).collect();
        let env = TaskEnv::new(ctx, j, self);
        let mut collector = Collector::default();
        let mut values: Vec<&[u8]> = Vec::new();
        let mut total = 0;
        let groups = group_by_key(&inputs_ref);
        for n in 0..groups.len() {
            let (key, group) = groups.get(n);
            if n % 256 == 0 && ctx.is_aborted() {
                return Err(aborted(ctx));
            }
            total += group.len() as u64;
            values.clear();
            values.extend(
                group
                    .iter()
                    .map(|&(b, i)| inputs_ref[b as usize].value_of(&inputs_ref[b as usize].recs[i as usize])),
            );
            reduce.reduce(&env, key, &values, &mut collector)?;
        }
        self.counters.reduce_input.fetch_add(total, Ordering::Relaxed);

        let mut order: Vec<usize> = (0..collector.spans.len()).collect();
        order.sort_by(|&a, &b| collector.key(a).cmp(collector.key(b)));
        let mut w = PartitionWriter::default();
        for (ordinal, &i) in order.iter().enumerate() {
            w.push(((j as u64) << 40) | ordinal as u64, collector.key(i), collector.value(i));
        }
        let bytes = w.buf.freeze();
        let len = bytes.len() as u64;
        self.backend.alloc(space, len)?;
        self.backend.store(space, &partition_name(&self.output_id, j), bytes)?;
        self.outputs.lock()[j] = Some((w.count, len));
        Ok(())
    }
}

fn aborted(ctx: &TaskContext) -> Error {
    Error::TaskFailed {
        unit_id: ctx.unit_id.clone(),
        attempt: ctx.attempt,
        reason: "aborted".into(),
    }
}

/// Records of several inputs grouped by key. Groups are in key order; the
/// members of a group in (record index, emission sequence) order. Members
/// are `(input, record)` positions.
struct Groups<'a> {
    keys: Vec<&'a [u8]>,
    /// Group `g` owns `members[bounds[g]..bounds[g + 1]]`.
    bounds: Vec<usize>,
    members: Vec<(u32, u32)>,
    order: Vec<u32>,
}

impl<'a> Groups<'a> {
    fn len(&self) -> usize {
        self.order.len()
    }

    /// The `n`-th group in key order.
    fn get(&self, n: usize) -> (&'a [u8], &[(u32, u32)]) {
        let g = self.order[n] as usize;
        (self.keys[g], &self.members[self.bounds[g]..self.bounds[g + 1]])
    }
}

/// Positions of all records ordered by (index, seq, input). Inputs sorted
/// on their own are merged, anything else is sorted.
fn merged_positions(inputs: &[&Records]) -> Vec<(u32, u32)> {
    let total = inputs.iter().map(|r| r.len()).sum();
    let sorted = inputs
        .iter()
        .all(|r| r.recs.windows(2).all(|w| (w[0].index, w[0].seq) <= (w[1].index, w[1].seq)));
    if !sorted {
        let mut all: Vec<(u64, u32, u32, u32)> = Vec::with_capacity(total);
        for (b, records) in inputs.iter().enumerate() {
            all.extend(records.recs.iter().enumerate().map(|(i, r)| (r.index, r.seq, b as u32, i as u32)));
        }
        all.sort_unstable();
        return all.into_iter().map(|(_, _, b, i)| (b, i)).collect();
    }
    let mut out = Vec::with_capacity(total);
    let head = |b: usize, i: usize| {
        let r = &inputs[b].recs[i];
        Reverse((r.index, r.seq, b as u32))
    };
    let mut next = vec![0usize; inputs.len()];
    let mut heap: BinaryHeap<_> = (0..inputs.len()).filter(|&b| !inputs[b].is_empty()).map(|b| head(b, 0)).collect();
    while let Some(Reverse((_, _, b))) = heap.pop() {
        let b = b as usize;
        out.push((b as u32, next[b] as u32));
        next[b] += 1;
        if next[b] < inputs[b].len() {
            heap.push(head(b, next[b]));
        }
    }
    out
}

fn group_by_key<'a>(inputs: &[&'a Records]) -> Groups<'a> {
    let positions = merged_positions(inputs);
    let mut ids: FxHashMap<&'a [u8], u32> = FxHashMap::default();
    let mut keys = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut gid = Vec::with_capacity(positions.len());
    for &(b, i) in &positions {
        let records = inputs[b as usize];
        let key = records.key_of(&records.recs[i as usize]);
        let g = *ids.entry(key).or_insert_with(|| {
            keys.push(key);
            counts.push(0);
            (keys.len() - 1) as u32
        });
        counts[g as usize] += 1;
        gid.push(g);
    }
    let mut bounds = Vec::with_capacity(keys.len() + 1);
    bounds.push(0);
    for c in &counts {
        bounds.push(bounds.last().copied().unwrap_or(0) + c);
    }
    let mut fill = bounds[..keys.len()].to_vec();
    let mut members = vec![(0, 0); positions.len()];
    for (pos, g) in positions.into_iter().zip(gid) {
        members[fill[g as usize]] = pos;
        fill[g as usize] += 1;
    }
    let mut order: Vec<u32> = (0..keys.len() as u32).collect();
    order.sort_unstable_by(|&a, &b| keys[a as usize].cmp(keys[b as usize]));
    Groups {
        keys,
        bounds,
        members,
        order,
    }
}
