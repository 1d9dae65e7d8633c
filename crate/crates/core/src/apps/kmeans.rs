//! Lloyd's KMeans as iterated map/reduce jobs.
//!
//! Points are tuples `(u64 BE point index, d × f64 LE)`. Each iteration
//! broadcasts the centroid set as tuples `(u32 BE centroid index, d × f64
//! LE)`; the map assigns every point to its nearest centroid by squared
//! Euclidean distance (lowest index on ties) and the reduce averages the
//! points of each centroid. A centroid without points keeps its position.

use std::time::{Duration, Instant};

use bytes::{BufMut, Bytes, BytesMut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::results::{wall_ms, BenchResult, BenchRow, Phase};
use super::{EngineBackend, Session};
use crate::data::MB;
use crate::engine::{
    decode_tuples, encode_tuples, BroadcastRef, Collector, Emitter, Engine, InMemoryDataUnit, JobOptions,
    JobStats, MapFn, ReduceFn, Splitter, TaskEnv,
};
use crate::error::{Error, FieldError, Result};
use crate::pilot::{AffinityLabels, PilotState};

fn two() -> usize {
    2
}

fn one() -> usize {
    1
}

fn ten() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansConfig {
    pub n_points: usize,
    pub n_clusters: usize,
    #[serde(default = "two")]
    pub n_dims: usize,
    #[serde(default = "ten")]
    pub max_iterations: u32,
    /// Stop once no centroid moves farther than this.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backend: EngineBackend,
    #[serde(default = "one")]
    pub partitions: usize,
    #[serde(default = "one")]
    pub reducers: usize,
}

impl KMeansConfig {
    pub fn new(n_points: usize, n_clusters: usize) -> Self {
        Self {
            n_points,
            n_clusters,
            n_dims: 2,
            max_iterations: 10,
            epsilon: 0.0,
            seed: 0,
            backend: EngineBackend::Memory,
            partitions: 1,
            reducers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        let mut positive = |field: &'static str, v: u64| {
            if v == 0 {
                errors.push(FieldError::new(field, "must be at least 1"));
            }
        };
        positive("n_points", self.n_points as u64);
        positive("n_clusters", self.n_clusters as u64);
        positive("n_dims", self.n_dims as u64);
        positive("max_iterations", u64::from(self.max_iterations));
        positive("partitions", self.partitions as u64);
        positive("reducers", self.reducers as u64);
        if self.n_clusters > self.n_points {
            errors.push(FieldError::new(
                "n_clusters",
                format!("must not exceed n_points ({})", self.n_points),
            ));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            errors.push(FieldError::new("epsilon", "must be a non-negative number"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn scenario(&self) -> String {
        format!("kmeans-{}x{}x{}", self.n_points, self.n_clusters, self.n_dims)
    }
}

/// `n` points with `dims` coordinates drawn uniformly from [0, 1), flat.
pub fn generate_points(n: usize, dims: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * dims).map(|_| rng.gen::<f64>()).collect()
}

fn put_f64s(buf: &mut BytesMut, xs: &[f64]) {
    for x in xs {
        buf.put_f64_le(*x);
    }
}

pub fn encode_points(points: &[f64], dims: usize) -> Bytes {
    let mut buf = BytesMut::with_capacity(points.len() / dims * (16 + 8 * dims));
    for (i, p) in points.chunks_exact(dims).enumerate() {
        buf.put_u32_le(8);
        buf.put_u64(i as u64);
        buf.put_u32_le((8 * dims) as u32);
        put_f64s(&mut buf, p);
    }
    buf.freeze()
}

pub fn encode_centroids(centroids: &[f64], dims: usize) -> Bytes {
    encode_tuples(centroids.chunks_exact(dims).enumerate().map(|(j, c)| {
        let mut v = BytesMut::with_capacity(8 * dims);
        put_f64s(&mut v, c);
        ((j as u32).to_be_bytes(), v)
    }))
}

fn f64_at(bytes: &[u8], i: usize) -> f64 {
    f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"))
}

pub fn decode_centroids(bytes: &Bytes, dims: usize) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (_, v) in decode_tuples(bytes)? {
        if v.len() != 8 * dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: v.len() / 8,
            });
        }
        out.extend((0..dims).map(|i| f64_at(&v, i)));
    }
    Ok(out)
}

/// Index of the centroid nearest to `point` and the squared distance.
fn nearest(point: &[u8], centroids: &[f64], dims: usize) -> (usize, f64) {
    match dims {
        2 => nearest_fixed::<2>(point, centroids),
        3 => nearest_fixed::<3>(point, centroids),
        _ => {
            let p: Vec<f64> = (0..dims).map(|i| f64_at(point, i)).collect();
            closest(centroids.chunks_exact(dims), |c| sq_dist(&p, c))
        }
    }
}

fn nearest_fixed<const D: usize>(point: &[u8], centroids: &[f64]) -> (usize, f64) {
    let p: [f64; D] = std::array::from_fn(|i| f64_at(point, i));
    closest(centroids.chunks_exact(D), |c| sq_dist(&p, c))
}

#[inline(always)]
fn sq_dist(p: &[f64], c: &[f64]) -> f64 {
    let mut d = 0.0;
    for (pi, ci) in p.iter().zip(c) {
        let diff = pi - ci;
        d += diff * diff;
    }
    d
}

#[inline(always)]
fn closest<'c>(centroids: impl Iterator<Item = &'c [f64]>, dist: impl Fn(&[f64]) -> f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.enumerate() {
        let d = dist(c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

struct Assign {
    centroids: BroadcastRef,
    dims: usize,
    /// Emit `(point, centroid)` instead of `(centroid, point ++ distance)`.
    labels_only: bool,
}

impl MapFn for Assign {
    fn map(&self, env: &TaskEnv, key: &[u8], value: &[u8], out: &mut Emitter) -> Result<()> {
        let dims = self.dims;
        let centroids: &Vec<f64> = env.cached(&self.centroids, |b| decode_centroids(b, dims))?;
        if value.len() != 8 * dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                found: value.len() / 8,
            });
        }
        let (j, dist) = nearest(value, centroids, dims);
        let j = (j as u32).to_be_bytes();
        if self.labels_only {
            out.emit(key, &j);
            return Ok(());
        }
        let mut stack = [0u8; 136];
        let mut heap = Vec::new();
        let n = value.len() + 8;
        let buf: &mut [u8] = if n <= stack.len() {
            &mut stack[..n]
        } else {
            heap.resize(n, 0);
            &mut heap
        };
        buf[..value.len()].copy_from_slice(value);
        buf[value.len()..].copy_from_slice(&dist.to_le_bytes());
        out.emit(&j, buf);
        Ok(())
    }
}

/// Mean of the assigned points, their count and their summed squared
/// distance, accumulated in input order.
struct Mean {
    dims: usize,
}

impl ReduceFn for Mean {
    fn reduce(&self, _env: &TaskEnv, key: &[u8], values: &[&[u8]], out: &mut Collector) -> Result<()> {
        let dims = self.dims;
        let mut sum = vec![0.0; dims];
        let mut wcss = 0.0;
        for v in values {
            if v.len() != 8 * (dims + 1) {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    found: v.len() / 8 - 1,
                });
            }
            for (i, s) in sum.iter_mut().enumerate() {
                *s += f64_at(v, i);
            }
            wcss += f64_at(v, dims);
        }
        let count = values.len() as u64;
        let mut buf = BytesMut::with_capacity(8 * dims + 16);
        for s in &sum {
            buf.put_f64_le(s / count as f64);
        }
        buf.put_u64_le(count);
        buf.put_f64_le(wcss);
        out.emit(key, &buf);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Iteration {
    pub centroids: Vec<f64>,
    /// Points assigned to each centroid.
    pub counts: Vec<u64>,
    /// Sum of squared distances to the centroids the iteration started from.
    pub wcss: f64,
    /// Largest distance any centroid moved.
    pub max_shift: f64,
    pub stats: JobStats,
    pub wall: Duration,
}

/// KMeans over a loaded point set.
pub struct KMeans<'e> {
    engine: &'e Engine,
    points: InMemoryDataUnit,
    dims: usize,
    k: usize,
    reducers: usize,
}

impl<'e> KMeans<'e> {
    pub fn new(engine: &'e Engine, points: InMemoryDataUnit, dims: usize, k: usize, reducers: usize) -> Self {
        Self {
            engine,
            points,
            dims,
            k,
            reducers,
        }
    }

    pub fn points(&self) -> &InMemoryDataUnit {
        &self.points
    }

    fn check(&self, centroids: &[f64]) -> Result<()> {
        if centroids.len() != self.k * self.dims {
            return Err(Error::DimensionMismatch {
                expected: self.k * self.dims,
                found: centroids.len(),
            });
        }
        Ok(())
    }

    /// The map/reduce job of one step: one tuple per non-empty cluster,
    /// keyed by centroid index, holding the new centroid, the point count
    /// and the summed squared distance. The caller deallocates the result.
    pub fn step(&self, centroids: &[f64]) -> Result<(InMemoryDataUnit, JobStats)> {
        self.check(centroids)?;
        let dims = self.dims;
        let r = self.engine.broadcast(encode_centroids(centroids, dims))?;
        let job = self.engine.map_reduce_with(
            &self.points,
            std::sync::Arc::new(Assign {
                centroids: r.clone(),
                dims,
                labels_only: false,
            }),
            std::sync::Arc::new(Mean { dims }),
            self.reducers,
            JobOptions::default(),
        );
        let released = self.engine.release_broadcast(&r);
        let (out, stats) = job?;
        released?;
        Ok((out, stats))
    }

    /// One assignment and update step starting from `centroids`.
    pub fn iterate(&self, centroids: &[f64]) -> Result<Iteration> {
        let start = Instant::now();
        let dims = self.dims;
        let (out, stats) = self.step(centroids)?;
        let tuples = self.engine.collect(&out);
        self.engine.dealloc(&out)?;

        let mut next = centroids.to_vec();
        let mut counts = vec![0; self.k];
        let mut per_cluster = vec![0.0; self.k];
        for (key, value) in tuples? {
            let j = u32::from_be_bytes(key[..].try_into().map_err(|_| Error::Encoding("centroid key".into()))?) as usize;
            if j >= self.k || value.len() != 8 * dims + 16 {
                return Err(Error::Encoding(format!("bad reduce output for centroid {j}")));
            }
            for i in 0..dims {
                next[j * dims + i] = f64_at(&value, i);
            }
            counts[j] = u64::from_le_bytes(value[8 * dims..8 * dims + 8].try_into().expect("8 bytes"));
            per_cluster[j] = f64_at(&value, dims + 1);
        }
        let wcss = per_cluster.iter().sum();
        let max_shift = centroids
            .chunks_exact(dims)
            .zip(next.chunks_exact(dims))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(Iteration {
            centroids: next,
            counts,
            wcss,
            max_shift,
            stats,
            wall: start.elapsed(),
        })
    }

    /// Nearest centroid of every point, in point order.
    pub fn assign(&self, centroids: &[f64]) -> Result<Vec<u32>> {
        self.check(centroids)?;
        let r = self.engine.broadcast(encode_centroids(centroids, self.dims))?;
        let job = self.engine.map_only(
            &self.points,
            Assign {
                centroids: r.clone(),
                dims: self.dims,
                labels_only: true,
            },
        );
        let released = self.engine.release_broadcast(&r);
        let (out, _) = job?;
        released?;
        let tuples = self.engine.collect(&out);
        self.engine.dealloc(&out)?;
        let mut labeled: Vec<(u64, u32)> = tuples?
            .into_iter()
            .map(|(k, v)| {
                let point = k[..].try_into().map(u64::from_be_bytes);
                let label = v[..].try_into().map(u32::from_be_bytes);
                match (point, label) {
                    (Ok(p), Ok(l)) => Ok((p, l)),
                    _ => Err(Error::Encoding("assignment tuple".into())),
                }
            })
            .collect::<Result<_>>()?;
        labeled.sort_unstable();
        Ok(labeled.into_iter().map(|(_, l)| l).collect())
    }
}

#[derive(Debug, Clone)]
pub struct KMeansReport {
    pub config: KMeansConfig,
    pub initial: Vec<f64>,
    pub iterations: Vec<Iteration>,
    /// Centroids after the last iteration.
    pub centroids: Vec<f64>,
    pub converged: bool,
    pub results: BenchResult,
}

impl KMeansReport {
    /// Centroids the last iteration assigned points to.
    pub fn last_assignment_centroids(&self) -> &[f64] {
        match self.iterations.len() {
            0 | 1 => &self.initial,
            n => &self.iterations[n - 2].centroids,
        }
    }
}

fn space_estimate_mb(c: &KMeansConfig) -> u64 {
    let d = c.n_dims as u64;
    let per_point = (16 + 8 * d) + (24 + 8 * d) + 2 * (32 + 8 * d);
    let bytes = c.n_points as u64 * per_point + c.n_clusters as u64 * (16 + 8 * d) * 4;
    let items = (c.partitions * c.reducers) as u64 * 2 + 2 * (c.partitions + c.reducers) as u64;
    (bytes * 5 / 4).div_ceil(MB) + items + 16
}

/// Generate the points of `config`, load them and iterate until no
/// centroid moves more than `epsilon` or `max_iterations` is reached.
pub fn run_kmeans(session: &Session, config: &KMeansConfig) -> Result<KMeansReport> {
    config.validate()?;
    if !session
        .manager()
        .pilots()
        .iter()
        .any(|p| matches!(p.state, PilotState::Running | PilotState::Pending))
    {
        return Err(Error::NoPilots);
    }
    let space = session.create_space(config.backend, space_estimate_mb(config))?;
    let report = run_in_space(session, config, &space.id);
    let _ = session.data().release_space(&space.id);
    report
}

fn run_in_space(session: &Session, c: &KMeansConfig, space: &str) -> Result<KMeansReport> {
    let row = |iteration: u32, phase: Phase, wall: Duration, bytes: u64| BenchRow {
        scenario: c.scenario(),
        backend: c.backend.to_string(),
        partitions: c.partitions,
        reducers: c.reducers,
        iteration,
        phase,
        wall_ms: wall_ms(wall),
        bytes_moved: bytes,
    };
    let mut results = BenchResult::default();
    let engine = session.engine(c.backend, vec![space.to_owned()])?;

    let start = Instant::now();
    let points = generate_points(c.n_points, c.n_dims, c.seed);
    let initial = points[..c.n_clusters * c.n_dims].to_vec();
    let du = session
        .data()
        .put_data_unit(AffinityLabels::none(), vec![("points".into(), encode_points(&points, c.n_dims))], space)?;
    drop(points);
    let imdu = engine.load(&du.id, c.partitions, Splitter::Tuples)?;
    results.push(row(0, Phase::Load, start.elapsed(), imdu.bytes()));

    let km = KMeans::new(&engine, imdu, c.n_dims, c.n_clusters, c.reducers);
    let mut centroids = initial.clone();
    let mut iterations = Vec::new();
    let mut converged = false;
    for i in 1..=c.max_iterations {
        let it = km.iterate(&centroids).map_err(|e| Error::InIteration {
            iteration: i,
            source: Box::new(e),
        })?;
        let s = &it.stats;
        results.push(row(i, Phase::Map, s.map.wall, s.map.bytes));
        results.push(row(i, Phase::Shuffle, s.shuffle.wall, s.shuffle.bytes));
        results.push(row(i, Phase::Reduce, s.reduce.wall, s.reduce.bytes));
        results.push(row(
            i,
            Phase::Total,
            it.wall,
            s.map.bytes + s.shuffle.bytes + s.reduce.bytes,
        ));
        log::debug!("kmeans iteration {i}: wcss={} shift={}", it.wcss, it.max_shift);
        centroids = it.centroids.clone();
        let done = it.max_shift <= c.epsilon;
        iterations.push(it);
        if done {
            converged = true;
            break;
        }
    }
    engine.dealloc(km.points())?;
    Ok(KMeansReport {
        config: c.clone(),
        initial,
        iterations,
        centroids,
        converged,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_bounds_name_the_field() {
        let mut c = KMeansConfig::new(1000, 0);
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("n_clusters"), "{msg}");
        c.n_clusters = 1001;
        assert!(c.validate().unwrap_err().to_string().contains("n_points (1000)"));
        c.n_clusters = 3;
        c.epsilon = f64::NAN;
        assert!(c.validate().is_err());
        c.epsilon = f64::INFINITY;
        c.validate().unwrap();
    }

    #[test]
    fn points_are_seeded_and_in_unit_cube() {
        let a = generate_points(100, 3, 7);
        assert_eq!(a, generate_points(100, 3, 7));
        assert_ne!(a, generate_points(100, 3, 8));
        assert!(a.iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn encodings_round_trip() {
        let c = vec![0.5, 1.5, -2.0, 3.25];
        assert_eq!(decode_centroids(&encode_centroids(&c, 2), 2).unwrap(), c);
        assert!(matches!(
            decode_centroids(&encode_centroids(&c, 2), 4),
            Err(Error::DimensionMismatch { expected: 4, found: 2 })
        ));
        let pts = encode_points(&c, 2);
        let t = decode_tuples(&pts).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(&t[1].0[..], 1u64.to_be_bytes());
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let p: Vec<u8> = [0.5f64, 0.0].iter().flat_map(|x| x.to_le_bytes()).collect();
        assert_eq!(nearest(&p, &[0.0, 0.0, 1.0, 0.0, 0.5, 0.0], 2), (2, 0.0));
        assert_eq!(nearest(&p, &[0.0, 0.0, 1.0, 0.0], 2).0, 0);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::local(dir.path(), 2).unwrap();
        let mut c = KMeansConfig::new(50, 1);
        c.partitions = 3;
        c.max_iterations = 1;
        let report = run_kmeans(&s, &c).unwrap();
        let pts = generate_points(50, 2, 0);
        for i in 0..2 {
            let mut sum = 0.0;
            for p in pts.chunks_exact(2) {
                sum += p[i];
            }
            assert_eq!(report.centroids[i], sum / 50.0);
        }
        assert_eq!(report.iterations[0].counts, [50]);
    }

    #[test]
    fn points_on_centroids_converge_at_once() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::local(dir.path(), 2).unwrap();
        let space = s.create_space(EngineBackend::Memory, 64).unwrap();
        let engine = s.engine(EngineBackend::Memory, vec![space.id.clone()]).unwrap();
        let centroids = vec![0.1, 0.2, 0.7, 0.9, 0.4, 0.4];
        let pts: Vec<f64> = centroids.iter().cycle().take(30).copied().collect();
        let du = s
            .data()
            .put_data_unit(AffinityLabels::none(), vec![("p".into(), encode_points(&pts, 2))], &space.id)
            .unwrap();
        let imdu = engine.load(&du.id, 2, Splitter::Tuples).unwrap();
        let km = KMeans::new(&engine, imdu, 2, 3, 2);
        let it = km.iterate(&centroids).unwrap();
        assert_eq!(it.wcss, 0.0);
        assert_eq!(it.max_shift, 0.0);
        assert_eq!(it.centroids, centroids);
        assert_eq!(it.counts, [5, 5, 5]);
        assert_eq!(km.assign(&centroids).unwrap(), (0..15).map(|i| i % 3).collect::<Vec<u32>>());
        assert!(matches!(km.iterate(&centroids[..4]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn infinite_epsilon_runs_once_and_empty_clusters_stay() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::local(dir.path(), 1).unwrap();
        let mut c = KMeansConfig::new(20, 20);
        c.epsilon = f64::INFINITY;
        c.max_iterations = 5;
        let report = run_kmeans(&s, &c).unwrap();
        assert_eq!(report.iterations.len(), 1);
        assert!(report.converged);
        // every point starts on its own centroid
        assert_eq!(report.centroids, report.initial);
        let rows = &report.results.rows;
        assert_eq!(rows.len(), 1 + 4);
        assert_eq!(rows[0].phase, Phase::Load);
    }

    #[test]
    fn no_pilots() {
        let dir = tempfile::tempdir().unwrap();
        let s = Session::new(dir.path(), super::super::SessionConfig::default());
        assert!(matches!(run_kmeans(&s, &KMeansConfig::new(10, 2)), Err(Error::NoPilots)));
    }
}
