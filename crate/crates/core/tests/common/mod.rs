#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

/// One Lloyd step computed serially from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydStep {
    pub assignments: Vec<u32>,
    pub centroids: Vec<f64>,
    pub counts: Vec<u64>,
    pub wcss: f64,
}

/// Assign every point to its nearest centroid (first index on ties), then
/// move each non-empty centroid to the mean of its points.
pub fn lloyd_step(points: &[f64], dims: usize, centroids: &[f64]) -> LloydStep {
    let k = centroids.len() / dims;
    let mut assignments = Vec::with_capacity(points.len() / dims);
    let mut sums = vec![0.0; k * dims];
    let mut counts = vec![0u64; k];
    let mut cluster_cost = vec![0.0; k];
    for p in points.chunks(dims) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let c = &centroids[j * dims..(j + 1) * dims];
            let mut d = 0.0;
            for i in 0..dims {
                d += (p[i] - c[i]) * (p[i] - c[i]);
            }
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        assignments.push(best as u32);
        counts[best] += 1;
        cluster_cost[best] += best_d;
        for i in 0..dims {
            sums[best * dims + i] += p[i];
        }
    }
    let mut next = centroids.to_vec();
    for j in 0..k {
        if counts[j] > 0 {
            for i in 0..dims {
                next[j * dims + i] = sums[j * dims + i] / counts[j] as f64;
            }
        }
    }
    LloydStep {
        assignments,
        centroids: next,
        counts,
        wcss: cluster_cost.iter().sum(),
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Serial word count over whitespace-separated words.
pub fn word_count<'a>(lines: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for line in lines {
        for w in line.split_whitespace() {
            *out.entry(w.to_owned()).or_insert(0) += 1;
        }
    }
    out
}

pub fn text_corpus(seed: u64, lines: usize) -> String {
    use rand::{Rng, SeedableRng};
    let words = ["pilot", "unit", "data", "space", "shuffle", "map", "reduce", "yarn", "batch", "agent", "tier"];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::new();
    for _ in 0..lines {
        let n = rng.gen_range(0..12);
        let line: Vec<&str> = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// Whitespace word splitter and summing reducer for the engine.
pub fn word_count_fns() -> (
    std::sync::Arc<dyn pilotkit::engine::MapFn>,
    std::sync::Arc<dyn pilotkit::engine::ReduceFn>,
) {
    use pilotkit::engine::{map_fn, reduce_fn};
    let map = map_fn(|_env, _k, v, out| {
        for w in std::str::from_utf8(v).unwrap_or_default().split_whitespace() {
            out.emit(w.as_bytes(), &1u64.to_le_bytes());
        }
        Ok(())
    });
    let reduce = reduce_fn(|_env, k, vs, out| {
        let n: u64 = vs.iter().map(|v| u64::from_le_bytes((*v).try_into().unwrap())).sum();
        out.emit(k, &n.to_le_bytes());
        Ok(())
    });
    (std::sync::Arc::new(map), std::sync::Arc::new(reduce))
}

/// Replay of registry state from the event log.
#[derive(Debug, Default)]
pub struct SpaceReplay {
    pub alive: HashMap<String, (Option<String>, Option<String>)>,
    pub replicas: HashMap<String, Vec<String>>,
}

/// Parse `dc/machine` as printed by the log, `-` meaning absent.
pub fn parse_labels(s: &str) -> (Option<String>, Option<String>) {
    let (dc, m) = s.split_once('/').unwrap_or(("-", "-"));
    let f = |x: &str| (x != "-").then(|| x.to_owned());
    (f(dc), f(m))
}
