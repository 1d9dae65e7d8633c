use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::agent::{run_task, TaskContext, TaskFn};
use super::Container;
use crate::error::{BootstrapPhase, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeKind {
    Hadoop,
    Spark,
}

impl RuntimeKind {
    fn port(self) -> u16 {
        match self {
            RuntimeKind::Hadoop => 8032,
            RuntimeKind::Spark => 7077,
        }
    }
}

impl fmt::Display for RuntimeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RuntimeKind::Hadoop => "hadoop",
            RuntimeKind::Spark => "spark",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterEndpoint {
    pub url: String,
    pub runtime: RuntimeKind,
    pub config_dir: PathBuf,
    pub workers: Vec<String>,
}

struct Job {
    task: TaskFn,
    ctx: TaskContext,
    reply: Sender<Result<()>>,
}

/// Emulated cluster runtime bootstrapped inside a pilot: a coordinator
/// thread dispatching typed units round-robin to worker threads, one per
/// core of every node.
pub(crate) struct ClusterRuntime {
    pub(crate) endpoint: ClusterEndpoint,
    tx: Mutex<Option<Sender<Job>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl ClusterRuntime {
    /// Generate the configuration directory and start coordinator and
    /// workers. `fault` makes the given phase fail.
    pub(crate) fn start(
        pilot_id: &str,
        runtime: RuntimeKind,
        nodes: &[Container],
        dir: &Path,
        fault: Option<BootstrapPhase>,
    ) -> Result<ClusterRuntime> {
        let fail = |phase: BootstrapPhase, detail: String| Error::BootstrapFailed { phase, detail };
        let url = format!("{runtime}://{pilot_id}.coordinator:{}", runtime.port());
        let workers: Vec<String> = nodes.iter().map(|c| c.node_label.clone()).collect();
        if fault == Some(BootstrapPhase::ConfigGen) {
            return Err(fail(BootstrapPhase::ConfigGen, "injected fault".into()));
        }
        write_config(dir, &url, runtime, nodes).map_err(|e| fail(BootstrapPhase::ConfigGen, e.to_string()))?;

        if fault == Some(BootstrapPhase::Coordinator) {
            return Err(fail(BootstrapPhase::Coordinator, "injected fault".into()));
        }
        let mut threads = Vec::new();
        let mut worker_txs = Vec::new();
        let (ready_tx, ready_rx) = mpsc::channel::<usize>();
        let last = nodes.len().saturating_sub(1);
        for (i, node) in nodes.iter().enumerate() {
            for slot in 0..node.cores.max(1) {
                let (tx, rx) = mpsc::channel::<Job>();
                let ready = ready_tx.clone();
                let broken = fault == Some(BootstrapPhase::Worker) && i == last;
                let h = thread::Builder::new()
                    .name(format!("{runtime}-worker-{}-{slot}", node.node_label))
                    .spawn(move || {
                        if broken {
                            return;
                        }
                        let _ = ready.send(i);
                        worker_loop(rx)
                    })
                    .map_err(|e| fail(BootstrapPhase::Worker, e.to_string()))?;
                threads.push(h);
                worker_txs.push(tx);
            }
        }
        drop(ready_tx);
        let mut up = 0;
        let expected = worker_txs.len();
        while up < expected {
            match ready_rx.recv_timeout(Duration::from_secs(5)) {
                Ok(_) => up += 1,
                Err(_) => {
                    drop(worker_txs);
                    for h in threads {
                        let _ = h.join();
                    }
                    return Err(fail(
                        BootstrapPhase::Worker,
                        format!("{up} of {expected} worker slots started"),
                    ));
                }
            }
        }
        let (tx, rx) = mpsc::channel::<Job>();
        let coordinator = thread::Builder::new()
            .name(format!("{runtime}-coordinator-{pilot_id}"))
            .spawn(move || coordinator_loop(rx, worker_txs))
            .map_err(|e| fail(BootstrapPhase::Coordinator, e.to_string()))?;
        threads.push(coordinator);
        Ok(ClusterRuntime {
            endpoint: ClusterEndpoint {
                url,
                runtime,
                config_dir: dir.to_owned(),
                workers,
            },
            tx: Mutex::new(Some(tx)),
            threads: Mutex::new(threads),
        })
    }

    /// Forward a typed unit to the coordinator and wait for its result.
    pub(crate) fn submit(&self, task: TaskFn, ctx: &TaskContext) -> Result<()> {
        let (reply, result) = mpsc::channel();
        let sent = match self.tx.lock().as_ref() {
            Some(tx) => tx.send(Job {
                task,
                ctx: ctx.clone(),
                reply,
            }),
            None => return Err(Error::Timeout(format!("{} is stopped", self.endpoint.url))),
        };
        if sent.is_err() {
            return Err(Error::Timeout(format!("{} is not reachable", self.endpoint.url)));
        }
        result
            .recv()
            .unwrap_or_else(|_| Err(Error::Timeout(format!("{} dropped the unit", self.endpoint.url))))
    }

    pub(crate) fn stop(&self) {
        self.tx.lock().take();
        let handles: Vec<_> = self.threads.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

fn write_config(dir: &Path, url: &str, runtime: RuntimeKind, nodes: &[Container]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("masters"),
        format!("runtime={runtime}\nendpoint={url}\nworkers={}\n", nodes.len()),
    )?;
    for c in nodes {
        fs::write(
            dir.join(format!("{}.conf", c.node_label)),
            format!(
                "hostname={}\nrole=worker\ncores={}\nmemory_mb={}\ncoordinator={url}\n",
                c.node_label, c.cores, c.memory_mb
            ),
        )?;
    }
    Ok(())
}

fn coordinator_loop(rx: Receiver<Job>, workers: Vec<Sender<Job>>) {
    let mut next = 0;
    for job in rx {
        if workers.is_empty() {
            let _ = job.reply.send(Err(Error::Timeout("cluster has no workers".into())));
            continue;
        }
        let _ = workers[next % workers.len()].send(job);
        next += 1;
    }
}

fn worker_loop(rx: Receiver<Job>) {
    for job in rx {
        let _ = job.reply.send(run_task(&job.task, &job.ctx));
    }
}
