//! Declarative workload files.
//!
//! A workload is a TOML document:
//!
//! ```toml
//! spec_version = 1
//! mode = "hard"                # or "soft" (default)
//!
//! [[clusters]]                 # emulated clusters, optional
//! kind = "yarn-emu"            # or "batch-emu"
//! config = { n_nodes = 4, cores_per_node = 4, memory_per_node_mb = 8192 }
//!
//! [[pilot_compute]]
//! resource_url = "local://"
//! cores = 4
//! memory_mb = 1024
//! walltime_min = 60
//!
//! [[pilot_data]]
//! name = "scratch"
//! storage_url = "mem://"
//! space_mb = 256
//!
//! [[data_units]]
//! name = "input"
//! space = "scratch"
//! item_refs = [{ source_url = "file:///data/a.txt", logical_name = "a.txt" }]
//!
//! [[units]]
//! name = "count"
//! [units.description]
//! kind = "executable"
//! executable = "/usr/bin/wc"
//! arguments = ["-l", "a.txt"]
//! input_du_ids = ["input"]     # data unit names from this file
//!
//! [[jobs]]
//! kind = "kmeans"
//! n_points = 10000
//! n_clusters = 50
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::kmeans::{run_kmeans, KMeansConfig, KMeansReport};
use super::results::BenchResult;
use super::{Session, SessionConfig};
use crate::compute::ClusterConfig;
use crate::error::{Error, Result};
use crate::manager::AffinityMode;
use crate::pilot::{
    BackendKind, ComputeUnitDescription, DataUnitDescription, PilotComputeDescription, PilotDataDescription,
    PilotState, UnitState, Validate,
};

pub const SPEC_VERSION: u32 = 1;

fn default_unit_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub spec_version: u32,
    #[serde(default)]
    pub mode: AffinityMode,
    /// Seconds to wait for all units.
    #[serde(default = "default_unit_timeout")]
    pub unit_timeout_s: u64,
    #[serde(default)]
    pub clusters: Vec<ClusterSpec>,
    #[serde(default)]
    pub pilot_compute: Vec<PilotComputeDescription>,
    #[serde(default)]
    pub pilot_data: Vec<PilotDataSpec>,
    #[serde(default)]
    pub data_units: Vec<DataUnitSpec>,
    #[serde(default)]
    pub units: Vec<UnitSpec>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    /// `batch-emu` or `yarn-emu`.
    pub kind: String,
    pub config: ClusterConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotDataSpec {
    pub name: String,
    pub storage_url: String,
    pub space_mb: u64,
    #[serde(default)]
    pub affinity_datacenter_label: Option<String>,
    #[serde(default)]
    pub affinity_machine_label: Option<String>,
}

impl PilotDataSpec {
    fn description(&self) -> PilotDataDescription {
        PilotDataDescription {
            storage_url: self.storage_url.clone(),
            space_mb: self.space_mb,
            affinity_datacenter_label: self.affinity_datacenter_label.clone(),
            affinity_machine_label: self.affinity_machine_label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataUnitSpec {
    pub name: String,
    /// Name of the `pilot_data` entry the unit is imported into.
    pub space: String,
    #[serde(default)]
    pub item_refs: Vec<crate::pilot::DataItemRef>,
    #[serde(default)]
    pub affinity_datacenter_label: Option<String>,
    #[serde(default)]
    pub affinity_machine_label: Option<String>,
}

impl DataUnitSpec {
    fn description(&self) -> DataUnitDescription {
        DataUnitDescription {
            item_refs: self.item_refs.clone(),
            affinity_datacenter_label: self.affinity_datacenter_label.clone(),
            affinity_machine_label: self.affinity_machine_label.clone(),
        }
    }
}

/// A compute unit; `input_du_ids` and `output_du_ids` of the description
/// hold data unit names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitSpec {
    pub name: String,
    pub description: ComputeUnitDescription,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobSpec {
    Kmeans(KMeansConfig),
}

fn cluster_kind(kind: &str) -> Result<BackendKind> {
    match BackendKind::from_scheme(kind) {
        Some(k @ (BackendKind::BatchEmu | BackendKind::YarnEmu)) => Ok(k),
        _ => Err(Error::UnknownBackend(kind.to_owned())),
    }
}

fn unique<'a>(what: &str, names: impl IntoIterator<Item = &'a str>) -> Result<HashSet<&'a str>> {
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() {
            return Err(Error::Spec(format!("{what} name must be non-empty")));
        }
        if !seen.insert(n) {
            return Err(Error::Spec(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(seen)
}

impl WorkloadSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec(e.message().to_owned()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Spec(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Spec(e.to_string()))
    }

    /// Check version, descriptions and that every name reference resolves.
    pub fn validate(&self) -> Result<()> {
        if self.spec_version != SPEC_VERSION {
            return Err(Error::Spec(format!(
                "unsupported spec_version {} (expected {SPEC_VERSION})",
                self.spec_version
            )));
        }
        for c in &self.clusters {
            cluster_kind(&c.kind)?;
            c.config.validate()?;
        }
        for p in &self.pilot_compute {
            let valid = p.clone().validate()?;
            let scheme = valid.resource_url.split("://").next().unwrap_or_default();
            let needs = BackendKind::from_scheme(scheme);
            if matches!(needs, Some(BackendKind::BatchEmu | BackendKind::YarnEmu))
                && !self.clusters.iter().any(|c| Some(c.kind.as_str()) == needs.map(BackendKind::scheme))
            {
                return Err(Error::Spec(format!("{} has no matching cluster", p.resource_url)));
            }
        }
        let spaces = unique("pilot_data", self.pilot_data.iter().map(|p| p.name.as_str()))?;
        for p in &self.pilot_data {
            p.description().validate()?;
        }
        let dus = unique("data unit", self.data_units.iter().map(|d| d.name.as_str()))?;
        for d in &self.data_units {
            if !spaces.contains(d.space.as_str()) {
                return Err(Error::Spec(format!("data unit {:?} names unknown space {:?}", d.name, d.space)));
            }
            d.description().validate()?;
        }
        unique("unit", self.units.iter().map(|u| u.name.as_str()))?;
        for u in &self.units {
            for du in u.description.input_du_ids.iter().chain(&u.description.output_du_ids) {
                if !dus.contains(du.as_str()) {
                    return Err(Error::Spec(format!("unit {:?} names unknown data unit {du:?}", u.name)));
                }
            }
            u.description.clone().validate()?;
        }
        for job in &self.jobs {
            match job {
                JobSpec::Kmeans(c) => c.validate()?,
            }
        }
        if (!self.units.is_empty() || !self.jobs.is_empty()) && self.pilot_compute.is_empty() {
            return Err(Error::Spec("units or jobs need at least one pilot_compute entry".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct WorkloadReport {
    pub pilots: Vec<String>,
    /// Data unit name to id.
    pub data_units: BTreeMap<String, String>,
    /// Unit name, id and final state.
    pub units: Vec<(String, String, UnitState)>,
    pub kmeans: Vec<KMeansReport>,
    pub results: BenchResult,
}

impl WorkloadReport {
    pub fn all_units_done(&self) -> bool {
        self.units.iter().all(|(_, _, s)| *s == UnitState::Done)
    }
}

/// Validate and execute `spec` in a fresh session rooted at `root`.
pub fn run_workload(root: &Path, spec: &WorkloadSpec) -> Result<WorkloadReport> {
    spec.validate()?;
    let session = Session::new(
        root,
        SessionConfig {
            mode: spec.mode,
            ..SessionConfig::default()
        },
    );
    let result = execute(&session, spec);
    session.compute().shutdown();
    result
}

fn execute(session: &Session, spec: &WorkloadSpec) -> Result<WorkloadReport> {
    let compute = session.compute();
    for c in &spec.clusters {
        compute.add_cluster(cluster_kind(&c.kind)?, c.config.clone())?;
    }
    if !spec.clusters.is_empty() {
        compute.start_clock();
    }
    let mut pilots = Vec::new();
    for p in &spec.pilot_compute {
        pilots.push(compute.create_pilot(p.clone())?);
    }
    for id in &pilots {
        let state = compute.wait_running(id, Duration::from_secs(60))?;
        if state != PilotState::Running {
            log::warn!("pilot {id} ended {state} before running");
        }
    }

    let mut spaces = BTreeMap::new();
    for p in &spec.pilot_data {
        spaces.insert(p.name.as_str(), session.data().create_pilot_data(&p.description())?.id);
    }
    let mut data_units = BTreeMap::new();
    for d in &spec.data_units {
        let du = session.data().import_data_unit(&d.description(), &spaces[d.space.as_str()])?;
        data_units.insert(d.name.clone(), du.id);
    }

    let resolve = |names: &[String]| names.iter().map(|n| data_units[n].clone()).collect::<Vec<_>>();
    let manager = session.manager();
    let mut ids = Vec::new();
    for u in &spec.units {
        let mut cud = u.description.clone();
        cud.input_du_ids = resolve(&cud.input_du_ids);
        cud.output_du_ids = resolve(&cud.output_du_ids);
        ids.push(manager.submit_compute_unit(cud)?);
    }
    let states = manager.wait_units(&ids, Duration::from_secs(spec.unit_timeout_s))?;
    let units = spec
        .units
        .iter()
        .zip(ids)
        .zip(states)
        .map(|((u, id), s)| (u.name.clone(), id, s))
        .collect();

    let mut kmeans = Vec::new();
    let mut results = BenchResult::default();
    for job in &spec.jobs {
        match job {
            JobSpec::Kmeans(c) => {
                let report = run_kmeans(session, c)?;
                results.extend(report.results.clone());
                kmeans.push(report);
            }
        }
    }
    Ok(WorkloadReport {
        pilots,
        data_units,
        units,
        kmeans,
        results,
    })
}
