use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{AffinityLabels, BackendKind, Locator};
use crate::error::{Error, FieldError, Result};

pub const DEFAULT_QUEUE: &str = "default";

/// Normalizing validation. `validate` is idempotent: validating an already
/// validated description returns it unchanged.
pub trait Validate: Sized {
    fn validate(self) -> Result<Self>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotComputeDescription {
    pub resource_url: String,
    pub cores: u32,
    pub memory_mb: u64,
    pub walltime_min: u32,
    #[serde(default)]
    pub queue_name: Option<String>,
    #[serde(default)]
    pub affinity_datacenter_label: Option<String>,
    #[serde(default)]
    pub affinity_machine_label: Option<String>,
}

impl PilotComputeDescription {
    pub fn new(resource_url: impl Into<String>, cores: u32, memory_mb: u64, walltime_min: u32) -> Self {
        Self {
            resource_url: resource_url.into(),
            cores,
            memory_mb,
            walltime_min,
            queue_name: None,
            affinity_datacenter_label: None,
            affinity_machine_label: None,
        }
    }

    pub fn with_labels(mut self, labels: &AffinityLabels) -> Self {
        self.affinity_datacenter_label = labels.datacenter.clone();
        self.affinity_machine_label = labels.machine.clone();
        self
    }

    pub fn labels(&self) -> AffinityLabels {
        AffinityLabels {
            datacenter: self.affinity_datacenter_label.clone(),
            machine: self.affinity_machine_label.clone(),
        }
    }

    pub fn locator(&self) -> Result<Locator> {
        Locator::parse(&self.resource_url)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotDataDescription {
    pub storage_url: String,
    pub space_mb: u64,
    #[serde(default)]
    pub affinity_datacenter_label: Option<String>,
    #[serde(default)]
    pub affinity_machine_label: Option<String>,
}

impl PilotDataDescription {
    pub fn new(storage_url: impl Into<String>, space_mb: u64) -> Self {
        Self {
            storage_url: storage_url.into(),
            space_mb,
            affinity_datacenter_label: None,
            affinity_machine_label: None,
        }
    }

    pub fn with_labels(mut self, labels: &AffinityLabels) -> Self {
        self.affinity_datacenter_label = labels.datacenter.clone();
        self.affinity_machine_label = labels.machine.clone();
        self
    }

    pub fn labels(&self) -> AffinityLabels {
        AffinityLabels {
            datacenter: self.affinity_datacenter_label.clone(),
            machine: self.affinity_machine_label.clone(),
        }
    }

    pub fn locator(&self) -> Result<Locator> {
        Locator::parse(&self.storage_url)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Executable,
    MapTask,
    ReduceTask,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeUnitDescription {
    pub kind: UnitKind,
    #[serde(default)]
    pub executable: String,
    #[serde(default)]
    pub arguments: Vec<String>,
    /// Reference to a registered task payload; required for map/reduce tasks.
    #[serde(default)]
    pub task: Option<String>,
    #[serde(default = "one")]
    pub cores: u32,
    #[serde(default)]
    pub input_du_ids: Vec<String>,
    #[serde(default)]
    pub output_du_ids: Vec<String>,
    #[serde(default)]
    pub affinity_datacenter_label: Option<String>,
    #[serde(default)]
    pub affinity_machine_label: Option<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn one() -> u32 {
    1
}

impl ComputeUnitDescription {
    pub fn executable(path: impl Into<String>, arguments: &[&str]) -> Self {
        Self {
            kind: UnitKind::Executable,
            executable: path.into(),
            arguments: arguments.iter().map(|s| s.to_string()).collect(),
            task: None,
            cores: 1,
            input_du_ids: Vec::new(),
            output_du_ids: Vec::new(),
            affinity_datacenter_label: None,
            affinity_machine_label: None,
            env: BTreeMap::new(),
        }
    }

    pub fn task(kind: UnitKind, payload: impl Into<String>) -> Self {
        Self {
            kind,
            executable: String::new(),
            task: Some(payload.into()),
            ..Self::executable("", &[])
        }
    }

    pub fn with_cores(mut self, cores: u32) -> Self {
        self.cores = cores;
        self
    }

    pub fn with_labels(mut self, labels: &AffinityLabels) -> Self {
        self.affinity_datacenter_label = labels.datacenter.clone();
        self.affinity_machine_label = labels.machine.clone();
        self
    }

    pub fn with_inputs(mut self, ids: &[&str]) -> Self {
        self.input_du_ids = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn labels(&self) -> AffinityLabels {
        AffinityLabels {
            datacenter: self.affinity_datacenter_label.clone(),
            machine: self.affinity_machine_label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataItemRef {
    pub source_url: String,
    pub logical_name: String,
    #[serde(default)]
    pub size_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataUnitDescription {
    #[serde(default)]
    pub item_refs: Vec<DataItemRef>,
    #[serde(default)]
    pub affinity_datacenter_label: Option<String>,
    #[serde(default)]
    pub affinity_machine_label: Option<String>,
}

impl DataUnitDescription {
    pub fn new(items: Vec<DataItemRef>) -> Self {
        Self {
            item_refs: items,
            ..Default::default()
        }
    }

    pub fn labels(&self) -> AffinityLabels {
        AffinityLabels {
            datacenter: self.affinity_datacenter_label.clone(),
            machine: self.affinity_machine_label.clone(),
        }
    }
}

fn check_label(errors: &mut Vec<FieldError>, field: &'static str, label: &Option<String>) {
    if let Some(l) = label {
        if l.is_empty() || l.chars().any(char::is_whitespace) {
            errors.push(FieldError::new(field, "label must be non-empty without whitespace"));
        }
    }
}

/// Field errors plus the locator outcome. An unparseable URL on its own
/// surfaces as `UnknownBackend`; together with other violations it is listed
/// among them.
fn finish<T>(
    value: T,
    mut errors: Vec<FieldError>,
    url_field: &'static str,
    url: &str,
    accept: impl Fn(BackendKind) -> bool,
    role: &str,
) -> Result<T> {
    match Locator::parse(url) {
        Ok(loc) if !accept(loc.kind) => {
            errors.push(FieldError::new(url_field, format!("{} is not a {role} backend", loc.kind)));
        }
        Ok(_) => {}
        Err(e) => {
            if errors.is_empty() {
                return Err(e);
            }
            errors.push(FieldError::new(url_field, format!("unknown backend in {url:?}")));
        }
    }
    if errors.is_empty() {
        Ok(value)
    } else {
        Err(Error::Validation(errors))
    }
}

impl Validate for PilotComputeDescription {
    fn validate(mut self) -> Result<Self> {
        let mut errors = Vec::new();
        if self.cores < 1 {
            errors.push(FieldError::new("cores", "cores must be ≥ 1"));
        }
        if self.memory_mb < 1 {
            errors.push(FieldError::new("memory_mb", "memory_mb must be ≥ 1"));
        }
        if self.walltime_min < 1 {
            errors.push(FieldError::new("walltime_min", "walltime_min must be ≥ 1"));
        }
        match &self.queue_name {
            None => self.queue_name = Some(DEFAULT_QUEUE.to_owned()),
            Some(q) if q.is_empty() => {
                errors.push(FieldError::new("queue_name", "queue_name must be non-empty"))
            }
            Some(_) => {}
        }
        check_label(&mut errors, "affinity_datacenter_label", &self.affinity_datacenter_label);
        check_label(&mut errors, "affinity_machine_label", &self.affinity_machine_label);
        let url = self.resource_url.clone();
        finish(self, errors, "resource_url", &url, BackendKind::is_compute, "compute")
    }
}

impl Validate for PilotDataDescription {
    fn validate(self) -> Result<Self> {
        let mut errors = Vec::new();
        if self.space_mb < 1 {
            errors.push(FieldError::new("space_mb", "space_mb must be ≥ 1"));
        }
        check_label(&mut errors, "affinity_datacenter_label", &self.affinity_datacenter_label);
        check_label(&mut errors, "affinity_machine_label", &self.affinity_machine_label);
        let url = self.storage_url.clone();
        finish(self, errors, "storage_url", &url, BackendKind::is_storage, "storage")
    }
}

impl Validate for ComputeUnitDescription {
    fn validate(self) -> Result<Self> {
        let mut errors = Vec::new();
        if self.cores < 1 {
            errors.push(FieldError::new("cores", "cores must be ≥ 1"));
        }
        match self.kind {
            UnitKind::Executable if self.executable.is_empty() => errors.push(FieldError::new(
                "executable",
                "executable units need a non-empty executable",
            )),
            UnitKind::MapTask | UnitKind::ReduceTask
                if self.task.as_deref().map_or(true, str::is_empty) =>
            {
                errors.push(FieldError::new("task", "map/reduce units need a task payload reference"))
            }
            _ => {}
        }
        check_label(&mut errors, "affinity_datacenter_label", &self.affinity_datacenter_label);
        check_label(&mut errors, "affinity_machine_label", &self.affinity_machine_label);
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(errors))
        }
    }
}

impl Validate for DataUnitDescription {
    fn validate(self) -> Result<Self> {
        let mut errors = Vec::new();
        let mut seen = HashSet::new();
        for item in &self.item_refs {
            let name = item.logical_name.as_str();
            if name.is_empty() || name == "." || name == ".." || name.contains(['/', '\\']) {
                errors.push(FieldError::new(
                    "logical_name",
                    format!("{name:?} is not a valid logical name"),
                ));
            } else if !seen.insert(name) {
                errors.push(FieldError::new("logical_name", format!("duplicate logical name {name:?}")));
            }
            if item.source_url.is_empty() {
                errors.push(FieldError::new("source_url", format!("{name:?} has no source")));
            }
        }
        check_label(&mut errors, "affinity_datacenter_label", &self.affinity_datacenter_label);
        check_label(&mut errors, "affinity_machine_label", &self.affinity_machine_label);
        if errors.is_empty() {
            Ok(self)
        } else {
            Err(Error::Validation(errors))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fields(err: Error) -> Vec<&'static str> {
        match err {
            Error::Validation(v) => v.into_iter().map(|f| f.field).collect(),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn defaults_queue_name() {
        let pcd = PilotComputeDescription::new("local://localhost", 4, 1024, 10)
            .validate()
            .unwrap();
        assert_eq!(pcd.queue_name.as_deref(), Some("default"));
    }

    #[test]
    fn zero_cores_rejected() {
        let err = PilotComputeDescription::new("local://localhost", 0, 1024, 10)
            .validate()
            .unwrap_err();
        assert!(err.to_string().contains("cores must be ≥ 1"), "{err}");
    }

    #[test]
    fn every_violation_listed() {
        let err = PilotComputeDescription::new("local://x", 0, 0, 0).validate().unwrap_err();
        assert_eq!(fields(err), ["cores", "memory_mb", "walltime_min"]);
        let err = PilotComputeDescription::new("nope://x", 0, 1, 1).validate().unwrap_err();
        assert_eq!(fields(err), ["cores", "resource_url"]);
    }

    #[test]
    fn backend_kind_checked_at_validation() {
        let ok = PilotComputeDescription::new("yarn-emu://clusterA", 8, 2048, 30)
            .validate()
            .unwrap();
        assert_eq!(ok.locator().unwrap().kind, BackendKind::YarnEmu);
        assert!(matches!(
            PilotComputeDescription::new("slurm://x", 1, 1, 1).validate(),
            Err(Error::UnknownBackend(_))
        ));
        assert_eq!(
            fields(PilotComputeDescription::new("mem://x", 1, 1, 1).validate().unwrap_err()),
            ["resource_url"]
        );
        assert_eq!(
            fields(PilotDataDescription::new("local://x", 1).validate().unwrap_err()),
            ["storage_url"]
        );
        assert!(PilotDataDescription::new("mem://", 64).validate().is_ok());
    }

    #[test]
    fn unit_payload_rules() {
        assert!(ComputeUnitDescription::executable("/bin/echo", &["hi"]).validate().is_ok());
        assert_eq!(
            fields(ComputeUnitDescription::executable("", &[]).validate().unwrap_err()),
            ["executable"]
        );
        assert!(ComputeUnitDescription::task(UnitKind::MapTask, "job/map/0").validate().is_ok());
        let mut cud = ComputeUnitDescription::task(UnitKind::ReduceTask, "x");
        cud.task = None;
        cud.cores = 0;
        assert_eq!(fields(cud.validate().unwrap_err()), ["cores", "task"]);
    }

    #[test]
    fn data_unit_names_unique() {
        let item = |n: &str| DataItemRef {
            source_url: "file:///x".into(),
            logical_name: n.into(),
            size_bytes: 0,
        };
        assert!(DataUnitDescription::new(vec![item("a"), item("b")]).validate().is_ok());
        assert!(DataUnitDescription::new(vec![]).validate().is_ok());
        assert_eq!(
            fields(DataUnitDescription::new(vec![item("a"), item("a"), item("../x")]).validate().unwrap_err()),
            ["logical_name", "logical_name"]
        );
    }

    fn arb_pcd() -> impl Strategy<Value = PilotComputeDescription> {
        (
            prop::sample::select(vec!["local://h", "batch-emu://c", "yarn-emu://c", "file://x", "zz://q"]),
            0u32..4,
            0u64..4,
            0u32..4,
            prop::option::of(prop::sample::select(vec!["", "q1"])),
            prop::option::of(prop::sample::select(vec!["", "m 1", "m1"])),
        )
            .prop_map(|(url, cores, mem, wall, queue, machine)| {
                let mut pcd = PilotComputeDescription::new(url, cores, mem, wall);
                pcd.queue_name = queue.map(str::to_owned);
                pcd.affinity_machine_label = machine.map(str::to_owned);
                pcd
            })
    }

    proptest! {
        #[test]
        fn validate_is_idempotent(pcd in arb_pcd()) {
            if let Ok(once) = pcd.validate() {
                prop_assert_eq!(once.clone().validate().unwrap(), once);
            }
        }
    }
}
