//! Domain types shared by the optimizer, the runtime and the server:
//! cluster and ensemble specifications, allocation matrices and segments.
//!
//! An [`AllocationMatrix`] has one row per device and one column per model.
//! Each entry is the batch size of a worker (an instance of that model on that
//! device), with `0` meaning "no worker". A column with several nonzero
//! entries is a data-parallel model; a row with several nonzero entries is a
//! device shared by co-located workers.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch sizes used when a spec document does not declare a menu.
pub const DEFAULT_BATCH_MENU: [u32; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_SEGMENT_SIZE: usize = 128;
pub const DEFAULT_INPUT_WIDTH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceKind {
    #[serde(rename = "CPU", alias = "cpu")]
    Cpu,
    #[serde(rename = "GPU", alias = "gpu")]
    Gpu,
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceKind::Cpu => f.write_str("CPU"),
            DeviceKind::Gpu => f.write_str("GPU"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: usize,
    pub kind: DeviceKind,
    /// Capacity in MiB.
    #[serde(rename = "memory_mib")]
    pub memory_capacity: f64,
    /// Work units per second.
    pub compute_rate: f64,
    /// Fixed cost of dispatching one batch, in seconds.
    #[serde(rename = "batch_overhead_s", default)]
    pub batch_overhead: f64,
}

impl DeviceSpec {
    pub fn new(id: usize, kind: DeviceKind, memory_capacity: f64, compute_rate: f64, batch_overhead: f64) -> Self {
        Self {
            id,
            kind,
            memory_capacity,
            compute_rate,
            batch_overhead,
        }
    }

    /// Display label such as `CPU0` or `GPU3`.
    pub fn label(&self) -> String {
        format!("{}{}", self.kind, self.id)
    }

    fn check(&self) -> Result<()> {
        if !(self.memory_capacity > 0.0) {
            return Err(Error::InvalidSpec(format!("device {} memory must be > 0", self.id)));
        }
        if !(self.compute_rate > 0.0) {
            return Err(Error::InvalidSpec(format!("device {} compute_rate must be > 0", self.id)));
        }
        if !(self.batch_overhead >= 0.0) {
            return Err(Error::InvalidSpec(format!("device {} batch_overhead must be >= 0", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: usize,
    pub name: String,
    #[serde(rename = "weight_mib")]
    pub weight_memory: f64,
    #[serde(rename = "act_mib_per_sample", default)]
    pub activation_memory_per_sample: f64,
    pub cost_per_sample: f64,
    pub output_width: usize,
}

impl ModelSpec {
    pub fn new(
        id: usize,
        name: impl Into<String>,
        weight_memory: f64,
        activation_memory_per_sample: f64,
        cost_per_sample: f64,
        output_width: usize,
    ) -> Self {
        Self {
            id,
            name: name.into(),
            weight_memory,
            activation_memory_per_sample,
            cost_per_sample,
            output_width,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.weight_memory > 0.0) {
            return Err(Error::InvalidSpec(format!("model `{}` weight memory must be > 0", self.name)));
        }
        if !(self.activation_memory_per_sample >= 0.0) {
            return Err(Error::InvalidSpec(format!("model `{}` activation memory must be >= 0", self.name)));
        }
        if !(self.cost_per_sample > 0.0) {
            return Err(Error::InvalidSpec(format!("model `{}` cost per sample must be > 0", self.name)));
        }
        if self.output_width == 0 {
            return Err(Error::InvalidSpec(format!("model `{}` output width must be >= 1", self.name)));
        }
        Ok(())
    }
}

/// The hardware universe plus the ensemble being served.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub devices: Vec<DeviceSpec>,
    pub models: Vec<ModelSpec>,
    pub batch_menu: Vec<u32>,
    pub segment_size: usize,
    /// Width of one input feature vector.
    pub input_width: usize,
}

impl ClusterSpec {
    /// Builds a spec with the default menu, segment size and input width.
    pub fn new(devices: Vec<DeviceSpec>, models: Vec<ModelSpec>) -> Result<Self> {
        Self::with_settings(
            devices,
            models,
            DEFAULT_BATCH_MENU.to_vec(),
            DEFAULT_SEGMENT_SIZE,
            DEFAULT_INPUT_WIDTH,
        )
    }

    pub fn with_settings(
        devices: Vec<DeviceSpec>,
        models: Vec<ModelSpec>,
        batch_menu: Vec<u32>,
        segment_size: usize,
        input_width: usize,
    ) -> Result<Self> {
        let spec = Self {
            devices,
            models,
            batch_menu,
            segment_size,
            input_width,
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn check(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::InvalidSpec("at least one device is required".into()));
        }
        if self.models.is_empty() {
            return Err(Error::InvalidSpec("at least one model is required".into()));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.id != i {
                return Err(Error::InvalidSpec(format!("device at position {i} has id {}", d.id)));
            }
            d.check()?;
        }
        for (i, m) in self.models.iter().enumerate() {
            if m.id != i {
                return Err(Error::InvalidSpec(format!("model at position {i} has id {}", m.id)));
            }
            m.check()?;
        }
        if self.batch_menu.is_empty() {
            return Err(Error::InvalidSpec("batch menu is empty".into()));
        }
        if self.batch_menu[0] == 0 || self.batch_menu.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("batch menu must be strictly ascending and positive".into()));
        }
        if self.segment_size == 0 {
            return Err(Error::InvalidSpec("segment size must be >= 1".into()));
        }
        if self.input_width == 0 {
            return Err(Error::InvalidSpec("input width must be >= 1".into()));
        }
        if self.segment_size < self.max_batch() as usize {
            log::warn!(
                "segment size {} is smaller than the largest batch size {}",
                self.segment_size,
                self.max_batch()
            );
        }
        Ok(())
    }

    pub fn num_devices(&self) -> usize {
        self.devices.len()
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn min_batch(&self) -> u32 {
        self.batch_menu[0]
    }

    pub fn max_batch(&self) -> u32 {
        *self.batch_menu.last().expect("menu is nonempty")
    }

    pub fn in_menu(&self, batch: u32) -> bool {
        self.batch_menu.binary_search(&batch).is_ok()
    }

    pub fn devices_of(&self, kind: DeviceKind) -> impl Iterator<Item = &DeviceSpec> {
        self.devices.iter().filter(move |d| d.kind == kind)
    }

    /// Common output width of the ensemble, if all models agree.
    pub fn output_width(&self) -> Option<usize> {
        let c = self.models[0].output_width;
        self.models.iter().all(|m| m.output_width == c).then_some(c)
    }

    /// A copy of this spec with only the model `model`, re-indexed to id 0.
    pub fn single_model(&self, model: usize) -> ClusterSpec {
        let mut m = self.models[model].clone();
        m.id = 0;
        ClusterSpec {
            models: vec![m],
            ..self.clone()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        SpecDocument::from_json_str(s)?.into_cluster()
    }

    /// Loads a spec from one or more JSON documents; later documents fill in
    /// keys missing from earlier ones.
    pub fn load<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        let mut doc = SpecDocument::default();
        for p in paths {
            let text = std::fs::read_to_string(p.as_ref())?;
            doc = doc.merge(SpecDocument::from_json_str(&text)?);
        }
        doc.into_cluster()
    }

    pub fn to_document(&self) -> SpecDocument {
        SpecDocument {
            devices: Some(self.devices.clone()),
            models: Some(self.models.clone()),
            batch_menu: Some(self.batch_menu.clone()),
            segment_size: Some(self.segment_size),
            input_width: Some(self.input_width),
        }
    }
}

/// JSON form of a cluster and/or ensemble description. Cluster and ensemble
/// may live in separate files and are merged before use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<Vec<DeviceSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models: Option<Vec<ModelSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_menu: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_width: Option<usize>,
}

impl SpecDocument {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn merge(self, other: SpecDocument) -> SpecDocument {
        SpecDocument {
            devices: self.devices.or(other.devices),
            models: self.models.or(other.models),
            batch_menu: self.batch_menu.or(other.batch_menu),
            segment_size: self.segment_size.or(other.segment_size),
            input_width: self.input_width.or(other.input_width),
        }
    }

    pub fn into_cluster(self) -> Result<ClusterSpec> {
        ClusterSpec::with_settings(
            self.devices.ok_or_else(|| Error::InvalidSpec("missing `devices`".into()))?,
            self.models.ok_or_else(|| Error::InvalidSpec("missing `models`".into()))?,
            self.batch_menu.unwrap_or_else(|| DEFAULT_BATCH_MENU.to_vec()),
            self.segment_size.unwrap_or(DEFAULT_SEGMENT_SIZE),
            self.input_width.unwrap_or(DEFAULT_INPUT_WIDTH),
        )
    }
}

/// Devices × models grid of batch sizes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AllocationMatrix {
    devices: usize,
    models: usize,
    entries: Vec<u32>,
}

impl AllocationMatrix {
    pub fn zeros(devices: usize, models: usize) -> Self {
        Self {
            devices,
            models,
            entries: vec![0; devices * models],
        }
    }

    pub fn for_cluster(cluster: &ClusterSpec) -> Self {
        Self::zeros(cluster.num_devices(), cluster.num_models())
    }

    /// Builds a matrix from rows (one row per device).
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let devices = rows.len();
        let models = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != models) {
            return Err(Error::InvalidMatrix("ragged rows".into()));
        }
        Ok(Self {
            devices,
            models,
            entries: rows.concat(),
        })
    }

    pub fn num_devices(&self) -> usize {
        self.devices
    }

    pub fn num_models(&self) -> usize {
        self.models
    }

    #[inline]
    pub fn get(&self, device: usize, model: usize) -> u32 {
        self.entries[device * self.models + model]
    }

    #[inline]
    pub fn set(&mut self, device: usize, model: usize, batch: u32) {
        self.entries[device * self.models + model] = batch;
    }

    pub fn with(&self, device: usize, model: usize, batch: u32) -> Self {
        let mut next = self.clone();
        next.set(device, model, batch);
        next
    }

    pub fn row(&self, device: usize) -> &[u32] {
        &self.entries[device * self.models..(device + 1) * self.models]
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        (0..self.devices).map(|d| self.row(d).to_vec()).collect()
    }

    pub fn column(&self, model: usize) -> impl Iterator<Item = u32> + '_ {
        (0..self.devices).map(move |d| self.get(d, model))
    }

    /// Row-major `(device, model, batch)` for every worker.
    pub fn workers(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &b)| b > 0)
            .map(move |(i, &b)| (i / self.models, i % self.models, b))
    }

    pub fn worker_count(&self) -> usize {
        self.entries.iter().filter(|&&b| b > 0).count()
    }

    pub fn workers_on_device(&self, device: usize) -> usize {
        self.row(device).iter().filter(|&&b| b > 0).count()
    }

    pub fn workers_of_model(&self, model: usize) -> usize {
        self.column(model).filter(|&b| b > 0).count()
    }

    pub fn is_data_parallel(&self, model: usize) -> bool {
        self.workers_of_model(model) >= 2
    }

    pub fn is_colocated(&self, device: usize) -> bool {
        self.workers_on_device(device) >= 2
    }

    pub fn check_shape(&self, cluster: &ClusterSpec) -> Result<()> {
        if self.devices != cluster.num_devices() || self.models != cluster.num_models() {
            return Err(Error::Shape {
                got_devices: self.devices,
                got_models: self.models,
                want_devices: cluster.num_devices(),
                want_models: cluster.num_models(),
            });
        }
        Ok(())
    }

    pub fn to_document(&self, cluster: &ClusterSpec) -> MatrixDocument {
        MatrixDocument {
            devices: cluster.devices.iter().map(DeviceSpec::label).collect(),
            models: cluster.models.iter().map(|m| m.name.clone()).collect(),
            entries: self.rows(),
        }
    }

    pub fn from_document(doc: &MatrixDocument, cluster: &ClusterSpec) -> Result<Self> {
        let labels: Vec<String> = cluster.devices.iter().map(DeviceSpec::label).collect();
        if doc.devices != labels {
            return Err(Error::InvalidMatrix(format!(
                "device labels {:?} do not match cluster {:?}",
                doc.devices, labels
            )));
        }
        let names: Vec<&str> = cluster.models.iter().map(|m| m.name.as_str()).collect();
        if doc.models != names {
            return Err(Error::InvalidMatrix(format!(
                "model names {:?} do not match ensemble {:?}",
                doc.models, names
            )));
        }
        if doc.entries.len() != doc.devices.len() {
            return Err(Error::InvalidMatrix("one entry row per device is required".into()));
        }
        let matrix = Self::from_rows(&doc.entries)?;
        matrix.check_shape(cluster)?;
        Ok(matrix)
    }
}

impl Serialize for AllocationMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AllocationMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<u32>>::deserialize(deserializer)?;
        AllocationMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for AllocationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in 0..self.devices {
            let row: Vec<String> = self.row(d).iter().map(|b| format!("{b:>4}")).collect();
            writeln!(f, "[{}]", row.join(""))?;
        }
        Ok(())
    }
}

/// Serialized allocation matrix: labels plus a row-major grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixDocument {
    pub devices: Vec<String>,
    pub models: Vec<String>,
    pub entries: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    OffMenu { device: usize, model: usize, batch: u32 },
    EmptyColumn { model: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OffMenu { device, model, batch } => {
                write!(f, "cell ({device}, {model}) holds {batch}, not in the batch menu")
            }
            Violation::EmptyColumn { model } => write!(f, "model {model} has no worker"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let msg: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        Err(Error::InvalidMatrix(msg.join("; ")))
    }
}

/// Checks menu membership of every nonzero cell and that every model has a
/// worker. A shape mismatch is an error, not a violation.
pub fn validate_matrix(matrix: &AllocationMatrix, cluster: &ClusterSpec) -> Result<Validation> {
    matrix.check_shape(cluster)?;
    let mut violations = Vec::new();
    for (device, model, batch) in matrix.workers() {
        if !cluster.in_menu(batch) {
            violations.push(Violation::OffMenu { device, model, batch });
        }
    }
    for model in 0..matrix.num_models() {
        if matrix.workers_of_model(model) == 0 {
            violations.push(Violation::EmptyColumn { model });
        }
    }
    Ok(Validation { violations })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Segment {
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

pub fn segment_bounds(segment: usize, segment_size: usize, nb_samples: usize) -> Result<Segment> {
    let start = segment * segment_size;
    if segment_size == 0 || start >= nb_samples {
        return Err(Error::SegmentOutOfRange {
            segment,
            start,
            nb_samples,
        });
    }
    Ok(Segment {
        id: segment,
        start,
        end: ((segment + 1) * segment_size).min(nb_samples),
    })
}

pub fn num_segments(nb_samples: usize, segment_size: usize) -> usize {
    nb_samples.div_ceil(segment_size)
}
