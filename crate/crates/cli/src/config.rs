//! TOML run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use servesim::capacity::DEFAULT_BATCH_CAP;
use servesim::engine::{EngineConfig, Request, SchedulerRegistry};
use servesim::hardware::{DeviceSpec, ParallelSpec};
use servesim::model_catalog::{ModelCatalog, ModelSpec};
use servesim::sweep::DEFAULT_SATURATION_EPSILON;
use servesim::workload::{self, ArrivalRate, WorkloadSpec};

use crate::CliError;

pub const DEFAULT_DEVICE: &str = "a100-40gb";
pub const DEFAULT_PARALLEL: &str = "single";
pub const OUTPUT_DIR_ENV: &str = "SERVESIM_OUTPUT_DIR";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    /// Model under study for simulate, sweep and replicate.
    pub model: Option<String>,
    #[serde(default = "default_device")]
    pub device: String,
    #[serde(default = "default_parallel")]
    pub parallel: String,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceSpec>,
    #[serde(default)]
    pub parallels: BTreeMap<String, ParallelSpec>,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub replication: ReplicationSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_device() -> String {
    DEFAULT_DEVICE.into()
}

fn default_parallel() -> String {
    DEFAULT_PARALLEL.into()
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum RateValue {
    Number(f64),
    Word(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub n_requests: Option<u64>,
    pub input_len: Option<u64>,
    pub output_len: Option<u64>,
    /// Requests per second, or `"inf"` for a closed-loop burst at t = 0.
    pub arrival_rate: Option<RateValue>,
    pub seed: Option<u64>,
    /// Length-only CSV trace; excludes the synthetic fields above.
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    /// Defaults to every catalog entry.
    pub models: Option<Vec<String>>,
    pub tp_degrees: Vec<u64>,
    pub replicas: Vec<u64>,
    pub cap: u64,
    /// Defaults to the workload's input + output length.
    pub seq_len: Option<u64>,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            models: None,
            tp_degrees: vec![1],
            replicas: vec![1],
            cap: DEFAULT_BATCH_CAP,
            seq_len: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Defaults to powers of two up to the capacity plan's batch.
    pub caps: Option<Vec<u64>>,
    /// Defaults to the selected parallel profile's degree.
    pub tp_degrees: Option<Vec<u64>>,
    pub epsilon: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            caps: None,
            tp_degrees: None,
            epsilon: DEFAULT_SATURATION_EPSILON,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicationSection {
    pub r_max: u64,
    /// If set, replaces the device's host_overhead with the value that makes
    /// the host phase this share of a single-replica iteration.
    pub host_overhead_fraction: Option<f64>,
}

impl Default for ReplicationSection {
    fn default() -> Self {
        Self {
            r_max: 4,
            host_overhead_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: vec![Format::Csv, Format::Json],
        }
    }
}

/// Where requests come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Synthetic(WorkloadSpec),
    Trace(PathBuf),
}

/// Validated configuration with profiles and catalog resolved.
#[derive(Debug, Clone)]
pub struct Config {
    pub path: PathBuf,
    pub catalog: ModelCatalog,
    pub warnings: Vec<String>,
    pub model: Option<ModelSpec>,
    pub device: DeviceSpec,
    pub parallel: ParallelSpec,
    pub workload: WorkloadSource,
    pub engine: EngineConfig,
    pub plan: PlanSection,
    pub sweep: SweepSection,
    pub replication: ReplicationSection,
    pub output: OutputSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(path, format!("cannot read: {e}")))?;
        Self::parse(&text, path)
    }

    /// Parses `text`; relative trace paths resolve against `path`'s directory.
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let err = |msg: String| CliError::config(path, msg);
        let raw: RawConfig = toml::from_str(text).map_err(|e| err(e.to_string()))?;

        let mut catalog = ModelCatalog::new();
        let mut warnings = Vec::new();
        for m in raw.models {
            warnings.extend(catalog.insert(m).map_err(|e| err(e.to_string()))?);
        }
        let model = raw
            .model
            .as_deref()
            .map(|name| catalog.resolve(name).cloned())
            .transpose()
            .map_err(|e| err(e.to_string()))?;

        let mut devices = BTreeMap::from([(DEFAULT_DEVICE.to_string(), DeviceSpec::a100_40gb())]);
        devices.extend(raw.devices);
        let device = devices
            .get(&raw.device)
            .cloned()
            .ok_or_else(|| err(format!("unknown device profile {:?}", raw.device)))?;
        device.validate().map_err(|e| err(format!("device {:?}: {e}", raw.device)))?;

        let mut parallels = BTreeMap::from([(DEFAULT_PARALLEL.to_string(), ParallelSpec::single())]);
        parallels.extend(raw.parallels);
        let parallel = parallels
            .get(&raw.parallel)
            .cloned()
            .ok_or_else(|| err(format!("unknown parallel profile {:?}", raw.parallel)))?;
        parallel.validate().map_err(|e| err(format!("parallel {:?}: {e}", raw.parallel)))?;

        let workload = resolve_workload(raw.workload, path).map_err(err)?;

        raw.engine.validate().map_err(|e| err(e.to_string()))?;
        if !SchedulerRegistry::default().contains(&raw.engine.mode) {
            return Err(err(format!("unknown engine.mode {:?}", raw.engine.mode)));
        }

        if let Some(names) = &raw.plan.models {
            for name in names {
                catalog.resolve(name).map_err(|e| err(format!("plan.models: {e}")))?;
            }
        }
        if raw.plan.tp_degrees.contains(&0) || raw.plan.replicas.contains(&0) || raw.plan.cap == 0 {
            return Err(err("plan.tp_degrees, plan.replicas and plan.cap must be positive".into()));
        }
        if raw.plan.seq_len == Some(0) {
            return Err(err("plan.seq_len must be positive".into()));
        }
        if raw.sweep.caps.as_ref().is_some_and(|c| c.is_empty() || c.contains(&0)) {
            return Err(err("sweep.caps must be a nonempty list of positive counts".into()));
        }
        if raw.sweep.tp_degrees.as_ref().is_some_and(|d| d.is_empty() || d.contains(&0)) {
            return Err(err("sweep.tp_degrees must be a nonempty list of positive counts".into()));
        }
        if !(raw.sweep.epsilon > 0.0) {
            return Err(err("sweep.epsilon must be positive".into()));
        }
        if raw.replication.r_max == 0 {
            return Err(err("replication.r_max must be at least 1".into()));
        }
        if let Some(f) = raw.replication.host_overhead_fraction {
            if !(0.0..1.0).contains(&f) {
                return Err(err("replication.host_overhead_fraction must lie in [0, 1)".into()));
            }
        }

        let mut output = raw.output;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            output.dir = PathBuf::from(dir);
        }

        Ok(Self {
            path: path.to_path_buf(),
            catalog,
            warnings,
            model,
            device,
            parallel,
            workload,
            engine: raw.engine,
            plan: raw.plan,
            sweep: raw.sweep,
            replication: raw.replication,
            output,
        })
    }

    pub fn require_model(&self) -> Result<&ModelSpec, CliError> {
        self.model
            .as_ref()
            .ok_or_else(|| CliError::config(&self.path, "`model` must be set for this command"))
    }

    pub fn trace(&self) -> Result<Vec<Request>, CliError> {
        match &self.workload {
            WorkloadSource::Synthetic(spec) => workload::synthetic(spec),
            WorkloadSource::Trace(path) => workload::load_trace(path),
        }
        .map_err(|e| CliError::config(&self.path, e.to_string()))
    }

    /// Per-request KV budget used for planning.
    pub fn seq_len(&self, trace: Option<&[Request]>) -> u64 {
        match (&self.workload, trace) {
            (WorkloadSource::Synthetic(spec), _) => spec.seq_len(),
            (WorkloadSource::Trace(_), Some(t)) => servesim::replication::trace_seq_len(t),
            (WorkloadSource::Trace(_), None) => 768,
        }
    }

    pub fn wants(&self, format: Format) -> bool {
        self.output.formats.contains(&format)
    }
}

fn resolve_workload(w: WorkloadSection, config_path: &Path) -> Result<WorkloadSource, String> {
    let synthetic_fields = w.n_requests.is_some()
        || w.input_len.is_some()
        || w.output_len.is_some()
        || w.arrival_rate.is_some()
        || w.seed.is_some();
    if let Some(trace) = w.trace {
        if synthetic_fields {
            return Err("workload: give either a trace path or synthetic fields, not both".into());
        }
        let trace = if trace.is_relative() {
            config_path.parent().unwrap_or(Path::new(".")).join(trace)
        } else {
            trace
        };
        return Ok(WorkloadSource::Trace(trace));
    }
    let defaults = WorkloadSpec::default();
    let arrival_rate = match w.arrival_rate {
        None => ArrivalRate::Infinite,
        Some(RateValue::Word(word)) if matches!(word.as_str(), "inf" | "infinite") => ArrivalRate::Infinite,
        Some(RateValue::Word(word)) => return Err(format!("workload.arrival_rate: expected a number or \"inf\", got {word:?}")),
        Some(RateValue::Number(r)) if r.is_infinite() && r > 0.0 => ArrivalRate::Infinite,
        Some(RateValue::Number(r)) => ArrivalRate::PerSecond(r),
    };
    let spec = WorkloadSpec {
        n_requests: w.n_requests.unwrap_or(defaults.n_requests),
        input_len: w.input_len.unwrap_or(defaults.input_len),
        output_len: w.output_len.unwrap_or(defaults.output_len),
        arrival_rate,
        seed: w.seed.unwrap_or(defaults.seed),
    };
    spec.validate().map_err(|e| e.to_string())?;
    Ok(WorkloadSource::Synthetic(spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config, CliError> {
        Config::parse(text, Path::new("test.toml"))
    }

    #[test]
    fn defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.device, DeviceSpec::a100_40gb());
        assert_eq!(c.parallel, ParallelSpec::single());
        assert_eq!(c.workload, WorkloadSource::Synthetic(WorkloadSpec::default()));
        assert_eq!(c.engine, EngineConfig::default());
        assert!(c.model.is_none());
    }

    #[test]
    fn profiles_and_extensions() {
        let c = parse(
            r#"
            model = "tiny"
            device = "big"
            parallel = "tp2"
            [[models]]
            name = "tiny"
            n_params = 1000000
            n_layers = 2
            n_heads = 2
            head_dim = 8
            hidden = 16
            [devices.big]
            hbm_bytes = 80e9
            mem_bw = 2e12
            peak_flops = 1e15
            usable_fraction = 0.9
            [parallels.tp2]
            tp_degree = 2
            [workload]
            arrival_rate = 4.0
            seed = 9
            "#,
        )
        .unwrap();
        assert_eq!(c.model.unwrap().name, "tiny");
        assert_eq!(c.device.hbm_bytes, 80e9);
        assert_eq!(c.parallel.tp_degree, 2);
        assert_eq!(c.parallel.comm_base_latency, ParallelSpec::DEFAULT_COMM_BASE_LATENCY);
        let WorkloadSource::Synthetic(w) = c.workload else { panic!() };
        assert_eq!(w.arrival_rate, ArrivalRate::PerSecond(4.0));
        assert_eq!(w.seed, 9);
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            "model = \"OPT-9B\"",
            "device = \"h100\"",
            "[workload]\ntrace = \"t.csv\"\nn_requests = 3",
            "[workload]\narrival_rate = \"fast\"",
            "[workload]\narrival_rate = -1.0",
            "[engine]\nmode = \"orca\"",
            "[engine]\nmax_batch = 0",
            "[plan]\nmodels = [\"nope\"]",
            "[sweep]\nepsilon = 0.0",
            "[bogus]\nx = 1",
        ] {
            let e = parse(bad).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{bad}");
            assert!(e.to_string().contains("test.toml"), "{e}");
        }
    }

    #[test]
    fn trace_path_is_relative_to_config() {
        let c = Config::parse("[workload]\ntrace = \"t.csv\"", Path::new("/cfg/dir/run.toml")).unwrap();
        assert_eq!(c.workload, WorkloadSource::Trace(PathBuf::from("/cfg/dir/t.csv")));
    }
}
