use std::path::{Path, PathBuf};

use mica_core::agents::{AgentSettings, AuditRules, Lexicon, RemoteConfig, RoleTemplates};
use mica_core::asf::AsfConfig;
use mica_core::metrics::{CostModelSampler, IdleSampler};
use mica_core::perception::PerceptionParams;
use mica_core::topologies::{Topology, TopologyConfig};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Template,
    Remote,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Template => "template",
            BackendKind::Remote => "remote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub remote: RemoteConfig,
    pub templates: RoleTemplates,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Template,
            remote: RemoteConfig::default(),
            templates: RoleTemplates::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Retrieval scores average the top-k reference similarities.
    pub top_k: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self { top_k: 1 }
    }
}

/// Power model used in place of GPU telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub base_watts: f64,
    pub joules_per_token: f64,
    pub idle_watts: f64,
    pub rate_hz: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            base_watts: 60.0,
            joules_per_token: 8.0,
            idle_watts: 60.0,
            rate_hz: 5.0,
        }
    }
}

impl EnergyConfig {
    pub fn sampler(&self) -> CostModelSampler {
        CostModelSampler {
            base_watts: self.base_watts,
            joules_per_token: self.joules_per_token,
            rate_hz: self.rate_hz,
        }
    }

    pub fn idle_sampler(&self) -> IdleSampler {
        IdleSampler {
            watts: self.idle_watts,
            rate_hz: self.rate_hz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub ece_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { ece_bins: 10 }
    }
}

/// Everything one run needs. Relative paths resolve against the directory
/// holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub kb: PathBuf,
    pub stream: PathBuf,
    pub gallery: PathBuf,
    pub queries: PathBuf,
    pub schedule: PathBuf,
    /// Warm-start ASF state; a fresh state is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<PathBuf>,
    pub out: PathBuf,
    pub topologies: Vec<Topology>,
    pub asf: AsfConfig,
    pub perception: PerceptionParams,
    pub experts: ExpertConfig,
    pub topology: TopologyConfig,
    pub agents: AgentSettings,
    pub backend: BackendConfig,
    pub energy: EnergyConfig,
    pub metrics: MetricsConfig,
    pub audit: AuditRules,
    pub lexicon: Lexicon,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            kb: "kb.toml".into(),
            stream: "stream.jsonl".into(),
            gallery: "gallery.txt".into(),
            queries: "queries.jsonl".into(),
            schedule: "schedule.toml".into(),
            initial_state: None,
            out: "out".into(),
            topologies: Topology::ALL.to_vec(),
            asf: AsfConfig::default(),
            perception: PerceptionParams::default(),
            experts: ExpertConfig::default(),
            topology: TopologyConfig::default(),
            agents: AgentSettings::default(),
            backend: BackendConfig::default(),
            energy: EnergyConfig::default(),
            metrics: MetricsConfig::default(),
            audit: AuditRules::default(),
            lexicon: Lexicon::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn from_toml_str(src: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut cfg: BenchmarkConfig =
            toml::from_str(src).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.resolve(base);
        cfg.asf
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&src, base)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.kb);
        join(&mut self.stream);
        join(&mut self.gallery);
        join(&mut self.queries);
        join(&mut self.schedule);
        join(&mut self.out);
        if let Some(p) = &mut self.initial_state {
            join(p);
        }
    }

    /// Fails on the first referenced input file that does not exist.
    pub fn check_paths(&self) -> Result<(), HarnessError> {
        let mut paths = vec![
            &self.kb,
            &self.stream,
            &self.gallery,
            &self.queries,
            &self.schedule,
        ];
        if let Some(p) = &self.initial_state {
            paths.push(p);
        }
        match paths.into_iter().find(|p| !p.exists()) {
            Some(p) => Err(HarnessError::Config(format!(
                "referenced path {} does not exist",
                p.display()
            ))),
            None => Ok(()),
        }
    }

    /// Every setting as TOML, for echoing into reports. Input paths are shown
    /// by file name and the output directory is left out, so reports do not
    /// depend on where they are written.
    pub fn echo(&self) -> String {
        let mut shown = self.clone();
        let name = |p: &mut PathBuf| {
            if let Some(n) = p.file_name() {
                *p = PathBuf::from(n);
            }
        };
        name(&mut shown.kb);
        name(&mut shown.stream);
        name(&mut shown.gallery);
        name(&mut shown.queries);
        name(&mut shown.schedule);
        if let Some(p) = &mut shown.initial_state {
            name(p);
        }
        let mut table = toml::Table::try_from(&shown).expect("config serialises");
        table.remove("out");
        toml::to_string(&table).expect("config serialises")
    }
}
