//! Run configuration (TOML) and the manifest written after a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::CommTopology;
use crate::objective::{JudgeConfig, UtilityFn};
use crate::optimizer::TrainerConfig;
use crate::runtime::remote::RemoteConfig;
use crate::runtime::{
    load_tasks, register_agent_backends, AgentRegistry, RegistrySpec, TaskInstance,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    pub text_roles: Vec<String>,
    pub visual_roles: Vec<String>,
    #[serde(default)]
    pub prompts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub train: PathBuf,
    #[serde(default)]
    pub eval: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSection {
    pub template: String,
    #[serde(default = "default_threshold")]
    pub threshold: u32,
    /// Falls back to the `[remote]` section when absent.
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
}

fn default_threshold() -> u32 {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: TopologySection,
    #[serde(default)]
    pub agents: RegistrySpec,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    #[serde(default)]
    pub trainer: TrainerConfig,
    pub tasks: TaskSection,
    #[serde(default)]
    pub judge: Option<JudgeSection>,
    /// Output directory for traces, checkpoints and the manifest.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

/// A parsed config plus what is needed to resolve its relative paths.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// SHA-256 of the config file bytes.
    pub file_hash: String,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.trainer.validate()?;
        Ok(LoadedConfig {
            config,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            file_hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn topology(&self) -> Result<CommTopology> {
        let t = &self.config.topology;
        Ok(CommTopology::build(&t.text_roles, &t.visual_roles)?.with_prompt_templates(&t.prompts))
    }

    pub fn registry(&self, topology: &CommTopology) -> Result<AgentRegistry> {
        register_agent_backends(topology, &self.config.agents, self.config.remote.as_ref())
    }

    pub fn utility(&self) -> Result<UtilityFn> {
        let Some(j) = &self.config.judge else {
            return Ok(UtilityFn::ExactMatch);
        };
        let remote = match (&j.remote, &self.config.remote) {
            (Some(r), _) | (None, Some(r)) => r.clone().with_env_token(),
            (None, None) => RemoteConfig::from_env()?,
        };
        Ok(UtilityFn::Judge(JudgeConfig {
            remote,
            template: j.template.clone(),
            threshold: j.threshold,
        }))
    }

    pub fn train_tasks(&self) -> Result<Vec<TaskInstance>> {
        let p = self.resolve(&self.config.tasks.train);
        if !p.exists() {
            return Err(Error::Config(format!(
                "task file {} does not exist",
                p.display()
            )));
        }
        load_tasks(&p)
    }

    /// Evaluation tasks, defaulting to the training file.
    pub fn eval_tasks(&self) -> Result<Vec<TaskInstance>> {
        let p = self.resolve(
            self.config
                .tasks
                .eval
                .as_ref()
                .unwrap_or(&self.config.tasks.train),
        );
        if !p.exists() {
            return Err(Error::Config(format!(
                "task file {} does not exist",
                p.display()
            )));
        }
        load_tasks(&p)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    /// Refuses to write a manifest that lists a file that does not exist.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some((name, p)) = self.artifacts.iter().find(|(_, p)| !p.exists()) {
            return Err(Error::CorruptState(format!(
                "artifact `{name}` ({}) is missing",
                p.display()
            )));
        }
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
