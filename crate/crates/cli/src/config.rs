//! Layered run configuration: flags over the config file over defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use mvfd_core::artifact::{config_hash, write_json};
use mvfd_core::geometry::ViewParams;
use mvfd_core::ingestion::SyntheticSpec;
use mvfd_core::model::ModelConfig;
use mvfd_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Name of the environment variable holding the default config path.
pub const CONFIG_ENV: &str = "MVFD_CONFIG";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// A bad invocation: reported like a clap error, with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// The config file. Each section is checked against its schema when the
/// file is loaded, whether or not the current command uses it.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub synth: Option<Value>,
    pub views: Option<Value>,
    pub model: Option<Value>,
    pub train: Option<Value>,
}

impl FileConfig {
    /// Reads `path`, or the file named by `MVFD_CONFIG`, or nothing.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let path = match path {
            Some(p) => Some(p.to_path_buf()),
            None => std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        };
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let cfg: FileConfig =
            serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        for (name, section) in [
            ("synth", &cfg.synth),
            ("model", &cfg.model),
            ("train", &cfg.train),
        ] {
            if section.as_ref().and_then(|s| s.get("seed")).is_some() {
                return Err(usage(format!(
                    "config {}: `{name}.seed` is derived from the top-level `seed`; set that instead",
                    path.display()
                )));
            }
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> anyhow::Result<()> {
        section("synth", &default_synth(), self.synth.as_ref(), Map::new())?;
        section("views", &ViewParams::default(), self.views.as_ref(), Map::new())?;
        section("model", &default_model(), self.model.as_ref(), Map::new())?;
        section("train", &TrainConfig::default(), self.train.as_ref(), Map::new())?;
        Ok(())
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }
}

pub fn default_synth() -> SyntheticSpec {
    SyntheticSpec::new(100, 0)
}

/// The small test backbone keeps CPU runs short; configs select others.
pub fn default_model() -> ModelConfig {
    ModelConfig::tiny(16, 0)
}

/// Recursively overlays `over` on `base`; objects merge key by key and
/// everything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Builds a section from its defaults, the file's section and flag
/// overrides, then parses it strictly.
pub fn section<T: Serialize + DeserializeOwned>(
    name: &str,
    defaults: &T,
    file: Option<&Value>,
    flags: Map<String, Value>,
) -> anyhow::Result<T> {
    let mut v = serde_json::to_value(defaults)?;
    if let Some(f) = file {
        merge(&mut v, f.clone());
    }
    merge(&mut v, Value::Object(flags));
    serde_json::from_value(v).map_err(|e| usage(format!("`{name}` configuration: {e}")))
}

/// Collects flag overrides, skipping flags that were not given.
#[derive(Default)]
pub struct Flags(Map<String, Value>);

impl Flags {
    pub fn set<T: Serialize>(mut self, key: &str, value: Option<T>) -> Self {
        if let Some(v) = value {
            self.0.insert(key.into(), serde_json::to_value(v).expect("flag values serialize"));
        }
        self
    }

    pub fn into_map(self) -> Map<String, Value> {
        self.0
    }
}

/// What a command ran with. Written to every output directory; the hash
/// covers everything except itself.
#[derive(Clone, Debug, Serialize)]
pub struct Resolved {
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub config_hash: String,
}

impl Resolved {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> anyhow::Result<Self> {
        let config = serde_json::to_value(config)?;
        let config_hash = config_hash(&serde_json::json!({ "command": command, "seed": seed, "config": config }))?;
        Ok(Resolved {
            command: command.into(),
            seed,
            config,
            config_hash,
        })
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_json(&dir.join(RESOLVED_CONFIG), self).context("writing the resolved configuration")
    }
}
