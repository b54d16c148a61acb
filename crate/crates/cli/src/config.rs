//! Run configuration: a plain-text `key = value` file with command-line
//! overrides. Every numeric field is validated before any work starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use gcgp_core::{Error, Result};

/// Which pipeline a command operates on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Synthetic oriented-bar images on a pixel grid (no external data).
    ToyImage,
    /// Superpixel graphs built from the synthetic images.
    ToySuperpixels,
    /// MNIST images on the 28x28 grid (IDX files supplied by the user).
    Mnist,
    /// MNIST superpixel graphs.
    Superpixels,
    /// Synthetic mesh classification.
    SynthMesh,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "toy-image" => Ok(Task::ToyImage),
            "toy-superpixels" => Ok(Task::ToySuperpixels),
            "mnist" => Ok(Task::Mnist),
            "superpixels" => Ok(Task::Superpixels),
            "synth-mesh" => Ok(Task::SynthMesh),
            other => Err(Error::InvalidArgument(format!(
                "unknown task '{other}' (expected toy-image, toy-superpixels, mnist, superpixels, or synth-mesh)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::ToyImage => "toy-image",
            Task::ToySuperpixels => "toy-superpixels",
            Task::Mnist => "mnist",
            Task::Superpixels => "superpixels",
            Task::SynthMesh => "synth-mesh",
        }
    }
}

/// Raw key/value configuration with typed, validated accessors.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!(
                    "{}: line {}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            values.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::InvalidArgument(format!("config key '{key}' must be an integer, got '{v}'"))
            }),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::InvalidArgument(format!("config key '{key}' must be an integer, got '{v}'"))
            }),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::InvalidArgument(format!("config key '{key}' must be a number, got '{v}'"))
            }),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::InvalidArgument(format!(
                "config key '{key}' must be a boolean, got '{v}'"
            ))),
        }
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        Error::InvalidArgument(format!(
                            "config key '{key}' must be a comma-separated number list"
                        ))
                    })
                })
                .collect(),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
            .map(PathBuf::from)
            .ok_or_else(|| Error::InvalidArgument(format!("config key '{key}' is required")))
    }

    pub fn task(&self) -> Result<Task> {
        Task::parse(
            self.get("task")
                .ok_or_else(|| Error::InvalidArgument("config key 'task' is required".into()))?,
        )
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64_or("seed", 0)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir").unwrap_or("out"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.get("cache_dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| self.out_dir().join("cache"))
    }

    /// A canonical description of every key/value pair, used in digests.
    pub fn digest_text(&self, keys: &[&str]) -> String {
        let mut s = String::new();
        for k in keys {
            s.push_str(k);
            s.push('=');
            s.push_str(self.get(k).unwrap_or(""));
            s.push(';');
        }
        s
    }
}
