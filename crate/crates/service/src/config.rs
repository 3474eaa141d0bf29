use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use racx::train::check_threshold;
use racx::{Error, Result};

pub const CONFIG_ENV: &str = "RACX_CONFIG";
pub const PORT_ENV: &str = "RACX_PORT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApiConfig {
    pub bind: IpAddr,
    pub port: u16,
    /// Model directory as written by `train`. Without it prediction and
    /// explanation answer 503.
    pub checkpoint: Option<PathBuf>,
    /// Directory holding `students.jsonl` and `features.json` from `distill`.
    pub students: Option<PathBuf>,
    /// Every `*.json` file here is loaded as a question sheet.
    pub sheets_dir: Option<PathBuf>,
    /// Append-only JSONL rating store; created when missing.
    pub ratings: PathBuf,
    pub threshold: f64,
    /// Served at `/` when set.
    pub static_dir: Option<PathBuf>,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            bind: IpAddr::from([127, 0, 0, 1]),
            port: 8080,
            checkpoint: None,
            students: None,
            sheets_dir: None,
            ratings: PathBuf::from("ratings.jsonl"),
            threshold: 0.5,
            static_dir: None,
        }
    }
}

impl ApiConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Defaults, then the file named by `RACX_CONFIG`, then `RACX_PORT`.
    pub fn from_env() -> Result<Self> {
        let mut config = match std::env::var_os(CONFIG_ENV) {
            Some(path) => Self::load(path)?,
            None => Self::default(),
        };
        if let Ok(port) = std::env::var(PORT_ENV) {
            config.port =
                port.parse().map_err(|_| Error::Config(format!("{PORT_ENV}={port:?} is not a valid port")))?;
        }
        Ok(config)
    }

    pub fn address(&self) -> SocketAddr {
        SocketAddr::new(self.bind, self.port)
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        let dirs = [
            ("checkpoint", &self.checkpoint),
            ("students", &self.students),
            ("sheets_dir", &self.sheets_dir),
            ("static_dir", &self.static_dir),
        ];
        for (name, dir) in dirs {
            if let Some(dir) = dir {
                if !dir.is_dir() {
                    return Err(Error::Config(format!("{name} {} is not a directory", dir.display())));
                }
            }
        }
        if self.students.is_some() && self.checkpoint.is_none() {
            return Err(Error::Config("students need a checkpoint".into()));
        }
        match self.ratings.parent() {
            Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
                Err(Error::Config(format!("ratings directory {} does not exist", p.display())))
            }
            _ => Ok(()),
        }
    }
}
