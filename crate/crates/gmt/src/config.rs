//! `.config` files: `key=value` lines, `#` comments, last duplicate wins.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use thiserror::Error;

use edgrid_core::tiers::{Configuration, GmtOptions};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("configuration files must end in .config: {0}")]
    BadExtension(String),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("bad value for {key}: {message}")]
    BadValue { key: String, message: String },
}

/// Daemon settings read from the configuration.
pub mod keys {
    pub const BIND: &str = "gmt.bind";
    pub const SECRET: &str = "gmt.secret";
    pub const HEARTBEAT_MS: &str = "gmt.heartbeat.interval.ms";
    pub const MISSED_LIMIT: &str = "gmt.heartbeat.missed";
    pub const PERFORMANCE_WINDOW_MS: &str = "gmt.performance.window.ms";
    /// Network document loaded at startup.
    pub const NETWORK: &str = "gmt.network";
}

fn remove_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

pub fn parse_config(text: &str) -> Result<Configuration, ConfigError> {
    let mut config = Configuration::new();
    for (i, raw) in text.lines().enumerate() {
        let line = remove_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: &str| ConfigError::ParseError {
            line: i + 1,
            message: message.into(),
        };
        let (key, value) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(err("empty key"));
        }
        config.set(key, value.trim()).map_err(|e| err(&e.to_string()))?;
    }
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<Configuration, ConfigError> {
    if path.extension().and_then(|e| e.to_str()) != Some("config") {
        return Err(ConfigError::BadExtension(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

/// What a daemon takes from its configuration.
pub struct DaemonSettings {
    pub bind: Option<SocketAddr>,
    pub network: Option<PathBuf>,
    pub options: GmtOptions,
}

fn number(config: &Configuration, key: &str, default: u64) -> Result<u64, ConfigError> {
    match config.get(key) {
        None => Ok(default),
        Some(v) => match v.parse::<u64>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ConfigError::BadValue {
                key: key.into(),
                message: format!("`{v}` is not a positive integer"),
            }),
        },
    }
}

/// Reads the daemon keys; other keys are left for tiers to use.
pub fn daemon_settings(config: &Configuration) -> Result<DaemonSettings, ConfigError> {
    let mut options = GmtOptions::default();
    let hb = &mut options.heartbeat;
    hb.interval_ms = number(config, keys::HEARTBEAT_MS, hb.interval_ms)?;
    hb.missed_limit = number(config, keys::MISSED_LIMIT, hb.missed_limit)?;
    hb.performance_window_ms = number(config, keys::PERFORMANCE_WINDOW_MS, hb.performance_window_ms)?;
    if let Some(secret) = config.get(keys::SECRET) {
        options.secret = secret.as_bytes().to_vec();
    }
    let bind = config
        .get(keys::BIND)
        .map(|b| {
            b.parse().map_err(|e: std::net::AddrParseError| ConfigError::BadValue {
                key: keys::BIND.into(),
                message: e.to_string(),
            })
        })
        .transpose()?;
    Ok(DaemonSettings {
        bind,
        network: config.get(keys::NETWORK).map(PathBuf::from),
        options,
    })
}
