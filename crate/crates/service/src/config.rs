use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "PRINTFIX_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    /// Directory whose subdirectories are model bundles. Missing or empty
    /// means diagnosis answers 503.
    pub bundle_dir: PathBuf,
    pub kb_dir: PathBuf,
    /// Upload sessions and the feedback log live here.
    pub data_dir: PathBuf,
    pub max_image_bytes: usize,
    pub max_images_per_upload: usize,
    pub session_ttl_hours: u64,
    /// Include numeric probabilities in every diagnosis response.
    pub debug_probabilities: bool,
    /// Longest side of rendered saliency maps, in pixels.
    pub saliency_max_side: u32,
    /// Requests per client address per minute; `None` disables limiting.
    pub rate_limit_per_minute: Option<u32>,
    /// Built web console assets, served at `/` when set.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            bundle_dir: "bundles".into(),
            kb_dir: "kb".into(),
            data_dir: "data".into(),
            max_image_bytes: 10 * 1024 * 1024,
            max_images_per_upload: 10,
            session_ttl_hours: 24,
            debug_probabilities: false,
            saliency_max_side: 512,
            rate_limit_per_minute: None,
            static_dir: None,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ServiceConfig {
    /// Reads a TOML file (if given), then applies `PRINTFIX_*` environment
    /// overrides such as `PRINTFIX_LISTEN` or `PRINTFIX_DEBUG_PROBABILITIES`.
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read {}: {e}", p.display())))?;
                let mut c: ServiceConfig =
                    toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                if let Some(base) = p.parent() {
                    c.resolve_relative(base);
                }
                c
            }
            None => ServiceConfig::default(),
        };
        config.apply_env(std::env::vars())?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_relative(&mut self, base: &Path) {
        for p in [&mut self.bundle_dir, &mut self.kb_dir, &mut self.data_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = self.static_dir.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
    }

    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value
                .parse()
                .map_err(|_| ConfigError(format!("{ENV_PREFIX}{key}: cannot parse `{value}`")))
        }
        for (key, value) in vars {
            let Some(key) = key.strip_prefix(ENV_PREFIX) else { continue };
            match key {
                "LISTEN" => self.listen = value,
                "BUNDLE_DIR" => self.bundle_dir = value.into(),
                "KB_DIR" => self.kb_dir = value.into(),
                "DATA_DIR" => self.data_dir = value.into(),
                "MAX_IMAGE_BYTES" => self.max_image_bytes = parse(key, &value)?,
                "MAX_IMAGES_PER_UPLOAD" => self.max_images_per_upload = parse(key, &value)?,
                "SESSION_TTL_HOURS" => self.session_ttl_hours = parse(key, &value)?,
                "DEBUG_PROBABILITIES" => self.debug_probabilities = parse(key, &value)?,
                "SALIENCY_MAX_SIDE" => self.saliency_max_side = parse(key, &value)?,
                "RATE_LIMIT_PER_MINUTE" => {
                    self.rate_limit_per_minute = if value.is_empty() { None } else { Some(parse(key, &value)?) }
                }
                "STATIC_DIR" => self.static_dir = if value.is_empty() { None } else { Some(value.into()) },
                _ => {}
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_images_per_upload == 0 {
            return Err(ConfigError("max_images_per_upload must be at least 1".into()));
        }
        if self.max_image_bytes == 0 {
            return Err(ConfigError("max_image_bytes must be positive".into()));
        }
        if self.session_ttl_hours == 0 {
            return Err(ConfigError("session_ttl_hours must be positive".into()));
        }
        if self.saliency_max_side < 8 {
            return Err(ConfigError("saliency_max_side must be at least 8".into()));
        }
        Ok(())
    }
}
