//! Plain-text run configuration: `key = value` lines under `[section]`
//! headers, `#` comments. Every key has a default; unknown keys are a hard
//! error; the resolved configuration is echoed into the run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Known keys and their desk-scale defaults.
const DEFAULTS: &[(&str, &str)] = &[
    ("schedule.kind", "logform"),
    ("schedule.beta1", "auto"),
    ("schedule.use_beta_max", "true"),
    ("schedule.enforce_beta_cap", "true"),
    ("network.n_layers", "4"),
    ("network.n_heads", "4"),
    ("network.hidden_dim", "128"),
    ("network.dropout", "0.01"),
    ("network.ffn_mult", "4"),
    ("network.embed_mlp_dim", "256"),
    ("training.epochs", "100"),
    ("training.batch_size", "16"),
    ("training.lr", "1e-3"),
    ("training.warmup_init", "1e-8"),
    ("training.warmup_steps", "100"),
    ("training.weight_decay", "0.01"),
    ("training.grad_clip", "0.25"),
    ("training.p_uncond", "0.2"),
    ("training.dropout", "true"),
    ("training.time_sampling", "importance"),
    ("training.reaction_context", "false"),
    ("training.save_every", "0"),
    ("finetune.epochs", "60"),
    ("finetune.batch_size", "16"),
    ("finetune.lr", "1e-3"),
    ("finetune.warmup_init", "1e-7"),
    ("finetune.warmup_steps", "20"),
    ("finetune.plateau_patience", "20"),
    ("finetune.plateau_factor", "0.2"),
    ("finetune.lr_floor", "1e-6"),
    ("finetune.head_dropout", "0.0"),
    ("finetune.freeze_backbone", "false"),
    ("finetune.val_fraction", "0.1"),
    ("sampling.steps", "100"),
    ("sampling.guidance_w", "0"),
    ("sampling.n", "100"),
    ("data.padding", "global"),
    ("data.max_len", "auto"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let values =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(ConfigError(format!("line {}: malformed section header", i + 1)));
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError(format!("line {}: expected `key = value`", i + 1)));
            };
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            cfg.set(&full, value.trim())
                .map_err(|e| ConfigError(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) {
            return Err(ConfigError(format!("unknown configuration key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} not registered"))
    }

    pub fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let raw = self.str(key);
        raw.parse()
            .map_err(|_| ConfigError(format!("config key `{key}`: cannot parse `{raw}`")))
    }

    pub fn bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.str(key).to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            other => Err(ConfigError(format!("config key `{key}`: `{other}` is not a boolean"))),
        }
    }

    /// Render the resolved configuration, grouped by section.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut last_section = String::new();
        for (key, value) in &self.values {
            let (section, name) = key.split_once('.').unwrap_or(("", key.as_str()));
            if section != last_section {
                if !last_section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                last_section = section.to_string();
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }
}
