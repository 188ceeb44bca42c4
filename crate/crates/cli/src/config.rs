//! The shared configuration file and its environment overrides.
//!
//! Any `CONTEXTD_<KEY>` variable overrides a top-level key and
//! `CONTEXTD_<SECTION>__<KEY>` a key inside a section, e.g.
//! `CONTEXTD_ANNOTATION__THRESHOLD=0.95` or
//! `CONTEXTD_BACKENDS__VILT=tcp://10.0.0.5:7070`. Values are read as TOML
//! scalars when they parse as one and as strings otherwise.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use drivectx::protocol::{Endpoint, QueryMode};
use drivectx::realtime::SchedulerConfig;
use drivectx::Taxonomy;

use crate::error::{CliError, CliResult};

/// Variables read by the binary itself rather than mapped onto the file.
const RESERVED: [&str; 2] = ["CONFIG", "LOG"];

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Named backend endpoints.
    pub backends: BTreeMap<String, String>,
    /// Alternate taxonomy file; the built-in one otherwise.
    pub taxonomy: Option<PathBuf>,
    /// Named dataset manifests.
    pub datasets: BTreeMap<String, PathBuf>,
    pub scheduler: SchedulerSection,
    pub annotation: AnnotationSection,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerSection {
    pub mode: Option<QueryMode>,
    pub budget_ms: Option<f64>,
    pub cycle_ms: Option<f64>,
    pub refresh_fast_ms: Option<f64>,
    pub refresh_slow_ms: Option<f64>,
    pub max_queries_per_cycle: Option<usize>,
    pub kinds: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotationSection {
    pub threshold: f64,
    pub emit_negatives: bool,
}

impl Default for AnnotationSection {
    fn default() -> Self {
        AnnotationSection { threshold: drivectx::annotation::DEFAULT_THRESHOLD, emit_negatives: true }
    }
}

fn scalar(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Folds `CONTEXTD_*` variables from `vars` into `table`.
pub fn apply_env(table: &mut toml::Table, vars: impl IntoIterator<Item = (String, String)>) -> CliResult {
    for (name, raw) in vars {
        let Some(key) = name.strip_prefix("CONTEXTD_") else { continue };
        if RESERVED.contains(&key) || key.is_empty() {
            continue;
        }
        let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) || path.len() > 2 {
            return Err(CliError::config(format!("cannot map {name} onto the config file")));
        }
        let value = scalar(&raw);
        match path.as_slice() {
            [key] => {
                table.insert(key.clone(), value);
            }
            [section, key] => {
                let entry = table.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                let toml::Value::Table(inner) = entry else {
                    return Err(CliError::config(format!("{name}: `{section}` is not a section")));
                };
                inner.insert(key.clone(), value);
            }
            _ => unreachable!("length checked above"),
        }
    }
    Ok(())
}

impl AppConfig {
    /// Reads `path` (if any), applies environment overrides and validates.
    pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> CliResult<AppConfig> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_env(&mut table, vars)?;
        let config: AppConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Every referenced path and endpoint is checked up front.
    pub fn validate(&self) -> CliResult {
        let t = self.annotation.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(CliError::config(format!("annotation threshold {t} is outside (0, 1)")));
        }
        for (name, endpoint) in &self.backends {
            match Endpoint::parse(endpoint) {
                Ok(Endpoint::Mock(spec)) if !spec.truth.exists() => {
                    return Err(CliError::config(format!(
                        "backend {name}: ground-truth file {} does not exist",
                        spec.truth.display()
                    )))
                }
                Ok(_) => {}
                Err(e) => return Err(CliError::config(format!("backend {name}: {e}"))),
            }
        }
        for (name, path) in &self.datasets {
            if !path.is_file() {
                return Err(CliError::config(format!("dataset {name}: {} does not exist", path.display())));
            }
        }
        self.load_taxonomy()?;
        self.scheduler(Some(&self.taxonomy_ref()?)).and_then(|s| s.validate().map_err(CliError::config))?;
        Ok(())
    }

    fn taxonomy_ref(&self) -> CliResult<Taxonomy> {
        match &self.taxonomy {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("taxonomy {}: {e}", path.display())))?;
                Taxonomy::from_toml(&text).map_err(|e| CliError::config(format!("taxonomy {}: {e}", path.display())))
            }
            None => Ok(Taxonomy::builtin().clone()),
        }
    }

    /// The taxonomy in effect, kept for the life of the process.
    pub fn load_taxonomy(&self) -> CliResult<&'static Taxonomy> {
        match &self.taxonomy {
            Some(_) => Ok(Box::leak(Box::new(self.taxonomy_ref()?))),
            None => Ok(Taxonomy::builtin()),
        }
    }

    /// Scheduler defaults from the file on top of the built-in ones.
    pub fn scheduler(&self, taxonomy: Option<&Taxonomy>) -> CliResult<SchedulerConfig> {
        let s = &self.scheduler;
        let mut c = SchedulerConfig::default();
        if let Some(v) = s.mode {
            c.mode = v;
        }
        if let Some(v) = s.budget_ms {
            c.per_query_budget_ms = v;
        }
        if let Some(v) = s.cycle_ms {
            c.cycle_period_ms = v;
        }
        if let Some(v) = s.refresh_fast_ms {
            c.refresh_fast_ms = v;
        }
        if let Some(v) = s.refresh_slow_ms {
            c.refresh_slow_ms = v;
        }
        if let Some(v) = s.max_queries_per_cycle {
            c.max_queries_per_cycle = v;
        }
        if let Some(kinds) = &s.kinds {
            let taxonomy = taxonomy.unwrap_or(Taxonomy::builtin());
            c.enabled_kinds = taxonomy.parse_kind_list(kinds).map_err(CliError::config)?;
        }
        Ok(c)
    }

    /// A configured backend name, or else an endpoint string.
    pub fn resolve_backend(&self, name_or_endpoint: &str) -> CliResult<Endpoint> {
        let endpoint = self.backends.get(name_or_endpoint).map_or(name_or_endpoint, String::as_str);
        Endpoint::parse(endpoint).map_err(CliError::usage)
    }

    /// A configured dataset name, or else a path.
    pub fn resolve_dataset(&self, name_or_path: &str) -> PathBuf {
        self.datasets.get(name_or_path).cloned().unwrap_or_else(|| PathBuf::from(name_or_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn env_overrides_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[annotation]\nthreshold = 0.8\n[scheduler]\ncycle_ms = 100.0\n").unwrap();
        let c = AppConfig::load(
            Some(&path),
            vars(&[
                ("CONTEXTD_ANNOTATION__THRESHOLD", "0.95"),
                ("CONTEXTD_SCHEDULER__MODE", "joint"),
                ("CONTEXTD_BACKENDS__REMOTE", "tcp://127.0.0.1:9"),
                ("CONTEXTD_LOG", "debug"),
                ("HOME", "/root"),
            ]),
        )
        .unwrap();
        assert_eq!(c.annotation.threshold, 0.95);
        assert_eq!(c.scheduler.cycle_ms, Some(100.0));
        assert_eq!(c.scheduler.mode, Some(QueryMode::Joint));
        assert_eq!(c.backends["remote"], "tcp://127.0.0.1:9");
    }

    #[test]
    fn validation_rejects_bad_values() {
        let bad = |pairs: &[(&str, &str)]| AppConfig::load(None, vars(pairs)).unwrap_err();
        assert!(bad(&[("CONTEXTD_ANNOTATION__THRESHOLD", "1.0")]).message.contains("threshold"));
        assert!(bad(&[("CONTEXTD_BACKENDS__X", "mock:/nonexistent.jsonl")]).message.contains("does not exist"));
        assert!(bad(&[("CONTEXTD_BACKENDS__X", "nohost")]).message.contains("backend x"));
        assert!(bad(&[("CONTEXTD_DATASETS__HA", "/nonexistent.json")]).message.contains("dataset ha"));
        assert!(bad(&[("CONTEXTD_SCHEDULER__MAX_QUERIES_PER_CYCLE", "9")]).message.contains("exceed"));
        assert!(bad(&[("CONTEXTD_NOPE", "1")]).message.contains("nope"));
        assert_eq!(AppConfig::load(None, vars(&[])).unwrap(), AppConfig::default());
    }

    #[test]
    fn resolves_names_before_endpoints() {
        let c = AppConfig::load(None, vars(&[("CONTEXTD_BACKENDS__REMOTE", "tcp://127.0.0.1:9")])).unwrap();
        assert_eq!(c.resolve_backend("remote").unwrap(), Endpoint::Tcp("127.0.0.1:9".into()));
        assert_eq!(c.resolve_backend("localhost:7").unwrap(), Endpoint::Tcp("localhost:7".into()));
        assert!(c.resolve_backend("nowhere").is_err());
    }
}
