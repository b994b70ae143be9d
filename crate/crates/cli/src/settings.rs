//! Layered configuration: task defaults, then the TOML file, then flags.

use std::fs;
use std::path::Path;

use anyhow::Context;
use posdiff::config::RunConfig;
use posdiff::data::DatasetKind;
use posdiff::task::Task;
use toml::{Table, Value};

/// A bad invocation or configuration; exits with code 2.
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

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn file_task(table: &Table) -> anyhow::Result<Option<Task>> {
    let Some(kind) = table.get("dataset").and_then(|d| d.get("kind")) else {
        return Ok(None);
    };
    let kind: DatasetKind = kind.clone().try_into().map_err(|e| usage(format!("dataset.kind: {e}")))?;
    Ok(Some(match kind {
        DatasetKind::ProceduralImage | DatasetKind::ImageDir => Task::Puzzle,
        DatasetKind::SyntheticSequence => Task::Sequence,
    }))
}

/// Resolves the effective configuration; every failure here is a usage error.
pub fn resolve(path: Option<&Path>, task: Option<Task>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let user = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>().map_err(|e| usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    let from_file = file_task(&user)?;
    let task = match (task, from_file) {
        (Some(a), Some(b)) if a != b => {
            return Err(usage(format!("--task {a} conflicts with dataset.kind in the config file ({b})")))
        }
        (Some(t), _) | (None, Some(t)) => t,
        (None, None) => Task::Puzzle,
    };
    let mut table = Table::try_from(RunConfig::for_task(task)).context("serializing defaults")?;
    merge(&mut table, user);
    let mut cfg: RunConfig = table.try_into().map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
        cfg.model.seed = s;
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    cfg.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
    Ok(cfg)
}

/// The resolved configuration as TOML, for provenance.
pub fn echo(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let text = toml::to_string_pretty(cfg).context("serializing config")?;
    fs::write(dir.join("config.toml"), text).with_context(|| format!("writing config into {}", dir.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn file_values_override_defaults_and_flags_override_file() {
        let f = write("[train]\nlr = 0.01\nseed = 4\n[model]\nwidth = 64\n");
        let c = resolve(Some(f.path()), None, Some(9)).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.model.width, 64);
        assert_eq!(c.model.heads, 4);
    }

    #[test]
    fn task_selects_defaults() {
        let c = resolve(None, Some(Task::Sequence), None).unwrap();
        assert_eq!(c.dataset.kind, DatasetKind::SyntheticSequence);
        assert_eq!(c.dataset.count, 5000);
        let f = write("[dataset]\nkind = \"synthetic-sequence\"\ncount = 10\n");
        let c = resolve(Some(f.path()), None, None).unwrap();
        assert_eq!(c.task(), Task::Sequence);
        assert_eq!(c.dataset.count, 10);
        assert!(resolve(Some(f.path()), Some(Task::Puzzle), None).is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        for text in ["[train]\nmomentum = 0.9\n", "[extra]\na = 1\n", "[train]\nlr = -1.0\n", "not toml ["] {
            let f = write(text);
            let err = resolve(Some(f.path()), None, None).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{text}");
        }
    }

    #[test]
    fn echoed_config_resolves_to_itself() {
        let dir = tempfile::tempdir().unwrap();
        let c = resolve(None, Some(Task::Sequence), Some(3)).unwrap();
        echo(&c, dir.path()).unwrap();
        let back = resolve(Some(&dir.path().join("config.toml")), None, None).unwrap();
        assert_eq!(back, c);
    }
}
