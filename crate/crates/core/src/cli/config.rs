use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, RetraceVariant};
use crate::trainer::{EvalConfig, Experiment, TrainConfig};
use crate::truncation::{TruncationConfig, TruncationMode};
use crate::worldmodel::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    /// Output directory; empty means `<root>/<name>`.
    pub out_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "run".into(),
            out_dir: String::new(),
        }
    }
}

/// The ablation matrix: every combination is one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub lambdas: Vec<f64>,
    pub modes: Vec<TruncationMode>,
    pub variants: Vec<RetraceVariant>,
    /// Empty means the top-level seed only.
    pub seeds: Vec<u64>,
    /// Proportion used by cells whose mode includes fixed truncation.
    pub fixed_proportion: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 1.0],
            modes: vec![TruncationMode::Off, TruncationMode::Fixed, TruncationMode::Adaptive],
            variants: vec![RetraceVariant::Bisimulation],
            seeds: Vec::new(),
            fixed_proportion: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run: RunSection,
    pub env: EnvSpec,
    pub model: ModelConfig,
    pub losses: LossConfig,
    pub truncation: TruncationConfig,
    pub agent: AgentConfig,
    pub trainer: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn de_error(text: &str, e: toml::de::Error) -> Error {
    Error::Config {
        line: e.span().map(|s| line_of(text, s.start)),
        msg: e.message().to_string(),
    }
}

/// Set `a.b.c = value` in a TOML table. The value is parsed as a TOML value
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse config text; errors carry the offending line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| de_error(text, e))
    }

    pub fn from_experiment(exp: &Experiment) -> Self {
        Self {
            seed: exp.seed,
            env: exp.env.clone(),
            model: exp.model.clone(),
            losses: exp.losses.clone(),
            truncation: exp.truncation.clone(),
            agent: exp.agent.clone(),
            trainer: exp.trainer.clone(),
            eval: exp.eval.clone(),
            ..Default::default()
        }
    }

    /// Read `path` (or start from `base`), then apply dotted overrides.
    pub fn resolve(path: Option<&Path>, base: Option<RunConfig>, overrides: &[String]) -> Result<Self> {
        let start = match path {
            Some(p) => Self::from_toml_str(&std::fs::read_to_string(p)?)?,
            None => base.unwrap_or_default(),
        };
        if overrides.is_empty() {
            return Ok(start);
        }
        let mut table = toml::Table::try_from(&start).map_err(|e| Error::config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::config(e.to_string()))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("in --set overrides: {}", e.message())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            seed: self.seed,
            env: self.env.clone(),
            model: self.model.clone(),
            losses: self.losses.clone(),
            truncation: self.truncation.clone(),
            agent: self.agent.clone(),
            trainer: self.trainer.clone(),
            eval: self.eval.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), c);
    }

    #[test]
    fn unknown_keys_report_lines() {
        let text = "seed = 3\n\n[model]\ndeter = 8\nbogus = 1\n";
        match RunConfig::from_toml_str(text) {
            Err(Error::Config { line: Some(l), msg }) => {
                assert_eq!(l, 5);
                assert!(msg.contains("bogus"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(RunConfig::from_toml_str("seed = \n"), Err(Error::Config { line: Some(1), .. })));
    }

    #[test]
    fn overrides_route_to_fields() {
        let c = RunConfig::resolve(
            None,
            None,
            &[
                "trainer.total_steps=10".into(),
                "losses.retrace_variant=l2".into(),
                "truncation.mode = \"both\"".into(),
                "run.name=abc".into(),
                "env.symmetric=true".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.trainer.total_steps, 10);
        assert_eq!(c.losses.retrace_variant, RetraceVariant::L2);
        assert_eq!(c.truncation.mode, TruncationMode::Both);
        assert_eq!(c.run.name, "abc");
        assert!(c.env.symmetric);
        assert!(RunConfig::resolve(None, None, &["trainer.nope=1".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["seed".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["seed.x=1".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["a..b=1".into()]).is_err());
    }

    #[test]
    fn experiment_round_trip() {
        let mut c = RunConfig { seed: 9, ..Default::default() };
        c.model.deter = 12;
        let e = c.experiment();
        let back = RunConfig::from_experiment(&e);
        assert_eq!(back.experiment(), e);
    }
}
