//! Run configuration: built-in defaults, then the config file, then flags.

use std::path::Path;

use pianet_core::data::{PatchConfig, PhantomSpec, PreprocessConfig};
use pianet_core::detect::DetectConfig;
use pianet_core::eval::{HitRule, ReportFormat};
use pianet_core::model::PiaNetConfig;
use pianet_core::train::TrainConfig;
use pianet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub phantom_count: usize,
    pub id_prefix: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            phantom_count: 4,
            id_prefix: "phantom".into(),
        }
    }
}

/// The default detector is `side = 128, width_divisor = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub side: usize,
    pub width_divisor: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            side: 128,
            width_divisor: 1,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<PiaNetConfig> {
        if self.width_divisor == 0 {
            return Err(Error::config("model.width_divisor must be at least 1"));
        }
        let cfg = PiaNetConfig::reduced(self.side, self.width_divisor);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub hit_rule: HitRule,
    pub formats: Vec<ReportFormat>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            hit_rule: HitRule::default(),
            formats: ReportFormat::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub patches: PatchConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub detect: DetectConfig,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

/// Loads the raw table of a config file. A run manifest is accepted too;
/// its `config` snapshot is used.
pub fn load_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse(&name, format!("line {}", e.line()), e.to_string()))?;
        let mut snap = v.get("config").cloned().ok_or_else(|| Error::config(format!("{name} has no `config` snapshot")))?;
        drop_nulls(&mut snap);
        return Table::try_from(snap).map_err(|e| Error::config(format!("{name}: {e}")));
    }
    text.parse::<Table>().map_err(|e| {
        let pos = e.span().map_or("start".to_string(), |s| format!("line {}", text[..s.start].lines().count().max(1)));
        Error::parse(&name, pos, e.message().to_string())
    })
}

/// Unset optional keys are `null` in JSON and absent in TOML.
fn drop_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(m) => {
            m.retain(|_, x| !x.is_null());
            m.values_mut().for_each(drop_nulls);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(drop_nulls),
        _ => {}
    }
}

/// Applies a `section.key=value` override. The value is read as TOML, or as
/// a bare string when that fails.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn has_key(table: &Table, path: &[&str]) -> bool {
    let mut cur = table;
    for (i, p) in path.iter().enumerate() {
        match cur.get(*p) {
            Some(Value::Table(t)) if i + 1 < path.len() => cur = t,
            Some(_) if i + 1 == path.len() => return true,
            _ => return false,
        }
    }
    false
}

impl RunConfig {
    /// Resolves a table, filling in defaults. A table read from a file must
    /// state `version`.
    pub fn from_table(mut table: Table, from_file: bool) -> Result<Self> {
        match table.get("version") {
            None if from_file => {
                return Err(Error::config(format!("config file must set `version = {CONFIG_VERSION}`")))
            }
            None => {
                table.insert("version".into(), Value::Integer(CONFIG_VERSION as i64));
            }
            Some(Value::Integer(v)) if *v == CONFIG_VERSION as i64 => {}
            Some(v) => return Err(Error::config(format!("unsupported config version {v}; expected {CONFIG_VERSION}"))),
        }
        let patch_side_set = has_key(&table, &["patches", "patch_side"]);
        let mut cfg: RunConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            Error::config(e.message().trim().replace('\n', " "))
        })?;
        if !patch_side_set {
            cfg.patches.patch_side = cfg.model.build()?.classifier_patch_side();
        }
        cfg.train.validate()?;
        cfg.detect.validate()?;
        cfg.phantom.validate()?;
        Ok(cfg)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.phantom.seed = seed;
        self.train.seed = seed;
    }

    /// The snapshot stored in run manifests.
    pub fn snapshot(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::from_table(Table::new(), false).unwrap();
        assert_eq!(cfg.patches.patch_side, 64);
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_table(text.parse().unwrap(), true).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let t: Table = "version = 1\n[train]\nepohcs = 3\n".parse().unwrap();
        let e = RunConfig::from_table(t, true).unwrap_err().to_string();
        assert!(e.contains("epohcs"), "{e}");
        let t: Table = "version = 1\n[trian]\n".parse().unwrap();
        assert!(RunConfig::from_table(t, true).is_err());
        assert!(RunConfig::from_table(Table::new(), true).is_err());
        let t: Table = "version = 2\n".parse().unwrap();
        assert!(RunConfig::from_table(t, true).is_err());
    }

    #[test]
    fn overrides() {
        let mut t = Table::new();
        apply_override(&mut t, "train.epochs=3").unwrap();
        apply_override(&mut t, "model.side=32").unwrap();
        apply_override(&mut t, "evaluate.hit_rule={kind=\"iou\", min=0.3}").unwrap();
        apply_override(&mut t, "dataset.id_prefix=scan").unwrap();
        let cfg = RunConfig::from_table(t, false).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.patches.patch_side, 16);
        assert_eq!(cfg.evaluate.hit_rule, HitRule::Iou { min: 0.3 });
        assert_eq!(cfg.dataset.id_prefix, "scan");
        assert!(apply_override(&mut Table::new(), "noequals").is_err());
    }
}
