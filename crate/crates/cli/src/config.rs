//! One TOML configuration shared by all subcommands. Values are resolved in
//! three layers: built-in defaults, the `--config` file, then `--set`
//! overrides. Unknown keys are rejected at every level.

use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use tvbf_core::evaluation::EvalParams;
use tvbf_core::scene::SceneSampler;
use tvbf_core::training::{SplitCounts, TrainingConfig};

pub const SNAPSHOT_FILE: &str = "resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { train: 200, dev: 10, eval: 20 }
    }
}

impl DatasetConfig {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts { train: self.train, dev: self.dev, eval: self.eval }
    }
}

/// Circle-trajectory scene used when `beampattern` is given no manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircleConfig {
    pub duration: f64,
    pub points: usize,
    pub radius: f64,
}

impl Default for CircleConfig {
    fn default() -> Self {
        Self { duration: 6.0, points: 64, radius: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub freqs_hz: Vec<f64>,
    pub az_step_deg: f64,
    /// Main-lobe tolerance around the true azimuth.
    pub tolerance_deg: f64,
    /// Number of individual frames exported as pattern CSVs.
    pub export_frames: usize,
    pub circle: CircleConfig,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            freqs_hz: vec![1000.0, 2000.0],
            az_step_deg: 1.0,
            tolerance_deg: 15.0,
            export_frames: 4,
            circle: CircleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub op_threshold: f64,
    pub pipeline_threshold: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { op_threshold: 1e-4, pipeline_threshold: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Dataset seed; scene draws and the evaluation circle scene derive from it.
    pub seed: u64,
    pub scene: SceneSampler,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub eval: EvalParams,
    pub beampattern: BeamConfig,
    pub gradcheck: GradcheckConfig,
}

/// Recursively merges `over` into `base`; tables merge, everything else
/// replaces.
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

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> Value {
    match format!("v = {text}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => Value::String(text.to_string()),
    }
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(root: &mut Table, spec: &str) -> anyhow::Result<()> {
    let (key, value) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = entry.as_table_mut().ok_or_else(|| anyhow!("`{p}` in `{key}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl CliConfig {
    /// Defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut root = Table::try_from(CliConfig::default()).context("serialising defaults")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let user: Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut root, user);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: CliConfig = Value::Table(root).try_into().context("invalid configuration")?;
        cfg.training.validate()?;
        cfg.eval.stft.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the fully resolved configuration next to a run's outputs and
    /// returns its digest.
    pub fn write_snapshot(&self, dir: &Path) -> anyhow::Result<String> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = self.to_toml()?;
        std::fs::write(dir.join(SNAPSHOT_FILE), &text)?;
        Ok(tvbf_core::scene::config_digest(&text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = CliConfig::resolve(None, &[]).unwrap();
        assert_eq!(cfg, CliConfig::default());
        let back: CliConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = ["training.lr=1e-4", "eval.systems=[\"tiv\", \"att\"]", "training.net.d_model = 16", "seed=9"];
        let cfg = CliConfig::resolve(None, &o.map(String::from)).unwrap();
        assert_eq!(cfg.training.lr, 1e-4);
        assert_eq!(cfg.training.net.d_model, 16);
        assert_eq!(cfg.eval.systems.len(), 2);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.training.batch_size, TrainingConfig::default().batch_size);
    }

    #[test]
    fn bare_strings_are_accepted() {
        let cfg = CliConfig::resolve(None, &["training.manifest=data/train.manifest".into()]).unwrap();
        assert_eq!(cfg.training.manifest.unwrap(), Path::new("data/train.manifest"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(CliConfig::resolve(None, &["training.lrr=1".into()]).is_err());
        assert!(CliConfig::resolve(None, &["nope=1".into()]).is_err());
        assert!(CliConfig::resolve(None, &["training.lr".into()]).is_err());
        assert!(CliConfig::resolve(None, &["training.lr=-1".into()]).is_err());
        assert!(CliConfig::resolve(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 4\n[training]\nlr = 0.01\nbatch_size = 3\n").unwrap();
        let cfg = CliConfig::resolve(Some(&path), &["training.lr=0.02".into()]).unwrap();
        assert_eq!((cfg.seed, cfg.training.lr, cfg.training.batch_size), (4, 0.02, 3));
        std::fs::write(&path, "[training]\nbogus = 1\n").unwrap();
        assert!(CliConfig::resolve(Some(&path), &[]).is_err());
    }
}
