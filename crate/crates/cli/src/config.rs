//! Run configuration: one TOML document with a section per stage, plus
//! `section.key=value` overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use mdm::data::CorruptionKind;
use mdm::features::FeatureConfig;
use mdm::metrics::Connectivity;
use mdm::pretrain::{LossKind, Method, PretrainConfig, Target};
use mdm::seghead::{SegHeadConfig, Stitch};
use mdm::unet::UNetConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_ENV: &str = "MDM_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const FROZEN_CONFIG: &str = "config.toml";
pub const VERSION_FILE: &str = "version.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    /// Output directory; relative paths are resolved against the output root.
    pub output_dir: Option<PathBuf>,
    pub unet: UNetSection,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub features: FeatureConfig,
    pub seghead: SegHeadConfig,
    pub metrics: MetricsSection,
    pub robustness: RobustnessSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 0,
            output_dir: None,
            unet: UNetSection::default(),
            data: DataSection::default(),
            pretrain: PretrainConfig::default(),
            features: FeatureConfig::default(),
            seghead: SegHeadConfig::default(),
            metrics: MetricsSection::default(),
            robustness: RobustnessSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetSection {
    /// `reference`, `desk` or `tiny`.
    pub preset: String,
    /// Full architecture; overrides the preset when present.
    pub custom: Option<UNetConfig>,
}

impl Default for UNetSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            custom: None,
        }
    }
}

impl UNetSection {
    pub fn resolve(&self) -> Result<UNetConfig> {
        match &self.custom {
            Some(c) => Ok(c.clone()),
            None => Ok(UNetConfig::preset(&self.preset)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub manifest: PathBuf,
    /// Name written into the `dataset` column of metrics files.
    pub name: String,
    /// Share of the labelled training split used by the head.
    pub fraction: f64,
    /// Sliding-window side at evaluation; `None` predicts whole images.
    pub window: Option<usize>,
    pub stitch: Stitch,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.toml"),
            name: "dataset".into(),
            fraction: 1.0,
            window: None,
            stitch: Stitch::LaterWins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Head seeds; each gets its own head and metrics rows.
    pub seeds: Vec<u64>,
    pub connectivity: Connectivity,
    /// Class whose connected components feed AJI.
    pub instance_class: u32,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            connectivity: Connectivity::Four,
            instance_class: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<usize>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::IMPLEMENTED.to_vec(),
            severities: (1..=mdm::data::MAX_SEVERITY).collect(),
        }
    }
}

/// Grid axes; an empty axis keeps the value from the base configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub method: Vec<Method>,
    pub loss: Vec<LossKind>,
    pub target: Vec<Target>,
    /// `0` means uniform sampling.
    pub fixed_t: Vec<usize>,
    /// Extraction timesteps; each entry is one cell (several values are concatenated).
    pub extract_t: Vec<Vec<usize>>,
    pub patch: Vec<usize>,
    pub iterations: Vec<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.resolve()?.validate()?;
        self.pretrain.validate()?;
        if !(self.data.fraction > 0.0 && self.data.fraction <= 1.0) {
            bail!("data.fraction must be in (0, 1], got {}", self.data.fraction);
        }
        if self.metrics.seeds.is_empty() {
            bail!("metrics.seeds must not be empty");
        }
        if let Some(k) = self.robustness.kinds.iter().find(|k| !k.is_implemented()) {
            bail!("corruption '{k}' is not implemented");
        }
        if let Some(s) = self.robustness.severities.iter().find(|&&s| s == 0 || s > mdm::data::MAX_SEVERITY) {
            bail!("robustness severity {s} outside 1..={}", mdm::data::MAX_SEVERITY);
        }
        Ok(())
    }

    /// Output directory of this run.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        match &self.output_dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => root.join(d),
            None => root.join(&self.run_id),
        }
    }

    /// Writes the resolved configuration and the code version into `dir`.
    pub fn freeze(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = toml::to_string_pretty(self)?;
        fs::write(dir.join(FROZEN_CONFIG), text)?;
        fs::write(
            dir.join(VERSION_FILE),
            format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        )?;
        Ok(())
    }
}

/// Sets `path = value` inside a TOML table, creating intermediate tables.
/// The value is parsed as a TOML literal and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{assignment}' is not of the form key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override key '{path}' has an empty component");
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("nonempty key path");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override '{path}': '{k}' is not a section"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Built-in configurations addressable by name.
const BUILTIN: &[(&str, &str)] = &[
    ("desk_mdm", include_str!("../configs/desk_mdm.toml")),
    ("desk_ddpm", include_str!("../configs/desk_ddpm.toml")),
    ("tiny_mdm", include_str!("../configs/tiny_mdm.toml")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

/// Parses a document, applies overrides and validates the result.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).context("parsing configuration")?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let config: RunConfig = toml::Value::Table(doc).try_into().context("invalid configuration")?;
    config.validate()?;
    Ok(config)
}

/// `source` is a file path or the name of a built-in configuration.
pub fn load_config(source: &str, overrides: &[String]) -> Result<RunConfig> {
    let text = match BUILTIN.iter().find(|(n, _)| *n == source) {
        Some((_, t)) => t.to_string(),
        None => fs::read_to_string(source).with_context(|| {
            format!("reading config '{source}' (built-ins: {})", builtin_names().join(", "))
        })?,
    };
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in builtin_names() {
            load_config(name, &[]).unwrap();
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = load_config(
            "desk_mdm",
            &[
                "pretrain.fixed_t=50".into(),
                "features.timesteps=[50, 150, 250]".into(),
                "unet.preset=tiny".into(),
                "pretrain.optimizer.lr=0.001".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.pretrain.fixed_t, Some(50));
        assert_eq!(c.features.timesteps, vec![50, 150, 250]);
        assert_eq!(c.unet.preset, "tiny");
        assert_eq!(c.pretrain.optimizer.lr, 1e-3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse_config("bogus = 1", &[]).is_err());
        assert!(parse_config("[pretrain]\nlearning_rate = 1.0", &[]).is_err());
        assert!(load_config("desk_mdm", &["seghead.width=3".into()]).is_err());
        assert!(load_config("desk_mdm", &["no_equals_sign".into()]).is_err());
    }

    #[test]
    fn infeasible_combinations_fail_validation() {
        assert!(load_config("desk_mdm", &["pretrain.target=\"noise\"".into()]).is_err());
        assert!(load_config("desk_mdm", &["data.fraction=0".into()]).is_err());
        assert!(load_config("desk_mdm", &["robustness.kinds=[\"fog\"]".into()]).is_err());
    }

    #[test]
    fn frozen_config_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let c = load_config("tiny_mdm", &["seed=3".into()]).unwrap();
        c.freeze(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(FROZEN_CONFIG)).unwrap();
        assert_eq!(parse_config(&text, &[]).unwrap(), c);
        assert!(dir.path().join(VERSION_FILE).exists());
    }
}
