use std::fs;
use std::path::{Path, PathBuf};

use exlab_core::defense::detect::{Metric, Space};
use exlab_core::defense::reactive::WatermarkCheckConfig;
use exlab_core::extraction::AttackConfig;
use exlab_core::linear_eval::ProbeConfig;
use exlab_core::synthdata::{DatasetSpec, PoolMode};
use exlab_core::victim::{ServeConfig, SupervisedConfig, VictimConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    TrainVictim,
    Steal,
    LinearEval,
    DetectCalibrate,
    WatermarkVerify,
    DatasetInference,
    PoisonDemo,
    PowDemo,
    FullPipeline,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::TrainVictim => "train_victim",
            Scenario::Steal => "steal",
            Scenario::LinearEval => "linear_eval",
            Scenario::DetectCalibrate => "detect_calibrate",
            Scenario::WatermarkVerify => "watermark_verify",
            Scenario::DatasetInference => "dataset_inference",
            Scenario::PoisonDemo => "poison_demo",
            Scenario::PowDemo => "pow_demo",
            Scenario::FullPipeline => "full_pipeline",
        }
    }

    /// Scenarios that read a trained victim from `victim_checkpoint`.
    pub fn needs_victim(self) -> bool {
        matches!(
            self,
            Scenario::Steal
                | Scenario::DetectCalibrate
                | Scenario::WatermarkVerify
                | Scenario::DatasetInference
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub mode: PoolMode,
    pub size: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { mode: PoolMode::InDistribution, size: 1600 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    /// Test images used to build same/different pairs.
    pub images: usize,
    pub metric: Metric,
    pub space: Space,
    /// Fixed threshold; when absent the detector is calibrated to `max_fpr`.
    pub threshold: Option<f64>,
    pub max_fpr: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self { images: 400, metric: Metric::L2, space: Space::Projection, threshold: None, max_fpr: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkSection {
    pub check: WatermarkCheckConfig,
    /// The innocent comparison model trains with `seed + genuine_seed_offset`.
    pub genuine_seed_offset: u64,
}

impl Default for WatermarkSection {
    fn default() -> Self {
        Self { check: WatermarkCheckConfig::default(), genuine_seed_offset: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiSection {
    pub points: usize,
    pub n_aug: usize,
    pub supervised: SupervisedConfig,
}

impl Default for DiSection {
    fn default() -> Self {
        Self { points: 200, n_aug: 10, supervised: SupervisedConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonSection {
    pub instances: usize,
    pub epsilon: f64,
    pub target: usize,
    pub beta: f64,
    pub steps: usize,
}

impl Default for PoisonSection {
    fn default() -> Self {
        Self { instances: 20, epsilon: 0.5, target: 1, beta: 1.0, steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowSection {
    pub difficulties: Vec<u32>,
    pub trials: usize,
}

impl Default for PowSection {
    fn default() -> Self {
        Self { difficulties: vec![0, 4, 8, 12], trials: 50 }
    }
}

/// One experiment. Module `seed` fields are overwritten from the top-level
/// `seed` when the config is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Directory written by a `train_victim` run.
    #[serde(default)]
    pub victim_checkpoint: Option<PathBuf>,
    /// Encoder scored by `linear_eval`; the victim's encoder when absent.
    #[serde(default)]
    pub encoder_checkpoint: Option<PathBuf>,
    #[serde(default = "yes")]
    pub watermark_victim: bool,
    #[serde(default)]
    pub data: DatasetSpec,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub serve: ServeConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub watermark: WatermarkSection,
    #[serde(default)]
    pub di: DiSection,
    #[serde(default)]
    pub poison: PoisonSection,
    #[serde(default)]
    pub pow: PowSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            seed: 0,
            out_dir: default_out_dir(),
            victim_checkpoint: None,
            encoder_checkpoint: None,
            watermark_victim: true,
            data: DatasetSpec::default(),
            victim: VictimConfig::default(),
            probe: ProbeConfig::default(),
            serve: ServeConfig::default(),
            attack: AttackConfig::default(),
            pool: PoolConfig::default(),
            detect: DetectSection::default(),
            watermark: WatermarkSection::default(),
            di: DiSection::default(),
            poison: PoisonSection::default(),
            pow: PowSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::config(path, e.into_inner().message().trim())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| HarnessError::MissingFile {
            what: "config file".into(),
            path: path.to_path_buf(),
        })?;
        Self::from_toml(&text)
    }

    /// Pushes the top-level seed into every module and validates the result.
    pub fn resolve(mut self) -> Result<Self> {
        let s = self.seed;
        self.data.seed = s;
        self.victim.seed = s;
        self.probe.seed = s;
        self.serve.seed = s;
        self.attack.seed = s;
        self.di.supervised.seed = s;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let check = |path: &str, r: exlab_core::Result<()>| r.map_err(|e| HarnessError::config(path, e));
        check("data", self.data.validate())?;
        check("victim", self.victim.validate())?;
        check("serve", self.serve.validate())?;
        if self.pool.size == 0 {
            return Err(HarnessError::config("pool.size", "must be ≥ 1"));
        }
        if self.detect.images < 2 {
            return Err(HarnessError::config("detect.images", "need at least two images to form pairs"));
        }
        if !(0.0..=1.0).contains(&self.detect.max_fpr) {
            return Err(HarnessError::config("detect.max_fpr", "must lie in [0, 1]"));
        }
        if self.di.points == 0 || self.di.n_aug == 0 {
            return Err(HarnessError::config("di", "points and n_aug must be ≥ 1"));
        }
        if self.poison.instances == 0 {
            return Err(HarnessError::config("poison.instances", "must be ≥ 1"));
        }
        if self.pow.trials == 0 {
            return Err(HarnessError::config("pow.trials", "must be ≥ 1"));
        }
        if let Some(&bad) = self.pow.difficulties.iter().find(|&&d| d > 24) {
            return Err(HarnessError::config("pow.difficulties", format!("{bad} bits is beyond the demo's search budget")));
        }
        if self.scenario.needs_victim() && self.victim_checkpoint.is_none() {
            return Err(HarnessError::config(
                "victim_checkpoint",
                format!("scenario {} needs a trained victim", self.scenario.name()),
            ));
        }
        if self.scenario == Scenario::LinearEval && self.victim_checkpoint.is_none() && self.encoder_checkpoint.is_none() {
            return Err(HarnessError::config("encoder_checkpoint", "linear_eval needs an encoder or victim checkpoint"));
        }
        Ok(())
    }

    /// First 12 hex digits of SHA-256 over the config as JSON, output
    /// directory excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("out_dir");
        let digest = Sha256::digest(v.to_string().as_bytes());
        hex::encode(digest)[..12].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-{}", self.scenario.name(), self.hash()))
    }

    /// Returns a copy with the numeric field at dotted `path` set to `value`.
    pub fn with_override(&self, path: &str, value: &str) -> Result<Self> {
        if path.is_empty() {
            return Err(HarnessError::Usage("empty sweep axis".into()));
        }
        if path.ends_with(".seed") {
            return Err(HarnessError::config(path, "module seeds follow the top-level `seed`; sweep `seed` instead"));
        }
        let mut root = serde_json::to_value(self).expect("config serializes");
        let pointer = format!("/{}", path.replace('.', "/"));
        let slot = root
            .pointer_mut(&pointer)
            .ok_or_else(|| HarnessError::config(path, "no such field"))?;
        let parsed: f64 = value
            .trim()
            .parse()
            .map_err(|_| HarnessError::config(path, format!("`{value}` is not a number")))?;
        *slot = match slot {
            serde_json::Value::Number(n) if n.is_u64() || n.is_i64() => {
                if parsed.fract() != 0.0 || parsed < 0.0 {
                    return Err(HarnessError::config(path, format!("`{value}` is not a non-negative integer")));
                }
                serde_json::Value::from(parsed as u64)
            }
            serde_json::Value::Number(_) | serde_json::Value::Null => serde_json::Value::from(parsed),
            _ => return Err(HarnessError::config(path, "not a numeric field")),
        };
        serde_path_to_error::deserialize(root).map_err(|e| {
            let p = e.path().to_string();
            HarnessError::config(p, e.into_inner())
        })
    }
}
