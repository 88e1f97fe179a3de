use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataio::{Scenario, SplitSpec};
use crate::dehaze::{DehazeTrainConfig, DiscriminatorConfig, GeneratorConfig};
use crate::disturb::{DistortionParams, SyntheticSpec, Trajectory, TurbidityParams};
use crate::error::{Error, Result};
use crate::eval::{CommandProbe, RotationError};
use crate::vionet::VioConfig;

/// Generated sequences used when no dataset root is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub sequences: usize,
    /// seconds per sequence
    pub duration: f64,
    pub frame_rate_hz: f64,
    pub imu_rate_hz: f64,
    pub width: usize,
    pub height: usize,
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub timing_jitter: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self {
            sequences: 3,
            duration: 4.0,
            frame_rate_hz: 20.0,
            imu_rate_hz: 200.0,
            width: 64,
            height: 32,
            gyro_noise: 0.0,
            accel_noise: 0.0,
            timing_jitter: 0.0,
        }
    }
}

impl SyntheticSection {
    pub fn sequence_id(i: usize) -> String {
        format!("syn{i:02}")
    }

    /// Clean specs cycling through line, circle, square and wander paths.
    pub fn specs(&self, seed: u64) -> Vec<SyntheticSpec> {
        (0..self.sequences)
            .map(|i| {
                let k = i as f64;
                let trajectory = match i % 4 {
                    0 => Trajectory::Line {
                        start: [0.0, 0.0, 2.0],
                        velocity: [0.4 + 0.05 * k, 0.1, 0.0],
                        yaw: 0.2 * k,
                    },
                    1 => Trajectory::Circle {
                        center: [0.0, 0.0, 2.2],
                        radius: 1.5 + 0.1 * k,
                        angular_rate: 0.3,
                    },
                    2 => Trajectory::Square {
                        side: 1.5,
                        leg_time: 1.5,
                        turn_time: 1.0,
                        altitude: 2.0,
                    },
                    _ => Trajectory::Wander {
                        speed: 0.4,
                        amplitude: 0.2,
                        period: 2.5,
                        yaw_amplitude: 0.3,
                        tilt_amplitude: 0.1,
                        altitude: 2.0,
                        phase: 0.5 * k,
                    },
                };
                SyntheticSpec {
                    sequence_id: Self::sequence_id(i),
                    trajectory,
                    duration: self.duration,
                    frame_rate_hz: self.frame_rate_hz,
                    imu_rate_hz: self.imu_rate_hz,
                    width: self.width,
                    height: self.height,
                    texture_seed: seed.wrapping_mul(31).wrapping_add(i as u64 + 1),
                    gyro_noise: self.gyro_noise,
                    accel_noise: self.accel_noise,
                    timing_jitter: self.timing_jitter,
                    seed: seed.wrapping_add(1000 + i as u64),
                    ..SyntheticSpec::default()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbSection {
    pub turbidity: TurbidityParams,
    pub distortion: DistortionParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DehazeSection {
    pub enabled: bool,
    /// Pretrained generator; training is skipped when set.
    pub weights: Option<PathBuf>,
    /// Also train and score the network without dehazing.
    pub compare_without: bool,
    /// Training pairs drawn (evenly spaced) from each training sequence.
    pub pairs_per_sequence: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: DehazeTrainConfig,
}

impl Default for DehazeSection {
    fn default() -> Self {
        Self {
            enabled: true,
            weights: None,
            compare_without: true,
            pairs_per_sequence: 16,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            train: DehazeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub rotation_error: RotationError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Directory holding one sequence directory per id; synthetic data when
    /// absent.
    pub dataset_root: Option<PathBuf>,
    #[serde(rename = "scenario")]
    pub scenarios: Vec<Scenario>,
    /// Harbour split for real data; for synthetic data the last sequence
    /// tests and the rest train.
    pub split: Option<SplitSpec>,
    pub synthetic: SyntheticSection,
    pub disturb: DisturbSection,
    pub dehaze: DehazeSection,
    pub vio: VioConfig,
    pub eval: EvalSection,
    pub probe: Option<CommandProbe>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_root: None,
            scenarios: Scenario::ALL.to_vec(),
            split: None,
            synthetic: SyntheticSection::default(),
            disturb: DisturbSection::default(),
            dehaze: DehazeSection::default(),
            vio: VioConfig::default(),
            eval: EvalSection::default(),
            probe: None,
            seed: None,
            deterministic: true,
            output_dir: PathBuf::from("runs/duvio"),
        }
    }
}

impl ExperimentConfig {
    pub fn resolved_split(&self) -> SplitSpec {
        if let Some(s) = &self.split {
            return s.clone();
        }
        if self.dataset_root.is_some() {
            return SplitSpec::default();
        }
        let n = self.synthetic.sequences;
        let ids: Vec<String> = (0..n).map(SyntheticSection::sequence_id).collect();
        SplitSpec {
            train: ids[..n.saturating_sub(1)].to_vec(),
            val: Vec::new(),
            test: ids[n.saturating_sub(1)..].to_vec(),
            ..SplitSpec::default()
        }
    }

    /// Semantic checks that do not depend on how the config was parsed.
    pub fn problems(&self) -> Vec<String> {
        let mut p = self.vio.problems();
        if self.scenarios.is_empty() {
            p.push("scenario list is empty".into());
        }
        if self.dataset_root.is_none() {
            if self.synthetic.sequences < 2 {
                p.push("synthetic.sequences must be at least 2".into());
            }
            if self.synthetic.duration <= 0.0 {
                p.push("synthetic.duration must be positive".into());
            }
        }
        if self.deterministic && self.seed.is_none() {
            // filled with 0 by the loader; a hand-built config must set it
            p.push("seed must be set when deterministic is on".into());
        }
        if self.dehaze.enabled && self.dehaze.pairs_per_sequence == 0 && self.dehaze.weights.is_none() {
            p.push("dehaze.pairs_per_sequence must be positive".into());
        }
        if let Err(e) = self.dehaze.generator.validate() {
            p.push(format!("dehaze.generator: {e}"));
        }
        if let Err(e) = self.dehaze.discriminator.validate() {
            p.push(format!("dehaze.discriminator: {e}"));
        }
        let split = self.resolved_split();
        if split.train.is_empty() {
            p.push("split.train is empty".into());
        }
        if split.test.is_empty() {
            p.push("split.test is empty".into());
        }
        if !(split.fraction > 0.0 && split.fraction <= 1.0) {
            p.push(format!("split.fraction {} outside (0, 1]", split.fraction));
        }
        if let Some(root) = &self.dataset_root {
            if !root.is_dir() {
                p.push(format!("dataset_root {} does not exist", root.display()));
            } else {
                for id in split.train.iter().chain(&split.val).chain(&split.test) {
                    if !root.join(id).exists() {
                        p.push(format!("sequence `{id}` not found under {}", root.display()));
                    }
                }
            }
        } else {
            let known: Vec<String> = (0..self.synthetic.sequences).map(SyntheticSection::sequence_id).collect();
            for id in split.train.iter().chain(&split.val).chain(&split.test) {
                if !known.contains(id) {
                    p.push(format!("sequence `{id}` is not one of the synthetic ids {known:?}"));
                }
            }
        }
        if let Some(w) = &self.dehaze.weights {
            if !w.is_file() {
                p.push(format!("dehaze.weights {} does not exist", w.display()));
            }
        }
        p
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config serialization: {e}")))
    }
}

/// `base` with every key of `user` written over it. Tables carrying a
/// `kind` tag replace the base table outright.
fn overlay(base: toml::Value, user: &toml::Value) -> toml::Value {
    match (base, user) {
        (toml::Value::Table(mut b), toml::Value::Table(u)) if !u.contains_key("kind") => {
            for (k, v) in u {
                let merged = match b.remove(k) {
                    Some(old) => overlay(old, v),
                    None => v.clone(),
                };
                b.insert(k.clone(), merged);
            }
            toml::Value::Table(b)
        }
        (_, u) => u.clone(),
    }
}

/// Keys present in `user` but absent from the canonical form of the parsed
/// value.
fn unknown_keys(user: &toml::Value, canonical: &toml::Value, path: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(u), toml::Value::Table(c)) = (user, canonical) {
        for (k, v) in u {
            let p = format!("{path}.{k}");
            match c.get(k) {
                Some(cv) => unknown_keys(v, cv, &p, out),
                None => out.push(format!("unknown key `{p}`")),
            }
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Option<toml::Value> {
    toml::Value::try_from(v).ok()
}

/// Parses `value` over the current contents of `slot`, recording problems.
fn assign<T: Serialize + DeserializeOwned>(slot: &mut T, key: &str, value: &toml::Value, errors: &mut Vec<String>) {
    let merged = match to_value(slot) {
        Some(base) => overlay(base, value),
        None => value.clone(),
    };
    match merged.try_into::<T>() {
        Ok(parsed) => {
            if let Some(c) = to_value(&parsed) {
                unknown_keys(value, &c, key, errors);
            }
            *slot = parsed;
        }
        Err(e) => errors.push(format!("{key}: {}", e.message())),
    }
}

fn assign_opt<T: Serialize + DeserializeOwned + Default>(
    slot: &mut Option<T>,
    key: &str,
    value: &toml::Value,
    errors: &mut Vec<String>,
) {
    let mut inner = slot.take().unwrap_or_default();
    let before = errors.len();
    assign(&mut inner, key, value, errors);
    if errors.len() == before {
        *slot = Some(inner);
    }
}

fn parse_scenarios(value: &toml::Value, errors: &mut Vec<String>) -> Vec<Scenario> {
    let items: Vec<&toml::Value> = match value {
        toml::Value::Array(a) => a.iter().collect(),
        v => vec![v],
    };
    let mut out = Vec::new();
    for item in items {
        match item.as_str().map(str::parse::<Scenario>) {
            Some(Ok(s)) => {
                if !out.contains(&s) {
                    out.push(s)
                }
            }
            Some(Err(e)) => errors.push(format!("scenario: {e}")),
            None => errors.push(format!("scenario: expected a string, got {item}")),
        }
    }
    out
}

/// Builds a config from TOML text. Omitted keys take their defaults; every
/// problem found is reported, not just the first.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
    let mut cfg = ExperimentConfig::default();
    let mut errors = Vec::new();
    for (key, value) in &table {
        let e = &mut errors;
        match key.as_str() {
            "dataset_root" => {
                let mut p: Option<PathBuf> = None;
                assign_opt(&mut p, key, value, e);
                cfg.dataset_root = p;
            }
            "scenario" => cfg.scenarios = parse_scenarios(value, e),
            "split" => {
                // lists not named in the table are empty, not the harbour default
                let mut split = SplitSpec {
                    train: Vec::new(),
                    val: Vec::new(),
                    test: Vec::new(),
                    ..SplitSpec::default()
                };
                let before = e.len();
                assign(&mut split, key, value, e);
                if e.len() == before {
                    cfg.split = Some(split);
                }
            }
            "synthetic" => assign(&mut cfg.synthetic, key, value, e),
            "disturb" => assign(&mut cfg.disturb, key, value, e),
            "dehaze" => assign(&mut cfg.dehaze, key, value, e),
            "vio" => assign(&mut cfg.vio, key, value, e),
            "eval" => assign(&mut cfg.eval, key, value, e),
            "probe" => assign_opt(&mut cfg.probe, key, value, e),
            "seed" => match value.as_integer() {
                Some(v) if v >= 0 => cfg.seed = Some(v as u64),
                _ => e.push(format!("seed: expected a non-negative integer, got {value}")),
            },
            "deterministic" => assign(&mut cfg.deterministic, key, value, e),
            "output_dir" => assign(&mut cfg.output_dir, key, value, e),
            other => e.push(format!("unknown key `{other}`")),
        }
    }
    if cfg.deterministic && cfg.seed.is_none() {
        cfg.seed = Some(0);
    }
    errors.extend(cfg.problems());
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(errors))
    }
}

/// Reads and validates a config file.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
