//! Run configuration: line-based `key = value` files with dotted section
//! keys. Unknown keys are errors, not warnings, so typos cannot silently
//! fall back to defaults. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fundus_dqa::backbones::{ArchConfig, MicroDenseConfig, MicroEffConfig};
use fundus_dqa::data::{DegradationKind, SplitCounts, SyntheticConfig};
use fundus_dqa::error::{Error, Result};
use fundus_dqa::hierarchy::{
    HierarchyTrainConfig, Hyperparams, StageSetup, ThresholdGrid, UsableStagePolicy,
};
use fundus_dqa::QualityLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Dense,
    Eff,
}

impl BackboneKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(BackboneKind::Dense),
            "eff" => Some(BackboneKind::Eff),
            _ => None,
        }
    }

    pub fn arch(self, resolution: usize) -> ArchConfig {
        match self {
            BackboneKind::Dense => {
                ArchConfig::Dense(MicroDenseConfig { input_resolution: resolution, ..Default::default() })
            }
            BackboneKind::Eff => {
                ArchConfig::Eff(MicroEffConfig { input_resolution: resolution, ..Default::default() })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    pub data_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub backbones: [BackboneKind; 3],
    pub flat_backbone: BackboneKind,
    pub thresholds: [f64; 3],
    pub stage_epochs: [Option<usize>; 3],
    pub stage_learning_rates: [Option<f32>; 3],
    pub usable_policy: UsableStagePolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub augment_flips: bool,
    pub synth_train: SplitCounts,
    pub synth_test: SplitCounts,
    pub degradations: Vec<DegradationKind>,
    pub explain_alpha: f32,
    pub explain_floor: f32,
    pub scenario_target: QualityLabel,
    pub scenario_band: (f64, f64),
    pub scenario_grid: ThresholdGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            resolution: 64,
            data_dir: None,
            model_dir: None,
            backbones: [BackboneKind::Dense, BackboneKind::Dense, BackboneKind::Eff],
            flat_backbone: BackboneKind::Dense,
            thresholds: [0.5; 3],
            stage_epochs: [None; 3],
            stage_learning_rates: [None; 3],
            usable_policy: UsableStagePolicy::Exclude,
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            augment_flips: true,
            synth_train: SplitCounts::balanced(300),
            synth_test: SplitCounts::balanced(100),
            degradations: DegradationKind::ALL.to_vec(),
            explain_alpha: 0.5,
            explain_floor: 0.15,
            scenario_target: QualityLabel::Unusable,
            scenario_band: (0.0, 1.0),
            scenario_grid: ThresholdGrid::uniform(vec![0.3, 0.4, 0.5, 0.6, 0.7]),
        }
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config(format!("line {line}: {}", msg.into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err(line_no, format!("expected `key = value`, got {raw:?}")))?;
            let key = key.trim();
            let value = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), line_no) {
                return Err(config_err(line_no, format!("key {key} already set on line {prev}")));
            }
            cfg.apply(key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let bad = |what: &str| config_err(line, format!("invalid {what} value {value:?}"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "resolution" => self.resolution = value.parse().map_err(|_| bad("resolution"))?,
            "data.dir" => self.data_dir = Some(PathBuf::from(value)),
            "model.dir" => self.model_dir = Some(PathBuf::from(value)),
            "model1.backbone" => self.backbones[0] = BackboneKind::parse(value).ok_or_else(|| bad("backbone"))?,
            "model2.backbone" => self.backbones[1] = BackboneKind::parse(value).ok_or_else(|| bad("backbone"))?,
            "model3.backbone" => self.backbones[2] = BackboneKind::parse(value).ok_or_else(|| bad("backbone"))?,
            "flat.backbone" => self.flat_backbone = BackboneKind::parse(value).ok_or_else(|| bad("backbone"))?,
            "model1.threshold" => self.thresholds[0] = value.parse().map_err(|_| bad("threshold"))?,
            "model1.epochs" => self.stage_epochs[0] = Some(value.parse().map_err(|_| bad("epochs"))?),
            "model2.epochs" => self.stage_epochs[1] = Some(value.parse().map_err(|_| bad("epochs"))?),
            "model3.epochs" => self.stage_epochs[2] = Some(value.parse().map_err(|_| bad("epochs"))?),
            "model1.learning_rate" => {
                self.stage_learning_rates[0] = Some(value.parse().map_err(|_| bad("learning rate"))?)
            }
            "model2.learning_rate" => {
                self.stage_learning_rates[1] = Some(value.parse().map_err(|_| bad("learning rate"))?)
            }
            "model3.learning_rate" => {
                self.stage_learning_rates[2] = Some(value.parse().map_err(|_| bad("learning rate"))?)
            }
            "model2.threshold" => self.thresholds[1] = value.parse().map_err(|_| bad("threshold"))?,
            "model3.threshold" => self.thresholds[2] = value.parse().map_err(|_| bad("threshold"))?,
            "stage1.usable_policy" => {
                self.usable_policy =
                    UsableStagePolicy::parse(value).ok_or_else(|| bad("usable policy"))?
            }
            "train.epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
            "train.batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch size"))?,
            "train.learning_rate" => self.learning_rate = value.parse().map_err(|_| bad("learning rate"))?,
            "train.weight_decay" => self.weight_decay = value.parse().map_err(|_| bad("weight decay"))?,
            "train.augment" => {
                self.augment_flips = match value {
                    "on" | "true" => true,
                    "off" | "false" => false,
                    _ => return Err(bad("augment flag")),
                }
            }
            "synth.train.good" => self.synth_train.good = value.parse().map_err(|_| bad("count"))?,
            "synth.train.usable" => self.synth_train.usable = value.parse().map_err(|_| bad("count"))?,
            "synth.train.unusable" => self.synth_train.unusable = value.parse().map_err(|_| bad("count"))?,
            "synth.test.good" => self.synth_test.good = value.parse().map_err(|_| bad("count"))?,
            "synth.test.usable" => self.synth_test.usable = value.parse().map_err(|_| bad("count"))?,
            "synth.test.unusable" => self.synth_test.unusable = value.parse().map_err(|_| bad("count"))?,
            "synth.degradations" => {
                let kinds: Option<Vec<DegradationKind>> =
                    value.split(',').map(|p| DegradationKind::parse(p.trim())).collect();
                self.degradations = kinds.ok_or_else(|| bad("degradation list"))?;
            }
            "explain.alpha" => self.explain_alpha = value.parse().map_err(|_| bad("alpha"))?,
            "explain.floor" => self.explain_floor = value.parse().map_err(|_| bad("floor"))?,
            "scenario.target" => {
                self.scenario_target = QualityLabel::parse(value).ok_or_else(|| bad("target class"))?
            }
            "scenario.band" => {
                let (lo, hi) = value
                    .split_once(',')
                    .ok_or_else(|| bad("band (expected lo,hi)"))?;
                self.scenario_band = (
                    lo.trim().parse().map_err(|_| bad("band low"))?,
                    hi.trim().parse().map_err(|_| bad("band high"))?,
                );
            }
            "scenario.grid.model1" => self.scenario_grid.model1 = parse_f64_list(value).ok_or_else(|| bad("grid"))?,
            "scenario.grid.model2" => self.scenario_grid.model2 = parse_f64_list(value).ok_or_else(|| bad("grid"))?,
            "scenario.grid.model3" => self.scenario_grid.model3 = parse_f64_list(value).ok_or_else(|| bad("grid"))?,
            unknown => {
                return Err(config_err(line, format!("unknown key {unknown:?}")));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config(format!("resolution {} below minimum 8", self.resolution)));
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            if !(*t > 0.0 && *t < 1.0) {
                return Err(Error::Config(format!(
                    "model{}.threshold {t} outside (0, 1)",
                    i + 1
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.explain_alpha) {
            return Err(Error::Config(format!("explain.alpha {} outside [0, 1]", self.explain_alpha)));
        }
        if !(0.0..1.0).contains(&self.explain_floor) {
            return Err(Error::Config(format!("explain.floor {} outside [0, 1)", self.explain_floor)));
        }
        if self.scenario_band.0 > self.scenario_band.1 {
            return Err(Error::Config("scenario.band low exceeds high".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hierarchy_train_config(&self) -> HierarchyTrainConfig {
        let stage = |i: usize| StageSetup {
            config: self.backbones[i].arch(self.resolution),
            threshold: self.thresholds[i],
            epochs: self.stage_epochs[i],
            learning_rate: self.stage_learning_rates[i],
        };
        HierarchyTrainConfig {
            stages: [stage(0), stage(1), stage(2)],
            hyperparams: self.hyperparams(),
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            augment_flips: self.augment_flips,
            stage1_usable_policy: self.usable_policy,
        }
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            resolution: self.resolution,
            train: self.synth_train,
            test: self.synth_test,
            degradations: self.degradations.clone(),
            seed: self.seed,
        }
    }

    pub fn require_data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .ok_or_else(|| Error::Config("data.dir is required for this command".into()))
    }

    pub fn require_model_dir(&self) -> Result<&Path> {
        self.model_dir
            .as_deref()
            .ok_or_else(|| Error::Config("model.dir is required for this command".into()))
    }
}

fn parse_f64_list(value: &str) -> Option<Vec<f64>> {
    value.split(',').map(|p| p.trim().parse::<f64>().ok()).collect()
}
