//! Training configuration, presets and TOML loading with `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::{EpisodeMode, SynthConfig};
use crate::error::{config_err, Error, Result};
use crate::features::{BackboneConfig, BackboneKind};
use crate::losses::{FocalConfig, SelectionConfig, SpatialKernel, TripletStrategy};
use crate::network::{validate_pyramid, FusionMode, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Pascal,
    Coco,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pascal" => Ok(Preset::Pascal),
            "coco" => Ok(Preset::Coco),
            "desk" => Ok(Preset::Desk),
            _ => Err(config_err!("unknown preset {s:?} (pascal, coco, desk)")),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Pascal => "pascal",
            Preset::Coco => "coco",
            Preset::Desk => "desk",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Folder,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub num_folds: usize,
    pub synth: SynthConfig,
    pub synth_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Folder,
            path: None,
            num_folds: 4,
            synth: SynthConfig::default(),
            synth_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PmlConfig {
    pub enabled: bool,
    pub strategy: TripletStrategy,
    pub num_triplets: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub start_epoch: usize,
    pub kernel: SpatialKernel,
    pub tau_fraction: f64,
}

impl Default for PmlConfig {
    fn default() -> Self {
        PmlConfig {
            enabled: true,
            strategy: TripletStrategy::Spat,
            num_triplets: 20,
            alpha: 1.0,
            lambda: 0.4,
            start_epoch: 5,
            kernel: SpatialKernel::Exponential,
            tau_fraction: 0.1,
        }
    }
}

impl PmlConfig {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            num_triplets: self.num_triplets,
            strategy: self.strategy,
            kernel: self.kernel,
            tau_fraction: self.tau_fraction,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    /// Rescales the summed gradient to at most this global L2 norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_deg: f64,
    pub mirror_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            scale_min: 0.9,
            scale_max: 1.1,
            rotation_deg: 10.0,
            mirror_prob: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 1000,
            runs: 5,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Preset,
    pub dataset: DatasetConfig,
    pub fold_id: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub scales: usize,
    pub relation_groups: usize,
    pub episode_mode: EpisodeMode,
    pub fusion: FusionMode,
    pub use_as: bool,
    pub use_am: bool,
    pub pml: PmlConfig,
    pub focal: FocalConfig,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub epochs: usize,
    /// Iterations per epoch; defaults to the training-split image count
    /// divided by the batch size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iters_per_epoch: Option<usize>,
    /// Episodes per iteration; their losses are averaged.
    pub batch_size: usize,
    /// When set, training cycles through this many fixed episodes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episode_pool: Option<usize>,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub input_size: usize,
    pub output_dir: PathBuf,
    /// Write an intermediate checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: usize,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Pascal)
    }
}

impl TrainConfig {
    pub fn preset(p: Preset) -> TrainConfig {
        let base = TrainConfig {
            preset: p,
            dataset: DatasetConfig::default(),
            fold_id: 0,
            n_way: 2,
            k_shot: 1,
            scales: 4,
            relation_groups: 4,
            episode_mode: EpisodeMode::Any,
            fusion: FusionMode::AddConcat,
            use_as: true,
            use_am: true,
            pml: PmlConfig::default(),
            focal: FocalConfig::default(),
            optimizer: OptimizerConfig::default(),
            augment: AugmentConfig::default(),
            epochs: 200,
            iters_per_epoch: None,
            batch_size: 4,
            episode_pool: None,
            seed: 0,
            backbone: BackboneConfig::default(),
            input_size: 473,
            output_dir: PathBuf::from("runs/mfnet"),
            checkpoint_every: 0,
            eval: EvalConfig::default(),
        };
        match p {
            Preset::Pascal => base,
            Preset::Coco => TrainConfig {
                epochs: 50,
                batch_size: 8,
                optimizer: OptimizerConfig {
                    lr: 0.005,
                    ..base.optimizer
                },
                pml: PmlConfig {
                    start_epoch: 1,
                    ..base.pml
                },
                eval: EvalConfig {
                    episodes: 10_000,
                    ..base.eval
                },
                ..base
            },
            Preset::Desk => TrainConfig {
                dataset: DatasetConfig {
                    kind: DatasetKind::Synthetic,
                    path: None,
                    num_folds: 4,
                    synth: SynthConfig {
                        num_classes: 8,
                        images_per_class: 16,
                        height: 192,
                        width: 192,
                        co_occurrence: 0.6,
                        min_radius: 0.25,
                        max_radius: 0.4,
                    },
                    synth_seed: 7,
                },
                epochs: 10,
                iters_per_epoch: Some(30),
                batch_size: 8,
                episode_pool: Some(8),
                optimizer: OptimizerConfig {
                    lr: 0.2,
                    clip_norm: Some(0.5),
                    ..base.optimizer
                },
                pml: PmlConfig {
                    start_epoch: 2,
                    lambda: 0.001,
                    ..base.pml
                },
                augment: AugmentConfig {
                    enabled: false,
                    ..base.augment
                },
                backbone: BackboneConfig {
                    kind: BackboneKind::TinyRandom,
                    frozen: true,
                    output_channels: 32,
                    weights: None,
                },
                input_size: 192,
                output_dir: PathBuf::from("runs/desk"),
                eval: EvalConfig {
                    episodes: 50,
                    runs: 5,
                    seed: 1,
                },
                ..base
            },
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_way: self.n_way,
            scales: self.scales,
            relation_groups: self.relation_groups,
            fusion: self.fusion,
            use_as: self.use_as,
            use_am: self.use_am,
            backbone: self.backbone.clone(),
            input_size: self.input_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(config_err!("{name} must be positive, got {v}"))
            }
        };
        let non_negative = |v: f64, name: &str| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(config_err!("{name} must be >= 0, got {v}"))
            }
        };
        if self.k_shot == 0 {
            return Err(config_err!("k_shot must be at least 1"));
        }
        if self.dataset.num_folds == 0 || self.fold_id >= self.dataset.num_folds {
            return Err(config_err!(
                "fold_id {} outside 0..{}",
                self.fold_id,
                self.dataset.num_folds
            ));
        }
        if self.dataset.kind == DatasetKind::Folder && self.dataset.path.is_none() {
            return Err(config_err!("dataset.path is required for folder datasets"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be at least 1"));
        }
        if self.iters_per_epoch == Some(0) || self.episode_pool == Some(0) {
            return Err(config_err!("iters_per_epoch and episode_pool must be at least 1 when set"));
        }
        positive(self.optimizer.lr, "optimizer.lr")?;
        positive(self.optimizer.poly_power, "optimizer.poly_power")?;
        non_negative(self.optimizer.weight_decay, "optimizer.weight_decay")?;
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(config_err!("optimizer.momentum must lie in [0, 1)"));
        }
        non_negative(self.pml.alpha, "pml.alpha")?;
        non_negative(self.pml.lambda, "pml.lambda")?;
        positive(self.pml.tau_fraction, "pml.tau_fraction")?;
        self.focal.validate()?;
        let a = &self.augment;
        positive(a.scale_min, "augment.scale_min")?;
        if a.scale_max < a.scale_min || !a.scale_max.is_finite() {
            return Err(config_err!("augment.scale_max must be >= augment.scale_min"));
        }
        non_negative(a.rotation_deg, "augment.rotation_deg")?;
        if !(0.0..=1.0).contains(&a.mirror_prob) {
            return Err(config_err!("augment.mirror_prob must lie in [0, 1]"));
        }
        if self.eval.runs == 0 || self.eval.episodes == 0 {
            return Err(config_err!("eval.runs and eval.episodes must be at least 1"));
        }
        let m = self.model_config();
        m.validate()?;
        validate_pyramid(&m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("serializing config: {e}"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config is serializable")
    }

    pub fn from_json(s: &str) -> Result<TrainConfig> {
        serde_json::from_str(s).map_err(|e| config_err!("embedded config: {e}"))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_override(s: &str) -> Result<toml::Table> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| config_err!("override {s:?} is not key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err!("override {s:?} has an empty key"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut out = toml::Table::new();
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = &mut out;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .expect("fresh table");
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(out)
}

/// Parses config text plus overrides on top of the selected preset.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<TrainConfig> {
    let mut layers = vec![toml::from_str::<toml::Table>(text).map_err(|e| config_err!("{e}"))?];
    for o in overrides {
        layers.push(parse_override(o)?);
    }
    let mut preset = Preset::Pascal;
    for l in &layers {
        if let Some(v) = l.get("preset") {
            preset = v
                .as_str()
                .ok_or_else(|| config_err!("preset must be a string"))?
                .parse()?;
        }
    }
    let mut table =
        toml::Table::try_from(TrainConfig::preset(preset)).map_err(|e| config_err!("{e}"))?;
    for l in layers {
        merge(&mut table, l);
    }
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| config_err!("{}", e.message()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file (or only the overrides when `path` is `None`).
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| config_err!("reading {}: {e}", p.display()))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pascal_defaults() {
        let c = TrainConfig::preset(Preset::Pascal);
        assert_eq!(c.input_size, 473);
        assert_eq!(c.scales, 4);
        assert_eq!(c.backbone.output_channels, 256);
        assert_eq!((c.pml.alpha, c.pml.lambda, c.pml.num_triplets), (1.0, 0.4, 20));
        assert_eq!(c.relation_groups, 4);
        assert_eq!((c.optimizer.momentum, c.optimizer.weight_decay), (0.9, 1e-4));
        assert_eq!(c.optimizer.poly_power, 0.9);
        assert_eq!((c.epochs, c.optimizer.lr, c.batch_size, c.pml.start_epoch), (200, 0.0025, 4, 5));
    }

    #[test]
    fn coco_preset() {
        let c = TrainConfig::preset(Preset::Coco);
        assert_eq!((c.epochs, c.optimizer.lr, c.batch_size, c.pml.start_epoch), (50, 0.005, 8, 1));
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "preset = \"desk\"\npml.lambda = 0.25\nfusion = \"C+A\"\n";
        let c = parse_config(text, &["optimizer.lr=0.5".into(), "episode_mode=all".into()]).unwrap();
        assert_eq!(c.preset, Preset::Desk);
        assert_eq!(c.pml.lambda, 0.25);
        assert_eq!(c.fusion, FusionMode::ConcatAdd);
        assert_eq!(c.optimizer.lr, 0.5);
        assert_eq!(c.episode_mode, EpisodeMode::All);
        assert_eq!(c.input_size, 192);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1\npreset = \"desk\"", "preset = \"desk\"\npml.nope = 2"] {
            assert!(matches!(parse_config(text, &[]), Err(Error::Config(_))));
        }
        assert!(parse_config("preset = \"desk\"", &["optimizer.lrr=1".into()]).is_err());
    }

    #[test]
    fn folder_needs_path() {
        assert!(parse_config("", &[]).is_err());
        assert!(parse_config("dataset.path = \"/data/voc\"", &[]).is_ok());
    }

    #[test]
    fn round_trips_through_toml_and_json() {
        let c = TrainConfig::preset(Preset::Desk);
        assert_eq!(parse_config(&c.to_toml().unwrap(), &[]).unwrap(), c);
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
