//! Run configuration: built-in defaults, overridden by a `key = value` file,
//! overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use cpr::{FeatureMode, PoseKind, PoseModel, SynthConfig, TrainConfig};

/// Every recognised key, in the order help text lists them.
pub const KEYS: &[(&str, &str)] = &[
    ("kind", "pose family: similarity or landmark"),
    ("reference_scale", "pixel half-extent of the reference square (default: object_scale for similarity, object_scale/4 for landmark)"),
    ("n", "number of synthetic samples"),
    ("width", "image width in pixels"),
    ("height", "image height in pixels"),
    ("landmarks", "template landmark count"),
    ("blob_sigma", "standard deviation of rendered blobs"),
    ("noise_sigma", "standard deviation of pixel noise"),
    ("translation_range", "half-width of the translation range in pixels"),
    ("scale_min", "smallest synthetic scale"),
    ("scale_max", "largest synthetic scale"),
    ("angle_range", "half-width of the angle range in radians"),
    ("object_scale", "template half-extent in pixels at unit scale"),
    ("template_seed", "seed of the landmark template"),
    ("seed", "RNG seed"),
    ("stages", "number of cascade stages"),
    ("lambda", "ridge strength"),
    ("n_aug", "starting poses per training sample"),
    ("init_spread", "multiplier on the starting-pose perturbation"),
    ("epochs", "fine-tuning epochs"),
    ("batch_size", "samples per SGD step"),
    ("lr", "learning rate"),
    ("momentum", "SGD momentum in [0, 1)"),
    ("lr_decay", "per-epoch learning-rate factor"),
    ("grad_clip", "per-block gradient L2 bound (inf disables)"),
    ("num_points", "reference points per model"),
    ("mode", "feature mode: raw or diff"),
    ("num_pairs", "difference pairs in diff mode"),
    ("blur_sigma", "pre-blur applied before feature extraction (0 disables)"),
    ("feature_seed", "seed for reference points (default: seed)"),
    ("draws", "gradient-check draws"),
    ("data", "dataset directory"),
    ("out", "output path (dataset directory or model file)"),
    ("model", "input model file"),
    ("metrics", "per-sample error CSV written by eval"),
    ("history", "per-epoch loss CSV written by finetune"),
    ("workers", "worker threads (default: available parallelism)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub kind: KindChoice,
    pub reference_scale: Option<f64>,
    pub feature_seed: Option<u64>,
    pub draws: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KindChoice {
    Similarity,
    Landmark,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            kind: KindChoice::Similarity,
            reference_scale: None,
            feature_seed: None,
            draws: 20,
            data: None,
            out: None,
            model: None,
            metrics: None,
            history: None,
            workers: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .trim()
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

impl RunConfig {
    /// Sets one key. Keys may use `_` or `-`.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let t = &mut self.train;
        let s = &mut self.synth;
        match key.as_str() {
            "kind" => {
                self.kind = match v {
                    "similarity" => KindChoice::Similarity,
                    "landmark" => KindChoice::Landmark,
                    _ => return Err(format!("kind must be similarity or landmark, got {v:?}")),
                }
            }
            "reference_scale" => self.reference_scale = Some(parse(&key, v)?),
            "n" => s.n = parse(&key, v)?,
            "width" => s.width = parse(&key, v)?,
            "height" => s.height = parse(&key, v)?,
            "landmarks" => s.landmarks = parse(&key, v)?,
            "blob_sigma" => s.blob_sigma = parse(&key, v)?,
            "noise_sigma" => s.noise_sigma = parse(&key, v)?,
            "translation_range" => s.translation_range = parse(&key, v)?,
            "scale_min" => s.scale_min = parse(&key, v)?,
            "scale_max" => s.scale_max = parse(&key, v)?,
            "angle_range" => s.angle_range = parse(&key, v)?,
            "object_scale" => s.object_scale = parse(&key, v)?,
            "template_seed" => s.template_seed = parse(&key, v)?,
            "seed" => {
                let seed = parse(&key, v)?;
                s.seed = seed;
                t.seed = seed;
            }
            "stages" => t.stages = parse(&key, v)?,
            "lambda" => t.lambda = parse(&key, v)?,
            "n_aug" => t.n_aug = parse(&key, v)?,
            "init_spread" => t.init_spread = parse(&key, v)?,
            "epochs" => t.epochs = parse(&key, v)?,
            "batch_size" => t.batch_size = parse(&key, v)?,
            "lr" => t.lr = parse(&key, v)?,
            "momentum" => t.momentum = parse(&key, v)?,
            "lr_decay" => t.lr_decay = parse(&key, v)?,
            "grad_clip" => t.grad_clip = parse(&key, v)?,
            "num_points" => t.features.num_points = parse(&key, v)?,
            "mode" => {
                t.features.mode = match v {
                    "raw" => FeatureMode::Raw,
                    "diff" => FeatureMode::Diff,
                    _ => return Err(format!("mode must be raw or diff, got {v:?}")),
                }
            }
            "num_pairs" => t.features.num_pairs = parse(&key, v)?,
            "blur_sigma" => t.features.blur_sigma = parse(&key, v)?,
            "feature_seed" => self.feature_seed = Some(parse(&key, v)?),
            "draws" => self.draws = parse(&key, v)?,
            "data" => self.data = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "model" => self.model = Some(PathBuf::from(v)),
            "metrics" => self.metrics = Some(PathBuf::from(v)),
            "history" => self.history = Some(PathBuf::from(v)),
            "workers" => self.workers = Some(parse(&key, v)?),
            _ => return Err(format!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file. `#` starts a
    /// comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            self.apply(k, v)
                .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        }
        Ok(())
    }

    /// Training config with the feature seed resolved.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.features.seed = self.feature_seed.unwrap_or(cfg.seed);
        cfg
    }

    /// Pose model used when generating a dataset.
    pub fn pose_model(&self) -> cpr::Result<PoseModel> {
        match self.kind {
            KindChoice::Similarity => PoseModel::new(
                PoseKind::Similarity,
                self.reference_scale.unwrap_or(self.synth.object_scale),
            ),
            KindChoice::Landmark => PoseModel::new(
                PoseKind::Landmark {
                    count: self.synth.landmarks,
                },
                self.reference_scale
                    .unwrap_or(self.synth.object_scale / 4.0),
            ),
        }
    }

    pub fn require<'a>(&self, field: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, String> {
        field
            .as_deref()
            .ok_or_else(|| format!("missing required option --{}", key.replace('_', "-")))
    }
}
