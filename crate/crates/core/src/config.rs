//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Missing keys take the defaults below; unknown keys are errors.
//!
//! | key | default |
//! |-----|---------|
//! | `seed` | `0` |
//! | `out_dir` | `runs` |
//! | `data_dir` | `data` |
//! | `classes` | `10` |
//! | `sequences_per_class` | `60` |
//! | `frames_per_sequence` | `12` |
//! | `frame_height`, `frame_width` | `32` |
//! | `motion_mix` | `7:1:2` (press:slip:twist) |
//! | `noise_prefix_min`, `noise_prefix_max` | `1`, `3` |
//! | `split_ratio` | `7:2:1` |
//! | `variant` | `full-stam` |
//! | `heads` | `10` |
//! | `proj_dim` | `auto` (half the feature channels) |
//! | `backbone_channels` | `8,16,32` |
//! | `classifier_hidden` | `0` |
//! | `n` | `4` |
//! | `window` | `from_onset` |
//! | `learning_rate` | `0.01` |
//! | `momentum` | `0.9` |
//! | `batch_size` | `16` |
//! | `epochs` | `60` |
//! | `patience` | `10` |
//! | `ablation_variants` | `cnn-only,cnn+spatial,full-stam` |
//! | `ablation_lengths` | `2,3,4,5,6,7` |
//! | `ablation_windows` | `from_onset,from_start` |
//! | `ablation_seeds` | `0,1,2` |
//! | `query_token` | `0` |
//! | `top_k` | `3` |

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::DatasetManifest;
use crate::model::ModelConfig;
use crate::train::{AblationGrid, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub dataset: DatasetManifest,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationGrid,
    pub query_token: usize,
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: "runs".into(),
            data_dir: "data".into(),
            dataset: DatasetManifest::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationGrid::default(),
            query_token: 0,
            top_k: crate::explain::DEFAULT_TOP_K,
        }
    }
}

fn list<T: FromStr>(v: &str) -> Option<Vec<T>> {
    let items: Option<Vec<T>> = v.split(',').map(|s| s.trim().parse().ok()).collect();
    items.filter(|i| !i.is_empty())
}

fn ratio(v: &str) -> Option<[u32; 3]> {
    let parts: Option<Vec<u32>> = v.split(':').map(|s| s.trim().parse().ok()).collect();
    parts?.try_into().ok()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = RunConfig::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_err = |detail: String| ConfigError::Line { line: no + 1, detail };
            let (key, value) = line.split_once('=').ok_or_else(|| line_err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || line_err(format!("invalid value {value:?} for `{key}`"));
            macro_rules! set {
                ($field:expr) => {
                    $field = value.parse().map_err(|_| bad())?
                };
            }
            match key {
                "seed" => set!(c.seed),
                "out_dir" => c.out_dir = value.into(),
                "data_dir" => c.data_dir = value.into(),
                "classes" => set!(c.dataset.classes),
                "sequences_per_class" => set!(c.dataset.sequences_per_class),
                "frames_per_sequence" => set!(c.dataset.frames_per_sequence),
                "frame_height" => set!(c.dataset.frame_height),
                "frame_width" => set!(c.dataset.frame_width),
                "motion_mix" => c.dataset.motion_mix = ratio(value).ok_or_else(bad)?,
                "noise_prefix_min" => set!(c.dataset.noise_prefix.0),
                "noise_prefix_max" => set!(c.dataset.noise_prefix.1),
                "split_ratio" => c.dataset.split_ratio = ratio(value).ok_or_else(bad)?,
                "variant" => set!(c.model.variant),
                "heads" => set!(c.model.heads),
                "proj_dim" => {
                    c.model.proj_dim = if value == "auto" { None } else { Some(value.parse().map_err(|_| bad())?) }
                }
                "backbone_channels" => c.model.backbone_channels = list(value).ok_or_else(bad)?,
                "classifier_hidden" => set!(c.model.classifier_hidden),
                "n" => set!(c.train.n),
                "window" => set!(c.train.window),
                "learning_rate" => set!(c.train.learning_rate),
                "momentum" => set!(c.train.momentum),
                "batch_size" => set!(c.train.batch_size),
                "epochs" => set!(c.train.epochs),
                "patience" => set!(c.train.patience),
                "ablation_variants" => c.ablation.variants = list(value).ok_or_else(bad)?,
                "ablation_lengths" => c.ablation.lengths = list(value).ok_or_else(bad)?,
                "ablation_windows" => c.ablation.windows = list(value).ok_or_else(bad)?,
                "ablation_seeds" => c.ablation.seeds = list(value).ok_or_else(bad)?,
                "query_token" => set!(c.query_token),
                "top_k" => set!(c.top_k),
                _ => return Err(line_err(format!("unknown key `{key}`"))),
            }
        }
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    /// Propagates shared settings into the sub-configurations.
    pub fn resolve(&mut self) {
        self.dataset.seed = self.seed;
        self.model.classes = self.dataset.classes;
        self.model.frame_height = self.dataset.frame_height;
        self.model.frame_width = self.dataset.frame_width;
        self.model.seq_len = self.train.n;
        self.train.seed = self.seed;
        self.train.model = self.model.clone();
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.resolve();
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.dataset.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        if self.top_k == 0 {
            return Err(ConfigError::Invalid("top_k must be at least 1".into()));
        }
        if self.ablation.lengths.contains(&0) {
            return Err(ConfigError::Invalid("ablation lengths must be positive".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let m = &self.model;
        let t = &self.train;
        let a = &self.ablation;
        let [mp, ms, mt] = d.motion_mix;
        let [sa, sb, sc] = d.split_ratio;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("classes", d.classes.to_string());
        kv("sequences_per_class", d.sequences_per_class.to_string());
        kv("frames_per_sequence", d.frames_per_sequence.to_string());
        kv("frame_height", d.frame_height.to_string());
        kv("frame_width", d.frame_width.to_string());
        kv("motion_mix", format!("{mp}:{ms}:{mt}"));
        kv("noise_prefix_min", d.noise_prefix.0.to_string());
        kv("noise_prefix_max", d.noise_prefix.1.to_string());
        kv("split_ratio", format!("{sa}:{sb}:{sc}"));
        kv("variant", m.variant.to_string());
        kv("heads", m.heads.to_string());
        kv("proj_dim", m.proj_dim.map_or("auto".into(), |p| p.to_string()));
        kv("backbone_channels", join(&m.backbone_channels));
        kv("classifier_hidden", m.classifier_hidden.to_string());
        kv("n", t.n.to_string());
        kv("window", t.window.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("momentum", t.momentum.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("patience", t.patience.to_string());
        kv("ablation_variants", join(&a.variants));
        kv("ablation_lengths", join(&a.lengths));
        kv("ablation_windows", join(&a.windows));
        kv("ablation_seeds", join(&a.seeds));
        kv("query_token", self.query_token.to_string());
        kv("top_k", self.top_k.to_string());
        out
    }
}
