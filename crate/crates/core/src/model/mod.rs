//! The spatio-temporal attention classifier and its two ablation variants.
//!
//! A sequence of `n` single-channel frames goes through a shared CNN backbone
//! (three conv → relu → 2×2 max-pool blocks by default). Depending on the
//! [`Variant`], each frame's feature map `F` is then gated by a spatial
//! attention map, and the gated maps of all frames are flattened into
//! `m = n·h·w` tokens that pass through parallel temporal self-attention
//! heads. A single affine layer classifies the flattened result.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use forward::{
    backbone_forward, model_forward, multi_head_aggregate, predict, spatial_attention, temporal_attention_head,
    FeatureMap, Forward, ParamVars,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which attention modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    CnnOnly,
    CnnSpatial,
    FullStam,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CnnOnly, Variant::CnnSpatial, Variant::FullStam];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::CnnOnly => "cnn-only",
            Variant::CnnSpatial => "cnn+spatial",
            Variant::FullStam => "full-stam",
        }
    }

    pub fn has_spatial(self) -> bool {
        self != Variant::CnnOnly
    }

    pub fn has_temporal(self) -> bool {
        self == Variant::FullStam
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "cnn-only" => Ok(Variant::CnnOnly),
            "cnn+spatial" => Ok(Variant::CnnSpatial),
            "full-stam" => Ok(Variant::FullStam),
            other => Err(format!("unknown variant {other:?} (expected cnn-only, cnn+spatial or full-stam)")),
        }
    }
}

/// Architecture hyper-parameters. Everything needed to rebuild a
/// [`StamParams`] skeleton lives here.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    /// Output channels of each conv → relu → max-pool block.
    pub backbone_channels: Vec<usize>,
    pub heads: usize,
    /// Query/key width `d`; `None` means `c / 2` (at least 1).
    pub proj_dim: Option<usize>,
    pub seq_len: usize,
    pub classes: usize,
    pub variant: Variant,
    /// Width of an optional hidden relu layer in the classifier; 0 disables it.
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_height: 32,
            frame_width: 32,
            backbone_channels: vec![8, 16, 32],
            heads: 10,
            proj_dim: None,
            seq_len: 4,
            classes: 10,
            variant: Variant::FullStam,
            classifier_hidden: 0,
        }
    }
}

pub const SPATIAL_KERNEL: usize = 7;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return err(format!("backbone channels must be positive, got {:?}", self.backbone_channels));
        }
        let factor = 1usize << self.backbone_channels.len();
        if !self.frame_height.is_multiple_of(factor) || !self.frame_width.is_multiple_of(factor) {
            return err(format!(
                "frame {}x{} not divisible by {factor} for {} pooling blocks",
                self.frame_height,
                self.frame_width,
                self.backbone_channels.len()
            ));
        }
        let (h, w, _) = self.feature_dims();
        if h < 2 || w < 2 {
            return err(format!("feature map {h}x{w} too small; need at least 2x2"));
        }
        if self.seq_len == 0 {
            return err("sequence length must be >= 1".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.variant.has_temporal() && self.heads == 0 {
            return err("full-stam needs at least one temporal head".into());
        }
        let c = self.feature_dims().2;
        if let Some(d) = self.proj_dim {
            if d == 0 || d > c {
                return err(format!("projection width {d} must be in 1..={c}"));
            }
        }
        Ok(())
    }

    /// `(h, w, c)` of the backbone output.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        let factor = 1usize << self.backbone_channels.len();
        (
            self.frame_height / factor,
            self.frame_width / factor,
            *self.backbone_channels.last().unwrap_or(&1),
        )
    }

    pub fn proj_width(&self) -> usize {
        let c = self.feature_dims().2;
        self.proj_dim.unwrap_or((c / 2).max(1))
    }

    /// Number of temporal tokens `m = n·h·w`.
    pub fn tokens(&self) -> usize {
        let (h, w, _) = self.feature_dims();
        self.seq_len * h * w
    }

    pub fn classifier_input(&self) -> usize {
        self.tokens() * self.feature_dims().2
    }

    fn head_count(&self) -> usize {
        if self.variant.has_temporal() {
            self.heads
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All learnable weights of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct StamParams {
    pub config: ModelConfig,
    pub backbone: Vec<ConvParams>,
    pub spatial: Option<ConvParams>,
    pub heads: Vec<HeadParams>,
    pub classifier: Vec<DenseParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = (gain / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Independent stream per parameter group, so variants built from the same
/// seed share backbone and classifier weights.
fn group_rng(seed: u64, group: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group);
    rng
}

impl StamParams {
    /// Fan-in-scaled uniform initialization with zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, _, c) = config.feature_dims();
        let d = config.proj_width();

        let mut rng = group_rng(seed, 0);
        let mut backbone = Vec::new();
        let mut c_in = 1;
        for &c_out in &config.backbone_channels {
            backbone.push(ConvParams {
                kernel: uniform(&mut rng, &[3, 3, c_in, c_out], 9 * c_in, 6.0),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }

        let mut rng = group_rng(seed, 1);
        let spatial = config.variant.has_spatial().then(|| ConvParams {
            kernel: uniform(&mut rng, &[SPATIAL_KERNEL, SPATIAL_KERNEL, 2, 1], SPATIAL_KERNEL * SPATIAL_KERNEL * 2, 3.0),
            bias: Tensor::zeros(&[1]),
        });

        let mut rng = group_rng(seed, 2);
        let heads = (0..config.head_count())
            .map(|_| HeadParams {
                w_q: uniform(&mut rng, &[c, d], c, 3.0),
                w_k: uniform(&mut rng, &[c, d], c, 3.0),
                w_v: uniform(&mut rng, &[c, c], c, 3.0),
            })
            .collect();

        let mut rng = group_rng(seed, 3);
        let mut widths = vec![config.classifier_input()];
        if config.classifier_hidden > 0 {
            widths.push(config.classifier_hidden);
        }
        widths.push(config.classes);
        let classifier = widths
            .windows(2)
            .map(|io| DenseParams {
                weight: uniform(&mut rng, &[io[0], io[1]], io[0], 3.0),
                bias: Tensor::zeros(&[io[1]]),
            })
            .collect();

        Ok(StamParams { config: config.clone(), backbone, spatial, heads, classifier })
    }

    /// All tensors with stable names, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &b.kernel));
            out.push((format!("backbone.{i}.bias"), &b.bias));
        }
        if let Some(s) = &self.spatial {
            out.push(("spatial.kernel".into(), &s.kernel));
            out.push(("spatial.bias".into(), &s.bias));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("heads.{i}.w_q"), &h.w_q));
            out.push((format!("heads.{i}.w_k"), &h.w_k));
            out.push((format!("heads.{i}.w_v"), &h.w_v));
        }
        for (i, l) in self.classifier.iter().enumerate() {
            out.push((format!("classifier.{i}.weight"), &l.weight));
            out.push((format!("classifier.{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`StamParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.backbone {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        if let Some(s) = &mut self.spatial {
            out.push(&mut s.kernel);
            out.push(&mut s.bias);
        }
        for h in &mut self.heads {
            out.push(&mut h.w_q);
            out.push(&mut h.w_k);
            out.push(&mut h.w_v);
        }
        for l in &mut self.classifier {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }
}

/// Exact number of scalar learnables.
pub fn count_params(params: &StamParams) -> usize {
    params.tensors().iter().map(|t| t.numel()).sum()
}

/// Closed-form parameter count for a configuration, without building it.
pub fn analytic_param_count(config: &ModelConfig) -> usize {
    let mut total = 0;
    let mut c_in = 1;
    for &c_out in &config.backbone_channels {
        total += 9 * c_in * c_out + c_out;
        c_in = c_out;
    }
    if config.variant.has_spatial() {
        total += SPATIAL_KERNEL * SPATIAL_KERNEL * 2 + 1;
    }
    let (_, _, c) = config.feature_dims();
    total += config.head_count() * per_head_params(c, config.proj_width());
    let mut widths = vec![config.classifier_input()];
    if config.classifier_hidden > 0 {
        widths.push(config.classifier_hidden);
    }
    widths.push(config.classes);
    total += widths.windows(2).map(|io| io[0] * io[1] + io[1]).sum::<usize>();
    total
}

/// `W_q` and `W_k` are `c×d`, `W_v` is `c×c`.
pub fn per_head_params(c: usize, d: usize) -> usize {
    2 * c * d + c * c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_dims() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_dims(), (4, 4, 32));
        assert_eq!(cfg.proj_width(), 16);
        assert_eq!(cfg.tokens(), 4 * 16);
    }

    #[test]
    fn indivisible_frame_is_config_error() {
        let cfg = ModelConfig { frame_height: 30, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        let cfg = ModelConfig { frame_height: 8, frame_width: 8, ..ModelConfig::default() };
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn head_presence_follows_variant() {
        for v in Variant::ALL {
            let p = StamParams::init(&ModelConfig { variant: v, ..ModelConfig::default() }, 1).unwrap();
            assert_eq!(p.spatial.is_some(), v != Variant::CnnOnly);
            assert_eq!(!p.heads.is_empty(), v == Variant::FullStam);
        }
    }

    #[test]
    fn cnn_only_count_matches_hand_formula() {
        let cfg = ModelConfig { variant: Variant::CnnOnly, ..ModelConfig::default() };
        let p = StamParams::init(&cfg, 0).unwrap();
        // conv blocks: 3*3*1*8+8, 3*3*8*16+16, 3*3*16*32+32; classifier 4*16*32*10+10
        let expect = (72 + 8) + (1152 + 16) + (4608 + 32) + (2048 * 10 + 10);
        assert_eq!(count_params(&p), expect);
        assert_eq!(analytic_param_count(&cfg), expect);
    }

    #[test]
    fn one_more_head_adds_per_head_count() {
        let cfg = ModelConfig::default();
        let more = ModelConfig { heads: cfg.heads + 1, ..cfg.clone() };
        let a = count_params(&StamParams::init(&cfg, 0).unwrap());
        let b = count_params(&StamParams::init(&more, 0).unwrap());
        assert_eq!(b - a, 2 * 32 * 16 + 32 * 32);
    }

    #[test]
    fn init_is_seeded_and_shares_backbone_across_variants() {
        let a = StamParams::init(&ModelConfig::default(), 42).unwrap();
        let b = StamParams::init(&ModelConfig::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = StamParams::init(&ModelConfig { variant: Variant::CnnOnly, ..ModelConfig::default() }, 42).unwrap();
        assert_eq!(a.backbone, c.backbone);
        assert_eq!(a.classifier, c.classifier);
        let d = StamParams::init(&ModelConfig::default(), 43).unwrap();
        assert_ne!(a.backbone, d.backbone);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("stam".parse::<Variant>().is_err());
    }
}
