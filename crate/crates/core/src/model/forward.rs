use super::{ConvParams, HeadParams, ModelError, Result, StamParams, SPATIAL_KERNEL};
use crate::tensor::{PoolMode, Tape, Tensor, Var};

/// Backbone output `F` with shape `[h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Tensor);

/// Tape handles for every parameter of a [`StamParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    /// Same order as [`StamParams::named_tensors`].
    pub all: Vec<Var>,
    backbone: Vec<(Var, Var)>,
    spatial: Option<(Var, Var)>,
    heads: Vec<[Var; 3]>,
    classifier: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Records the parameters as leaves; `trainable` controls whether they
    /// receive gradients.
    pub fn record(tape: &mut Tape, params: &StamParams, trainable: bool) -> Self {
        let mut all = Vec::new();
        let mut leaf = |t: &Tensor| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            let v = tape.leaf(t);
            all.push(v);
            v
        };
        let backbone = params.backbone.iter().map(|b| (leaf(&b.kernel), leaf(&b.bias))).collect();
        let spatial = params.spatial.as_ref().map(|s| (leaf(&s.kernel), leaf(&s.bias)));
        let heads = params.heads.iter().map(|h| [leaf(&h.w_q), leaf(&h.w_k), leaf(&h.w_v)]).collect();
        let classifier = params.classifier.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        ParamVars { all, backbone, spatial, heads, classifier }
    }
}

/// Every intermediate of one forward pass that later analysis needs.
#[derive(Clone, Debug)]
pub struct Forward {
    pub params: ParamVars,
    pub frames: Vec<Var>,
    /// Backbone output `F` per frame.
    pub features: Vec<Var>,
    /// Spatial attention map `A_S` per frame (`[h, w, 1]`); empty for cnn-only.
    pub spatial_maps: Vec<Var>,
    /// `A_S ⊗ F` per frame, or `F` itself for cnn-only.
    pub gated: Vec<Var>,
    /// `[m, c]` token matrix built from `gated`.
    pub tokens: Var,
    /// Temporal attention map per head, `[m, m]`, row `j` holding the weights
    /// token `j` assigns to every source token `i`.
    pub attention: Vec<Var>,
    pub head_outputs: Vec<Var>,
    pub logits: Var,
}

impl Forward {
    pub fn run(tape: &mut Tape, params: &StamParams, frames: &[Tensor], trainable: bool) -> Result<Self> {
        let cfg = &params.config;
        if frames.len() != cfg.seq_len {
            return Err(ModelError::Contract(format!(
                "model configured for {} frames, got {}",
                cfg.seq_len,
                frames.len()
            )));
        }
        let expect = [cfg.frame_height, cfg.frame_width, 1];
        if let Some(bad) = frames.iter().find(|f| f.shape() != expect) {
            return Err(ModelError::Contract(format!("frame shape {:?}, expected {expect:?}", bad.shape())));
        }
        let pv = ParamVars::record(tape, params, trainable);
        let frame_vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let features = frame_vars
            .iter()
            .map(|&f| backbone_vars(tape, &pv.backbone, f))
            .collect::<Result<Vec<_>>>()?;
        let mut fwd = Self::from_features(tape, params, pv, features)?;
        fwd.frames = frame_vars;
        Ok(fwd)
    }

    /// Runs everything after the backbone on already-recorded feature maps.
    pub fn from_features(tape: &mut Tape, params: &StamParams, pv: ParamVars, features: Vec<Var>) -> Result<Self> {
        let cfg = &params.config;
        let (h, w, c) = cfg.feature_dims();
        let mut spatial_maps = Vec::new();
        let gated = match pv.spatial {
            Some((k, b)) => features
                .iter()
                .map(|&f| {
                    let (map, gated) = spatial_vars(tape, k, b, f)?;
                    spatial_maps.push(map);
                    Ok(gated)
                })
                .collect::<Result<Vec<_>>>()?,
            None => features.clone(),
        };
        let stacked = tape.concat(&gated, 0)?;
        let m = features.len() * h * w;
        let tokens = tape.reshape(stacked, &[m, c])?;

        let mut attention = Vec::new();
        let mut head_outputs = Vec::new();
        let pre_classifier = if pv.heads.is_empty() {
            tokens
        } else {
            for &[q, k, v] in &pv.heads {
                let (a, out) = head_vars(tape, q, k, v, tokens)?;
                attention.push(a);
                head_outputs.push(out);
            }
            tape.mean(&head_outputs)?
        };
        let flat = tape.reshape(pre_classifier, &[1, m * c])?;
        let logits = classify(tape, &pv.classifier, flat)?;
        Ok(Forward {
            params: pv,
            frames: Vec::new(),
            features,
            spatial_maps,
            gated,
            tokens,
            attention,
            head_outputs,
            logits,
        })
    }
}

fn backbone_vars(tape: &mut Tape, blocks: &[(Var, Var)], frame: Var) -> Result<Var> {
    let mut x = frame;
    for &(k, b) in blocks {
        let conv = tape.conv2d(x, k, b, 1, 1)?;
        let act = tape.relu(conv);
        x = tape.pool2d(act, 2, 2, PoolMode::Max)?;
    }
    Ok(x)
}

/// Returns `(A_S, A_S ⊗ F)`.
fn spatial_vars(tape: &mut Tape, kernel: Var, bias: Var, features: Var) -> Result<(Var, Var)> {
    let max = tape.channel_pool(features, PoolMode::Max)?;
    let avg = tape.channel_pool(features, PoolMode::Avg)?;
    let stacked = tape.concat(&[max, avg], 2)?;
    let conv = tape.conv2d(stacked, kernel, bias, 1, SPATIAL_KERNEL / 2)?;
    let map = tape.sigmoid(conv);
    let gated = tape.mul(features, map)?;
    Ok((map, gated))
}

/// One temporal head on `[m, c]` tokens. Returns `(A_T, F^T)`.
///
/// `s[i][j] = q_i · k_j`, and for each target token `j` the weights over
/// source tokens `i` are `softmax_i(s[i][j])`, stored as row `j` of `A_T`.
/// Then `F^T_j = Σ_i A_T[j][i] · v_i + F_j`.
fn head_vars(tape: &mut Tape, w_q: Var, w_k: Var, w_v: Var, tokens: Var) -> Result<(Var, Var)> {
    let q = tape.matmul(tokens, w_q)?;
    let k = tape.matmul(tokens, w_k)?;
    let v = tape.matmul(tokens, w_v)?;
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(k, qt)?;
    let attn = tape.softmax_rows(scores)?;
    let mixed = tape.matmul(attn, v)?;
    let out = tape.add(mixed, tokens)?;
    Ok((attn, out))
}

fn classify(tape: &mut Tape, layers: &[(Var, Var)], flat: Var) -> Result<Var> {
    let mut x = flat;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let k = tape.shape(w)[1];
        let z = tape.matmul(x, w)?;
        let b = tape.reshape(b, &[1, k])?;
        x = tape.add(z, b)?;
        if i + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    let k = tape.shape(x)[1];
    Ok(tape.reshape(x, &[k])?)
}

fn record_conv(tape: &mut Tape, p: &ConvParams) -> (Var, Var) {
    (tape.constant(p.kernel.clone()), tape.constant(p.bias.clone()))
}

/// Per-frame feature extraction with the given backbone blocks.
pub fn backbone_forward(frame: &Tensor, blocks: &[ConvParams]) -> Result<FeatureMap> {
    let s = frame.shape();
    let factor = 1usize << blocks.len();
    if s.len() != 3 || s[2] != 1 || !s[0].is_multiple_of(factor) || !s[1].is_multiple_of(factor) {
        return Err(ModelError::Config(format!(
            "frame {s:?} must be [H,W,1] with H, W divisible by {factor}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = blocks.iter().map(|b| record_conv(&mut tape, b)).collect();
    let f = tape.constant(frame.clone());
    let out = backbone_vars(&mut tape, &vars, f)?;
    Ok(FeatureMap(tape.value(out).clone()))
}

/// Returns the attention map `A_S` (`[h, w, 1]`) and the gated features.
pub fn spatial_attention(features: &FeatureMap, params: &ConvParams) -> Result<(Tensor, FeatureMap)> {
    let mut tape = Tape::new();
    let (k, b) = record_conv(&mut tape, params);
    let f = tape.constant(features.0.clone());
    let (map, gated) = spatial_vars(&mut tape, k, b, f)?;
    Ok((tape.value(map).clone(), FeatureMap(tape.value(gated).clone())))
}

/// Returns `(A_T, F^T)` for one head over an `[m, c]` token matrix.
pub fn temporal_attention_head(tokens: &Tensor, params: &HeadParams) -> Result<(Tensor, Tensor)> {
    if tokens.shape().len() != 2 {
        return Err(ModelError::Contract(format!("tokens must be [m, c], got {:?}", tokens.shape())));
    }
    let mut tape = Tape::new();
    let q = tape.constant(params.w_q.clone());
    let k = tape.constant(params.w_k.clone());
    let v = tape.constant(params.w_v.clone());
    let x = tape.constant(tokens.clone());
    let (a, out) = head_vars(&mut tape, q, k, v, x)?;
    Ok((tape.value(a).clone(), tape.value(out).clone()))
}

/// Elementwise mean of the head outputs.
pub fn multi_head_aggregate(outputs: &[Tensor]) -> Result<Tensor> {
    if outputs.is_empty() {
        return Err(ModelError::Contract("no head outputs to aggregate".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = outputs.iter().map(|t| tape.constant(t.clone())).collect();
    let m = tape.mean(&vars)?;
    Ok(tape.value(m).clone())
}

/// Class logits for one sequence.
pub fn model_forward(frames: &[Tensor], params: &StamParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fwd = Forward::run(&mut tape, params, frames, false)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Index of the largest logit; the lowest index wins ties.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
