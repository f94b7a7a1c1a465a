//! Grad-CAM saliency, temporal attention inspection and PGM export.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::io::write_atomic;
use crate::model::{Forward, ModelError, StamParams};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = ExplainError> = std::result::Result<T, E>;

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// `[h, w]`, nonnegative, maximum 1 unless all zero.
    pub values: Tensor,
    pub frame: usize,
    pub class: usize,
    /// Spatially averaged gradient per feature channel.
    pub channel_weights: Vec<f64>,
    /// Set when every gradient reaching the feature map was zero.
    pub vanished: bool,
}

/// Grad-CAM on the last backbone pooling output of frame `frame`.
pub fn grad_cam(params: &StamParams, frames: &[Tensor], class: usize, frame: usize) -> Result<SaliencyMap> {
    if class >= params.config.classes {
        return Err(ExplainError::Contract(format!("class {class} out of range for {}", params.config.classes)));
    }
    if frame >= frames.len() {
        return Err(ExplainError::Contract(format!("frame {frame} out of range for {} frames", frames.len())));
    }
    let mut tape = Tape::new();
    let fwd = Forward::run(&mut tape, params, frames, true)?;
    let logit = tape.pick(fwd.logits, class)?;
    tape.backward(logit)?;
    let feat = fwd.features[frame];
    let (h, w, c) = {
        let s = tape.shape(feat);
        (s[0], s[1], s[2])
    };
    let grad = tape.grad(feat).expect("features depend on trainable parameters");
    let mut weights = vec![0.0; c];
    for px in grad.chunks_exact(c) {
        weights.iter_mut().zip(px).for_each(|(a, g)| *a += g);
    }
    weights.iter_mut().for_each(|a| *a /= (h * w) as f64);
    let vanished = grad.iter().all(|&g| g == 0.0);
    if vanished {
        log::warn!("grad-cam: all gradients vanished for class {class}, frame {frame}");
    }

    let f = tape.value(feat).values();
    let mut map: Vec<f64> =
        f.chunks_exact(c).map(|px| px.iter().zip(&weights).map(|(v, a)| v * a).sum::<f64>().max(0.0)).collect();
    let max = map.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        map.iter_mut().for_each(|v| *v /= max);
    }
    Ok(SaliencyMap { values: Tensor::new(&[h, w], map)?, frame, class, channel_weights: weights, vanished })
}

/// Bilinear resize of an `[h, w]` map to `[height, width]` with aligned
/// pixel centers.
pub fn upsample_bilinear(map: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let [h, w] = map.shape()[..] else {
        return Err(ExplainError::Contract(format!("map must be [h, w], got {:?}", map.shape())));
    };
    let src = |y: usize, x: usize| map.values()[y * w + x];
    let coord = |o: usize, out: usize, inp: usize| ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
    Ok(Tensor::from_fn(&[height, width], |i| {
        let (y, x) = (coord(i / width, height, h), coord(i % width, width, w));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
        let bottom = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// IoU between the top `fraction` of saliency pixels (after bilinear
/// upsampling to the mask size) and a binary mask.
pub fn saliency_mask_iou(map: &Tensor, mask: &Tensor, fraction: f64) -> Result<f64> {
    let [mh, mw] = mask.shape()[..] else {
        return Err(ExplainError::Contract(format!("mask must be [H, W], got {:?}", mask.shape())));
    };
    let up = upsample_bilinear(map, mh, mw)?;
    let count = ((mh * mw) as f64 * fraction).round().max(1.0) as usize;
    let mut order: Vec<usize> = (0..mh * mw).collect();
    // stable: equal saliency keeps scan order
    order.sort_by(|&a, &b| up.values()[b].total_cmp(&up.values()[a]));
    let mut top = vec![false; mh * mw];
    order[..count].iter().for_each(|&i| top[i] = true);
    let mut inter = 0;
    let mut union = 0;
    for (t, &m) in top.iter().zip(mask.values()) {
        let m = m != 0.0;
        inter += usize::from(*t && m);
        union += usize::from(*t || m);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenWeight {
    pub token: usize,
    pub frame: usize,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionInspection {
    /// Head-averaged `[m, m]` map; row `j` is the distribution token `j`
    /// places over source tokens.
    pub averaged: Tensor,
    pub query: usize,
    /// Sorted by descending weight, lower token id first on ties.
    pub top: Vec<TokenWeight>,
}

/// Token id for `(frame, row, col)` on an `h×w` feature grid.
pub fn encode_token(frame: usize, row: usize, col: usize, h: usize, w: usize) -> usize {
    (frame * h + row) * w + col
}

pub fn decode_token(token: usize, h: usize, w: usize) -> (usize, usize, usize) {
    (token / (h * w), (token / w) % h, token % w)
}

/// Averages the temporal attention maps over heads and returns the `k`
/// source tokens that `query` attends to most.
pub fn inspect_temporal_attention(
    params: &StamParams,
    frames: &[Tensor],
    query: usize,
    k: usize,
) -> Result<AttentionInspection> {
    if !params.config.variant.has_temporal() || params.heads.is_empty() {
        return Err(ExplainError::Contract(format!(
            "variant {} has no temporal attention",
            params.config.variant
        )));
    }
    let m = params.config.tokens();
    if query >= m {
        return Err(ExplainError::Contract(format!("query token {query} out of range for {m} tokens")));
    }
    if k == 0 {
        return Err(ExplainError::Contract("k must be at least 1".into()));
    }
    let mut tape = Tape::new();
    let fwd = Forward::run(&mut tape, params, frames, false)?;
    let maps: Vec<&Tensor> = fwd.attention.iter().map(|&a| tape.value(a)).collect();
    let averaged = if maps.len() == 1 {
        maps[0].clone()
    } else {
        let inv = 1.0 / maps.len() as f64;
        Tensor::from_fn(&[m, m], |i| maps.iter().map(|t| t.values()[i]).sum::<f64>() * inv)
    };
    let (h, w, _) = params.config.feature_dims();
    let row = &averaged.values()[query * m..(query + 1) * m];
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let top = order
        .into_iter()
        .take(k)
        .map(|token| {
            let (frame, r, c) = decode_token(token, h, w);
            TokenWeight { token, frame, row: r, col: c, weight: row[token] }
        })
        .collect();
    Ok(AttentionInspection { averaged, query, top })
}

impl AttentionInspection {
    /// Tab-separated `token, frame, row, col, weight` lines after a header.
    pub fn to_text(&self) -> String {
        let mut out = format!("# query {}\ntoken\tframe\trow\tcol\tweight\n", self.query);
        for t in &self.top {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", t.token, t.frame, t.row, t.col, t.weight));
        }
        out
    }

    /// Parses the rows written by [`AttentionInspection::to_text`].
    pub fn parse_rows(text: &str) -> Option<Vec<TokenWeight>> {
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("token"))
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let [token, frame, row, col, weight] = f[..] else { return None };
                Some(TokenWeight {
                    token: token.parse().ok()?,
                    frame: frame.parse().ok()?,
                    row: row.parse().ok()?,
                    col: col.parse().ok()?,
                    weight: weight.parse().ok()?,
                })
            })
            .collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5) of `[h, w]` (or `[h, w, 1]`) values in `[0, 1]`.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if !(s.len() == 2 || (s.len() == 3 && s[2] == 1)) {
        return Err(ExplainError::Contract(format!("expected a grayscale image, got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.values().iter().map(|&v| quantize(v)));
    Ok(out)
}

fn upscale_nearest(map: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (oh, ow) = (h * factor, w * factor);
    Tensor::from_fn(&[oh, ow], |i| map.values()[(i / ow / factor) * w + (i % ow) / factor])
}

/// Writes the nearest-upscaled map to `path` and an overlay
/// `0.5·frame + 0.5·map` next to it (`<stem>_overlay.pgm`). The base frame
/// is sampled nearest-neighbor onto the upscaled grid.
pub fn export_heatmap(map: &Tensor, base: &Tensor, path: &Path, upscale: usize) -> Result<(PathBuf, PathBuf)> {
    if map.shape().len() != 2 || upscale == 0 {
        return Err(ExplainError::Contract(format!(
            "map must be [h, w] with upscale >= 1, got {:?} and {upscale}",
            map.shape()
        )));
    }
    let big = upscale_nearest(map, upscale);
    let (oh, ow) = (big.shape()[0], big.shape()[1]);
    let (bh, bw) = (base.shape()[0], base.shape()[1]);
    let overlay = Tensor::from_fn(&[oh, ow], |i| {
        let (y, x) = (i / ow * bh / oh, i % ow * bw / ow);
        0.5 * base.values()[y * bw + x] + 0.5 * big.values()[i]
    });
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    let overlay_path = path.with_file_name(format!("{stem}_overlay.pgm"));
    for (p, img) in [(path, &big), (overlay_path.as_path(), &overlay)] {
        write_atomic(p, &encode_pgm(img)?)
            .map_err(|source| ExplainError::Io { path: p.display().to_string(), source })?;
    }
    Ok((path.to_path_buf(), overlay_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_codec_round_trips() {
        let (h, w) = (3, 5);
        for t in 0..4 * h * w {
            let (f, r, c) = decode_token(t, h, w);
            assert!(r < h && c < w);
            assert_eq!(encode_token(f, r, c, h, w), t);
        }
    }

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-3.0), 0);
    }

    #[test]
    fn nearest_upscale_repeats_cells() {
        let m = Tensor::new(&[1, 2], vec![0.25, 0.75]).unwrap();
        let u = upscale_nearest(&m, 2);
        assert_eq!(u.shape(), &[2, 4]);
        assert_eq!(u.values(), &[0.25, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let m = Tensor::full(&[4, 4], 0.3);
        let u = upsample_bilinear(&m, 32, 32).unwrap();
        assert!(u.values().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }
}
