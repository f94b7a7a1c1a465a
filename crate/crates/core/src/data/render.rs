use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::texture::{TextureClass, TextureField};
use super::{derive_seed, DataError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Motion {
    Press,
    Slip,
    Twist,
}

impl Motion {
    pub const ALL: [Motion; 3] = [Motion::Press, Motion::Slip, Motion::Twist];

    pub fn as_str(self) -> &'static str {
        match self {
            Motion::Press => "press",
            Motion::Slip => "slip",
            Motion::Twist => "twist",
        }
    }
}

impl fmt::Display for Motion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Motion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "press" => Ok(Motion::Press),
            "slip" => Ok(Motion::Slip),
            "twist" => Ok(Motion::Twist),
            _ => Err(format!("unknown motion {s:?}")),
        }
    }
}

/// Sensor and motion model used to render frames. Intensities are in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderParams {
    pub frame_height: usize,
    pub frame_width: usize,
    /// Idle membrane brightness.
    pub background: f64,
    pub marker_spacing: f64,
    pub marker_radius: f64,
    /// Darkening applied at marker dots.
    pub marker_depth: f64,
    /// Per-pixel Gaussian sensor noise, every frame.
    pub noise_std: f64,
    /// Brightness added inside the contact patch.
    pub contact_lift: f64,
    /// Scale applied to `height - 0.5` inside the contact patch.
    pub texture_gain: f64,
    /// Peak-to-peak strength of the fixed illumination ramp inside contact.
    pub shading: f64,
    pub radius_start: f64,
    pub radius_growth: f64,
    pub radius_max: f64,
    /// Slip translation, pixels per frame along +x.
    pub slip_velocity: f64,
    /// Twist rotation, degrees per frame.
    pub twist_step_deg: f64,
    /// Contact centre is drawn uniformly within this many pixels of the frame centre.
    pub center_jitter: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            frame_height: 32,
            frame_width: 32,
            background: 0.25,
            marker_spacing: 6.0,
            marker_radius: 0.9,
            marker_depth: 0.12,
            noise_std: 0.03,
            contact_lift: 0.25,
            texture_gain: 1.0,
            shading: 0.08,
            radius_start: 9.0,
            radius_growth: 1.5,
            radius_max: 14.0,
            slip_velocity: 2.0,
            twist_step_deg: 5.0,
            center_jitter: 4.0,
        }
    }
}

impl RenderParams {
    pub fn with_size(height: usize, width: usize) -> Self {
        RenderParams { frame_height: height, frame_width: width, ..Self::default() }
    }

    fn is_marker(&self, x: f64, y: f64) -> bool {
        let s = self.marker_spacing;
        let off = |v: f64| {
            let r = (v - s / 2.0).rem_euclid(s);
            r.min(s - r)
        };
        off(x).hypot(off(y)) <= self.marker_radius
    }

    /// Noise-free frame of the untouched sensor: background with marker dots.
    pub fn idle_frame(&self) -> Tensor {
        let (h, w) = (self.frame_height, self.frame_width);
        Tensor::from_fn(&[h, w, 1], |i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            self.idle_value(x, y)
        })
    }

    fn idle_value(&self, x: f64, y: f64) -> f64 {
        if self.is_marker(x, y) {
            self.background - self.marker_depth
        } else {
            self.background
        }
    }

    /// Contact radius `t` frames after onset.
    pub fn radius(&self, t: usize) -> f64 {
        (self.radius_start + self.radius_growth * t as f64).min(self.radius_max)
    }
}

/// Per-sequence contact placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactGeometry {
    pub center_x: f64,
    pub center_y: f64,
}

/// One tactile interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    /// `[H, W, 1]` frames with values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub label: usize,
    pub motion: Motion,
    /// Index of the first frame showing contact.
    pub onset_index: usize,
    /// Binary `[H, W]` contact masks aligned with `frames`.
    pub contact_masks: Vec<Tensor>,
}

/// Renders frame `t` (counted from contact onset) and its contact mask.
///
/// Press grows the contact radius over a static texture; slip translates the
/// texture by `t·slip_velocity` px along +x; twist rotates it about the
/// contact centre by `t·twist_step_deg`. Sensor noise is drawn from `noise`.
pub fn render_contact_frame(
    field: &TextureField,
    motion: Motion,
    t: usize,
    params: &RenderParams,
    geometry: ContactGeometry,
    noise: &mut impl Rng,
) -> (Tensor, Tensor) {
    let (h, w) = (params.frame_height, params.frame_width);
    let radius = params.radius(t);
    let (cx, cy) = (geometry.center_x, geometry.center_y);
    let (sin, cos) = (params.twist_step_deg.to_radians() * t as f64).sin_cos();
    let normal = Normal::new(0.0, params.noise_std.max(0.0)).expect("finite std");
    let mut frame = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let inside = (xf - cx).hypot(yf - cy) <= radius;
            let mut v = params.idle_value(xf, yf);
            if inside {
                let (sx, sy) = match motion {
                    Motion::Press => (xf, yf),
                    Motion::Slip => (xf - params.slip_velocity * t as f64, yf),
                    Motion::Twist => {
                        // inverse rotation: content turns by +angle
                        let (dx, dy) = (xf - cx, yf - cy);
                        (cx + dx * cos + dy * sin, cy - dx * sin + dy * cos)
                    }
                };
                let ramp = 0.5 * ((xf / w as f64 - 0.5) - (yf / h as f64 - 0.5));
                v += params.contact_lift + params.texture_gain * (field.height(sx, sy) - 0.5) + params.shading * ramp;
            }
            if params.noise_std > 0.0 {
                v += normal.sample(noise);
            }
            frame.push(v.clamp(0.0, 1.0));
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    (
        Tensor::new(&[h, w, 1], frame).expect("frame extents"),
        Tensor::new(&[h, w], mask).expect("mask extents"),
    )
}

fn idle_noisy_frame(params: &RenderParams, noise: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, params.noise_std.max(0.0)).expect("finite std");
    let mut f = params.idle_frame();
    if params.noise_std > 0.0 {
        for v in f.values_mut() {
            *v = (*v + normal.sample(noise)).clamp(0.0, 1.0);
        }
    }
    f
}

/// Renders `n_total` frames: `noise_prefix` pre-contact frames followed by
/// contact frames with `t` counted from the onset.
pub fn generate_sequence(
    class: &TextureClass,
    motion: Motion,
    n_total: usize,
    noise_prefix: usize,
    seed: u64,
    params: &RenderParams,
) -> Result<SequenceSample> {
    if noise_prefix >= n_total {
        return Err(DataError::Parameter(format!(
            "noise prefix {noise_prefix} must be shorter than the sequence ({n_total} frames)"
        )));
    }
    if params.frame_height < 16 || params.frame_width < 16 {
        return Err(DataError::Parameter("frames must be at least 16x16".into()));
    }
    let field = TextureField::new(class, derive_seed(seed, 1))?;
    let mut placement = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let j = params.center_jitter;
    let jitter = |rng: &mut ChaCha8Rng| if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
    let geometry = ContactGeometry {
        center_x: (params.frame_width as f64 - 1.0) / 2.0 + jitter(&mut placement),
        center_y: (params.frame_height as f64 - 1.0) / 2.0 + jitter(&mut placement),
    };
    let mut noise = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let mut frames = Vec::with_capacity(n_total);
    let mut masks = Vec::with_capacity(n_total);
    for i in 0..n_total {
        if i < noise_prefix {
            frames.push(idle_noisy_frame(params, &mut noise));
            masks.push(Tensor::zeros(&[params.frame_height, params.frame_width]));
        } else {
            let (f, m) = render_contact_frame(&field, motion, i - noise_prefix, params, geometry, &mut noise);
            frames.push(f);
            masks.push(m);
        }
    }
    Ok(SequenceSample { frames, label: class.class_id, motion, onset_index: noise_prefix, contact_masks: masks })
}
