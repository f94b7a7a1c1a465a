use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, DataError, Result};
use crate::tensor::Tensor;

/// Surface parameters of one fabric-like texture class.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureClass {
    pub class_id: usize,
    /// Period in pixels of the dominant grating.
    pub weave_period_u: f64,
    /// Period in pixels of the perpendicular, weaker grating.
    pub weave_period_v: f64,
    /// Grating contrast in `[0, 1]`.
    pub ridge_amplitude: f64,
    /// Direction of the dominant grating, radians.
    pub orientation: f64,
    /// Fraction of a full cycle by which per-sample phases are randomized.
    pub phase_jitter: f64,
    /// Standard deviation of the micro-texture noise, `[0, 1]`.
    pub micro_noise: f64,
}

/// `k` classes with distinct dominant spatial frequencies: orientations
/// spread over half a turn, periods alternating between two bands.
pub fn default_classes(k: usize) -> Vec<TextureClass> {
    (0..k)
        .map(|id| {
            let period = if id % 2 == 0 { 4.0 } else { 6.0 };
            TextureClass {
                class_id: id,
                weave_period_u: period,
                weave_period_v: period * 2.5,
                ridge_amplitude: 0.8,
                orientation: id as f64 * PI / k as f64,
                phase_jitter: 1.0,
                micro_noise: 0.15,
            }
        })
        .collect()
}

/// A sampled instance of a [`TextureClass`]: phases and micro-texture fixed
/// by a seed, evaluable at any real-valued position.
#[derive(Clone, Debug)]
pub struct TextureField {
    class: TextureClass,
    phase_u: f64,
    phase_v: f64,
    noise_seed: u64,
}

const GRATING_U_WEIGHT: f64 = 0.6;
const GRATING_V_WEIGHT: f64 = 0.4;

impl TextureField {
    pub fn new(class: &TextureClass, seed: u64) -> Result<Self> {
        if class.weave_period_u < 2.0 || class.weave_period_v < 2.0 {
            return Err(DataError::Parameter(format!(
                "weave periods must be >= 2 px, got {} and {}",
                class.weave_period_u, class.weave_period_v
            )));
        }
        for (name, v) in [
            ("ridge_amplitude", class.ridge_amplitude),
            ("phase_jitter", class.phase_jitter),
            ("micro_noise", class.micro_noise),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::Parameter(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let jitter = 2.0 * PI * class.phase_jitter;
        Ok(TextureField {
            class: class.clone(),
            phase_u: rng.random::<f64>() * jitter,
            phase_v: rng.random::<f64>() * jitter,
            noise_seed: rng.random(),
        })
    }

    pub fn class(&self) -> &TextureClass {
        &self.class
    }

    /// Height in `[0, 1]` at pixel position `(x, y)`; 0.5 is the rest level.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let c = &self.class;
        let (s, co) = c.orientation.sin_cos();
        let u = x * co + y * s;
        let v = -x * s + y * co;
        let grating = GRATING_U_WEIGHT * (2.0 * PI * u / c.weave_period_u + self.phase_u).sin()
            + GRATING_V_WEIGHT * (2.0 * PI * v / c.weave_period_v + self.phase_v).sin();
        let noise = if c.micro_noise > 0.0 { c.micro_noise * self.value_noise(x, y) } else { 0.0 };
        (0.5 + 0.5 * c.ridge_amplitude * grating + noise).clamp(0.0, 1.0)
    }

    /// Bilinearly interpolated lattice noise with unit variance at lattice
    /// points; exact lattice values at integer positions.
    fn value_noise(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (ix, iy) = (x0 as i64, y0 as i64);
        let at = |dx: i64, dy: i64| self.lattice(ix + dx, iy + dy);
        let top = at(0, 0) * (1.0 - fx) + at(1, 0) * fx;
        let bottom = at(0, 1) * (1.0 - fx) + at(1, 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn lattice(&self, x: i64, y: i64) -> f64 {
        let h = derive_seed(self.noise_seed, (x as u64).wrapping_mul(0x1_0000_0001) ^ (y as u64).rotate_left(32));
        // sum of 4 uniforms, rescaled to unit variance
        let u = |shift: u32| ((h >> shift) & 0xFFFF) as f64 / 65535.0;
        (u(0) + u(16) + u(32) + u(48) - 2.0) * 3f64.sqrt()
    }
}

/// Samples the class surface on an `H×W` pixel grid.
pub fn generate_texture(class: &TextureClass, height: usize, width: usize, seed: u64) -> Result<Tensor> {
    if height < 16 || width < 16 {
        return Err(DataError::Parameter(format!("texture must be at least 16x16, got {height}x{width}")));
    }
    let field = TextureField::new(class, seed)?;
    Ok(Tensor::from_fn(&[height, width], |i| field.height((i % width) as f64, (i / width) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_class_is_constant_half() {
        let class = TextureClass { ridge_amplitude: 0.0, micro_noise: 0.0, ..default_classes(4)[1].clone() };
        let t = generate_texture(&class, 16, 20, 3).unwrap();
        assert!(t.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn deterministic_and_bounded() {
        let class = default_classes(10)[3].clone();
        let a = generate_texture(&class, 32, 32, 11).unwrap();
        let b = generate_texture(&class, 32, 32, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, generate_texture(&class, 32, 32, 12).unwrap());
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let class = TextureClass { weave_period_u: 1.5, ..default_classes(2)[0].clone() };
        assert!(matches!(generate_texture(&class, 32, 32, 0), Err(DataError::Parameter(_))));
        assert!(generate_texture(&default_classes(2)[0], 8, 32, 0).is_err());
    }

    #[test]
    fn value_noise_is_exact_on_lattice() {
        let f = TextureField::new(&default_classes(3)[2], 5).unwrap();
        assert_eq!(f.value_noise(7.0, 9.0), f.lattice(7, 9));
        assert_eq!(f.value_noise(-3.0, 2.0), f.lattice(-3, 2));
        let mid = f.value_noise(7.5, 9.0);
        assert!((mid - 0.5 * (f.lattice(7, 9) + f.lattice(8, 9))).abs() < 1e-15);
    }
}
