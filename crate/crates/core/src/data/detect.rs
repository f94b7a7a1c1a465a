use super::render::RenderParams;
use crate::tensor::Tensor;

/// Block-mean absolute deviation from the idle frame above which a frame
/// counts as contact.
pub const DEFAULT_CONTACT_THRESHOLD: f64 = 0.05;

/// Side of the square blocks averaged before comparing frames.
pub const CONTACT_BLOCK: usize = 4;

/// Mean over `CONTACT_BLOCK`-sized blocks of the absolute block-mean
/// difference between `frame` and `reference` (`[H, W]` or `[H, W, 1]`).
/// Averaging first suppresses per-pixel sensor noise.
pub fn frame_energy(frame: &Tensor, reference: &Tensor) -> f64 {
    assert_eq!(frame.shape(), reference.shape(), "frame and reference shapes differ");
    let (h, w) = (frame.shape()[0], frame.numel() / frame.shape()[0]);
    let (f, r) = (frame.values(), reference.values());
    let mut total = 0.0;
    let mut blocks = 0;
    for by in (0..h).step_by(CONTACT_BLOCK) {
        for bx in (0..w).step_by(CONTACT_BLOCK) {
            let (mut sum, mut count) = (0.0, 0);
            for y in by..(by + CONTACT_BLOCK).min(h) {
                for x in bx..(bx + CONTACT_BLOCK).min(w) {
                    sum += f[y * w + x] - r[y * w + x];
                    count += 1;
                }
            }
            total += (sum / count as f64).abs();
            blocks += 1;
        }
    }
    total / blocks as f64
}

/// First frame whose deviation from `reference` exceeds `threshold`, or
/// `frames.len()` when none does.
pub fn detect_first_contact_with(frames: &[Tensor], reference: &Tensor, threshold: f64) -> usize {
    frames
        .iter()
        .position(|f| frame_energy(f, reference) > threshold)
        .unwrap_or(frames.len())
}

/// Onset detection against the default sensor's idle frame at the frames'
/// resolution, with [`DEFAULT_CONTACT_THRESHOLD`].
pub fn detect_first_contact(frames: &[Tensor]) -> usize {
    let Some(first) = frames.first() else { return 0 };
    let s = first.shape();
    let reference = RenderParams::with_size(s[0], s[1]).idle_frame();
    detect_first_contact_with(frames, &reference, DEFAULT_CONTACT_THRESHOLD)
}
