//! Naive reference implementations shared by the integration tests. Nothing
//! here calls into the library's numeric kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stam::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct quadruple loop over output pixel, output channel, tap and input
/// channel; zero padding.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, w, ci) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, co) = (kernel.shape()[0], kernel.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[oh, ow, co]);
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..co {
                let mut acc = bias.values()[o];
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..ci {
                            acc += input.at(&[iy as usize, ix as usize, c]) * kernel.at(&[ky, kx, c, o]);
                        }
                    }
                }
                let off = out.offset(&[oy, ox, o]);
                out.values_mut()[off] = acc;
            }
        }
    }
    out
}

pub fn pool2d(input: &Tensor, window: usize, stride: usize, max: bool) -> Tensor {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let vals: Vec<f64> = (0..window)
                    .flat_map(|dy| (0..window).map(move |dx| (dy, dx)))
                    .map(|(dy, dx)| input.at(&[oy * stride + dy, ox * stride + dx, ch]))
                    .collect();
                let v = if max {
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                };
                let off = out.offset(&[oy, ox, ch]);
                out.values_mut()[off] = v;
            }
        }
    }
    out
}

pub fn channel_pool(input: &Tensor, max: bool) -> Tensor {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    Tensor::from_fn(&[h, w, 1], |p| {
        let vals: Vec<f64> = (0..c).map(|ch| input.at(&[p / w, p % w, ch])).collect();
        if max {
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        } else {
            vals.iter().sum::<f64>() / c as f64
        }
    })
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Tensor::from_fn(&[p, r], |idx| {
        let (i, j) = (idx / r, idx % r);
        (0..q).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum()
    })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Temporal head written straight from the attention equations:
/// `s_ij = q_i·k_j`, `β_{j,i} = exp(s_ij) / Σ_i exp(s_ij)`,
/// `o_j = Σ_i β_{j,i} v_i + x_j`. Returns `(β as [j][i], o)`.
pub fn temporal_head(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> (Vec<Vec<f64>>, Tensor) {
    let (m, c) = (x.shape()[0], x.shape()[1]);
    let d = wq.shape()[1];
    let proj = |w: &Tensor, width: usize, i: usize| -> Vec<f64> {
        (0..width).map(|o| (0..c).map(|ch| x.at(&[i, ch]) * w.at(&[ch, o])).sum()).collect()
    };
    let q: Vec<Vec<f64>> = (0..m).map(|i| proj(wq, d, i)).collect();
    let k: Vec<Vec<f64>> = (0..m).map(|i| proj(wk, d, i)).collect();
    let v: Vec<Vec<f64>> = (0..m).map(|i| proj(wv, c, i)).collect();
    let mut beta = vec![vec![0.0; m]; m];
    for j in 0..m {
        let s: Vec<f64> = (0..m).map(|i| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum()).collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
        for i in 0..m {
            beta[j][i] = (s[i] - max).exp() / z;
        }
    }
    let out = Tensor::from_fn(&[m, c], |idx| {
        let (j, ch) = (idx / c, idx % c);
        (0..m).map(|i| beta[j][i] * v[i][ch]).sum::<f64>() + x.at(&[j, ch])
    });
    (beta, out)
}

/// Per-tensor max relative error between backprop gradients of the
/// cross-entropy loss and central differences (step `h`) computed by
/// re-running the forward pass on perturbed copies of the parameters.
pub fn model_gradient_errors(
    params: &stam::model::StamParams,
    frames: &[Tensor],
    label: usize,
    h: f64,
) -> Vec<(String, f64)> {
    use stam::model::Forward;
    use stam::Tape;

    let loss_of = |p: &stam::model::StamParams| {
        let mut tape = Tape::new();
        let fwd = Forward::run(&mut tape, p, frames, false).unwrap();
        let l = tape.cross_entropy(fwd.logits, label).unwrap();
        tape.value(l).values()[0]
    };
    let mut tape = Tape::new();
    let fwd = Forward::run(&mut tape, params, frames, true).unwrap();
    let loss = tape.cross_entropy(fwd.logits, label).unwrap();
    tape.backward(loss).unwrap();

    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut out = Vec::new();
    for (idx, name) in names.into_iter().enumerate() {
        let analytic = tape.grad(fwd.params.all[idx]).unwrap().to_vec();
        let mut probe = params.clone();
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let x = params.tensors()[idx].values()[i];
            probe.tensors_mut()[idx].values_mut()[i] = x + h;
            let plus = loss_of(&probe);
            probe.tensors_mut()[idx].values_mut()[i] = x - h;
            let minus = loss_of(&probe);
            probe.tensors_mut()[idx].values_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
        }
        out.push((name, worst));
    }
    out
}
