//! Layer primitives. Each forward has a matching backward taking the cached
//! forward input and the output gradient.

use super::tensor::Tensor3;
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution geometry: `kh x kw` kernel from `cin` to `cout` channels,
/// dilation `dil` along the feature axis, zero padding on each side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub dil: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    /// Unpadded, undilated.
    pub fn valid(kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Self { kh, kw, cin, cout, dil: 1, pad_top: 0, pad_bottom: 0, pad_left: 0, pad_right: 0 }
    }

    /// Fully connected layer as a 1x1 convolution.
    pub fn dense(cin: usize, cout: usize) -> Self {
        Self::valid(1, 1, cin, cout)
    }

    pub fn extent_h(&self) -> usize {
        self.kh + (self.dil - 1) * (self.kh - 1)
    }

    pub fn weight_dims(&self) -> Vec<usize> {
        vec![self.kh, self.kw, self.cin, self.cout]
    }

    pub fn fan_in(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn out_shape(&self, h: usize, t: usize) -> Result<(usize, usize)> {
        let ph = h + self.pad_top + self.pad_bottom;
        let pt = t + self.pad_left + self.pad_right;
        if self.extent_h() > ph || self.kw > pt {
            return Err(Error::KernelTooLarge { extent: self.extent_h(), height: ph });
        }
        Ok((ph - self.extent_h() + 1, pt - self.kw + 1))
    }
}

/// `y(o, s, co) = b(co) + sum w(i, j, ci, co) x(o + i*dil - pad_top, s + j - pad_left, ci)`,
/// zero outside `x`. Kernel layout is `[i][j][ci][co]`.
pub fn conv_forward(g: &ConvGeom, x: &Tensor3, w: &[f64], b: &[f64]) -> Result<Tensor3> {
    if x.c != g.cin {
        return Err(Error::ShapeMismatch(format!("convolution expects {} input channels, got {}", g.cin, x.c)));
    }
    let (ho, to) = g.out_shape(x.h, x.t)?;
    let mut y = Tensor3::zeros(ho, to, g.cout);
    for o in 0..ho {
        for s in 0..to {
            let base = y.idx(o, s, 0);
            let out = &mut y.data[base..base + g.cout];
            out.copy_from_slice(b);
            for i in 0..g.kh {
                let Some(hi) = (o + i * g.dil).checked_sub(g.pad_top).filter(|&v| v < x.h) else { continue };
                for j in 0..g.kw {
                    let Some(ti) = (s + j).checked_sub(g.pad_left).filter(|&v| v < x.t) else { continue };
                    let xrow = &x.data[x.idx(hi, ti, 0)..x.idx(hi, ti, 0) + g.cin];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let wo = ((i * g.kw + j) * g.cin + ci) * g.cout;
                        for (acc, &wv) in out.iter_mut().zip(&w[wo..wo + g.cout]) {
                            *acc += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of `conv_forward` with respect to input (when `need_dx`),
/// kernel and bias.
pub fn conv_backward(g: &ConvGeom, x: &Tensor3, w: &[f64], dy: &Tensor3, need_dx: bool) -> (Option<Tensor3>, Vec<f64>, Vec<f64>) {
    let mut dx = need_dx.then(|| Tensor3::zeros(x.h, x.t, x.c));
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.cout];
    for o in 0..dy.h {
        for s in 0..dy.t {
            let base = dy.idx(o, s, 0);
            let grad = &dy.data[base..base + g.cout];
            for (acc, &v) in db.iter_mut().zip(grad) {
                *acc += v;
            }
            for i in 0..g.kh {
                let Some(hi) = (o + i * g.dil).checked_sub(g.pad_top).filter(|&v| v < x.h) else { continue };
                for j in 0..g.kw {
                    let Some(ti) = (s + j).checked_sub(g.pad_left).filter(|&v| v < x.t) else { continue };
                    let xo = x.idx(hi, ti, 0);
                    for ci in 0..g.cin {
                        let xv = x.data[xo + ci];
                        let wo = ((i * g.kw + j) * g.cin + ci) * g.cout;
                        let wrow = &w[wo..wo + g.cout];
                        let dwrow = &mut dw[wo..wo + g.cout];
                        let mut dot = 0.0;
                        for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(grad) {
                            *dwv += xv * gv;
                            dot += wv * gv;
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx.data[xo + ci] += dot;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Undilated-or-dilated valid correlation along the feature axis with
/// `n x 1` kernels; frames are untouched.
pub fn conv_valid(x: &Tensor3, kernel: &[f64], n: usize, cout: usize, dilation: usize) -> Result<Tensor3> {
    let g = ConvGeom { dil: dilation, ..ConvGeom::valid(n, 1, x.c, cout) };
    if kernel.len() != n * x.c * cout {
        return Err(Error::ShapeMismatch(format!("kernel has {} values, expected {}", kernel.len(), n * x.c * cout)));
    }
    conv_forward(&g, x, kernel, &vec![0.0; cout])
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

pub fn selu_forward(x: &Tensor3) -> Tensor3 {
    Tensor3 { data: x.data.iter().map(|&v| selu(v)).collect(), ..*x }
}

pub fn selu_backward(x: &Tensor3, dy: &Tensor3) -> Tensor3 {
    Tensor3 { data: x.data.iter().zip(&dy.data).map(|(&v, &d)| d * selu_grad(v)).collect(), ..*x }
}

/// Normalized activations and per-channel inverse standard deviations from a
/// train-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<Tensor3>,
    pub inv_std: Vec<f64>,
}

/// Batch statistics of a train-mode pass: per-channel mean and unbiased
/// variance, for the running averages.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

impl BnBatchStats {
    /// `(1 - m) running + m batch`.
    pub fn blend_into(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        for (r, b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in running_var.iter_mut().zip(&self.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Per-channel normalization over batch, height and frames.
pub fn bn_forward_train(xs: &[Tensor3], gamma: &[f64], beta: &[f64]) -> Result<(Vec<Tensor3>, BnCache, BnBatchStats)> {
    if xs.len() < 2 {
        return Err(Error::InvalidConfig(format!("train-mode batch norm needs a batch of at least 2, got {}", xs.len())));
    }
    let c = xs[0].c;
    let count = (xs.len() * xs[0].h * xs[0].t) as f64;
    let mut mean = vec![0.0; c];
    for x in xs {
        for (i, v) in x.data.iter().enumerate() {
            mean[i % c] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for x in xs {
        for (i, v) in x.data.iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let xhat: Vec<Tensor3> = xs
        .iter()
        .map(|x| Tensor3 { data: x.data.iter().enumerate().map(|(i, v)| (v - mean[i % c]) * inv_std[i % c]).collect(), ..*x })
        .collect();
    let ys = xhat
        .iter()
        .map(|xh| Tensor3 { data: xh.data.iter().enumerate().map(|(i, v)| gamma[i % c] * v + beta[i % c]).collect(), ..*xh })
        .collect();
    let var_unbiased = var.iter().map(|v| v * count / (count - 1.0).max(1.0)).collect();
    Ok((ys, BnCache { xhat, inv_std }, BnBatchStats { mean, var_unbiased }))
}

pub fn bn_forward_eval(x: &Tensor3, gamma: &[f64], beta: &[f64], running_mean: &[f64], running_var: &[f64]) -> Tensor3 {
    let c = x.c;
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i % c;
            gamma[ch] * (v - running_mean[ch]) / (running_var[ch] + BN_EPS).sqrt() + beta[ch]
        })
        .collect();
    Tensor3 { data, ..*x }
}

/// Returns input gradients and the gradients of scale and shift.
pub fn bn_backward(dys: &[Tensor3], cache: &BnCache, gamma: &[f64]) -> (Vec<Tensor3>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let count = (dys.len() * dys[0].h * dys[0].t) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (dy, xh) in dys.iter().zip(&cache.xhat) {
        for (i, (d, x)) in dy.data.iter().zip(&xh.data).enumerate() {
            dgamma[i % c] += d * x;
            dbeta[i % c] += d;
        }
    }
    // dx = inv_std / M * (M dxhat - sum dxhat - xhat sum(dxhat xhat)), dxhat = gamma dy
    let dxs = dys
        .iter()
        .zip(&cache.xhat)
        .map(|(dy, xh)| {
            let data = dy
                .data
                .iter()
                .zip(&xh.data)
                .enumerate()
                .map(|(i, (d, x))| {
                    let ch = i % c;
                    gamma[ch] * cache.inv_std[ch] / count * (count * d - dbeta[ch] - x * dgamma[ch])
                })
                .collect();
            Tensor3 { data, ..*dy }
        })
        .collect();
    (dxs, dgamma, dbeta)
}

/// Mean and population variance over frames for every (row, channel),
/// returned as a `1 x 1 x 2HC` tensor: means first, index `h * C + c`.
pub fn stats_pool(x: &Tensor3) -> Result<Tensor3> {
    if x.t < 2 {
        return Err(Error::ShapeMismatch(format!("statistics pooling needs at least 2 frames, got {}", x.t)));
    }
    let (hc, tn) = (x.h * x.c, x.t as f64);
    let mut out = vec![0.0; 2 * hc];
    for h in 0..x.h {
        for c in 0..x.c {
            let mean = (0..x.t).map(|t| x.get(h, t, c)).sum::<f64>() / tn;
            let var = (0..x.t).map(|t| (x.get(h, t, c) - mean).powi(2)).sum::<f64>() / tn;
            out[h * x.c + c] = mean;
            out[hc + h * x.c + c] = var;
        }
    }
    Ok(Tensor3::vector(out))
}

pub fn stats_pool_backward(x: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let (hc, tn) = (x.h * x.c, x.t as f64);
    let mut dx = Tensor3::zeros(x.h, x.t, x.c);
    for h in 0..x.h {
        for c in 0..x.c {
            let mean = (0..x.t).map(|t| x.get(h, t, c)).sum::<f64>() / tn;
            let (dm, dv) = (dy.data[h * x.c + c], dy.data[hc + h * x.c + c]);
            for t in 0..x.t {
                let at = dx.idx(h, t, c);
                dx.data[at] = dm / tn + dv * 2.0 * (x.data[at] - mean) / tn;
            }
        }
    }
    dx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, h: usize, t: usize, c: usize) -> Tensor3 {
        Tensor3::from_vec(h, t, c, (0..h * t * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn selu_values() {
        assert_eq!(selu(0.0), 0.0);
        assert!((selu(1.0) - 1.0507009873554805).abs() < 1e-15);
        assert!((selu(-1.0) - SELU_LAMBDA * SELU_ALPHA * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: f64 = rng.random_range(-3.0..3.0);
            let h = 1e-6;
            let fd = (selu(x + h) - selu(x - h)) / (2.0 * h);
            assert!((fd - selu_grad(x)).abs() < 1e-8, "{x}");
        }
    }

    #[test]
    fn conv_valid_heights() {
        let x = Tensor3::zeros(39, 4, 1);
        assert_eq!(conv_valid(&x, &[0.0; 3], 3, 1, 1).unwrap().shape(), [37, 4, 1]);
        let x = Tensor3::zeros(33, 4, 1);
        assert_eq!(conv_valid(&x, &[0.0; 7], 7, 1, 3).unwrap().h, 33 - 7 - 12 + 1);
        let x = Tensor3::zeros(5, 4, 1);
        assert!(matches!(conv_valid(&x, &[0.0; 3], 3, 1, 3), Err(Error::KernelTooLarge { extent: 7, height: 5 })));
    }

    #[test]
    fn identity_kernel_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 6, 5, 1);
        assert_eq!(conv_valid(&x, &[1.0], 1, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom { kh: 3, kw: 2, cin: 2, cout: 3, dil: 2, pad_top: 1, pad_bottom: 2, pad_left: 1, pad_right: 0 };
        let x = random_tensor(&mut rng, 7, 5, 2);
        let w: Vec<f64> = (0..3 * 2 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let y = conv_forward(&g, &x, &w, &b).unwrap();
        let padded = |h: isize, t: isize, c: usize| {
            if h < 0 || t < 0 || h >= 7 || t >= 5 { 0.0 } else { x.get(h as usize, t as usize, c) }
        };
        assert_eq!(y.shape(), [7 + 3 - 5 + 1, 5 + 1 - 2 + 1, 3]);
        for o in 0..y.h {
            for s in 0..y.t {
                for co in 0..3 {
                    let mut acc = b[co];
                    for i in 0..3 {
                        for j in 0..2 {
                            for ci in 0..2 {
                                let hv = o as isize + 2 * i as isize - 1;
                                let tv = s as isize + j as isize - 1;
                                acc += w[((i * 2 + j) * 2 + ci) * 3 + co] * padded(hv, tv, ci);
                            }
                        }
                    }
                    assert!((y.get(o, s, co) - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = ConvGeom { kh: 2, kw: 3, cin: 2, cout: 2, dil: 2, pad_top: 1, pad_bottom: 1, pad_left: 1, pad_right: 1 };
        let x = random_tensor(&mut rng, 5, 4, 2);
        let w: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = vec![0.3, -0.1];
        let y = conv_forward(&g, &x, &w, &b).unwrap();
        let probe = random_tensor(&mut rng, y.h, y.t, y.c);
        let loss = |x: &Tensor3, w: &[f64]| -> f64 {
            conv_forward(&g, x, w, &b).unwrap().data.iter().zip(&probe.data).map(|(a, p)| a * p).sum()
        };
        let (dx, dw, db) = conv_backward(&g, &x, &w, &probe, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            assert!(((loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h) - dx.data[i]).abs() < 1e-7);
        }
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            assert!(((loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h) - dw[i]).abs() < 1e-7);
        }
        let sums: Vec<f64> = (0..2).map(|c| (0..probe.data.len()).filter(|i| i % 2 == c).map(|i| probe.data[i]).sum()).collect();
        assert!((db[0] - sums[0]).abs() < 1e-12 && (db[1] - sums[1]).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Tensor3> = (0..3).map(|_| random_tensor(&mut rng, 4, 5, 2)).collect();
        let xs: Vec<Tensor3> = xs.into_iter().map(|mut x| { x.data.iter_mut().for_each(|v| *v = 3.0 * *v + 2.0); x }).collect();
        let (ys, _, _) = bn_forward_train(&xs, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = ys.iter().flat_map(|y| y.data.iter().skip(c).step_by(2).copied()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-4);
        }
        let constant = vec![Tensor3::from_vec(2, 2, 1, vec![4.0; 4]); 2];
        let (ys, _, _) = bn_forward_train(&constant, &[1.0], &[0.0]).unwrap();
        assert!(ys.iter().all(|y| y.data.iter().all(|&v| v == 0.0)));
        assert!(bn_forward_train(&constant[..1], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Tensor3> = (0..3).map(|_| random_tensor(&mut rng, 2, 3, 2)).collect();
        let probe: Vec<Tensor3> = (0..3).map(|_| random_tensor(&mut rng, 2, 3, 2)).collect();
        let gamma = [1.3, 0.7];
        let beta = [0.2, -0.4];
        let loss = |xs: &[Tensor3], gamma: &[f64]| -> f64 {
            let (ys, _, _) = bn_forward_train(xs, gamma, &beta).unwrap();
            ys.iter().zip(&probe).map(|(y, p)| y.data.iter().zip(&p.data).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let (_, cache, _) = bn_forward_train(&xs, &gamma, &beta).unwrap();
        let (dxs, dgamma, _) = bn_backward(&probe, &cache, &gamma);
        let h = 1e-6;
        for s in 0..3 {
            for i in 0..12 {
                let (mut xp, mut xm) = (xs.clone(), xs.clone());
                xp[s].data[i] += h;
                xm[s].data[i] -= h;
                let fd = (loss(&xp, &gamma) - loss(&xm, &gamma)) / (2.0 * h);
                let a = dxs[s].data[i];
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-3), "{fd} {a}");
            }
        }
        for c in 0..2 {
            let (mut gp, mut gm) = (gamma, gamma);
            gp[c] += h;
            gm[c] -= h;
            let fd = (loss(&xs, &gp) - loss(&xs, &gm)) / (2.0 * h);
            assert!((fd - dgamma[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn stats_pool_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_tensor(&mut rng, 3, 6, 2);
        let p = stats_pool(&x).unwrap();
        assert_eq!(p.shape(), [1, 1, 12]);
        for h in 0..3 {
            for c in 0..2 {
                let vals: Vec<f64> = (0..6).map(|t| x.get(h, t, c)).collect();
                let m = vals.iter().sum::<f64>() / 6.0;
                let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0;
                assert!((p.data[h * 2 + c] - m).abs() < 1e-10);
                assert!((p.data[6 + h * 2 + c] - v).abs() < 1e-10);
            }
        }
        let flat = Tensor3::from_vec(2, 4, 1, vec![1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
        assert_eq!(&stats_pool(&flat).unwrap().data[2..], &[0.0, 0.0]);
        assert!(stats_pool(&Tensor3::zeros(2, 1, 1)).is_err());
    }

    #[test]
    fn softmax_and_argmax() {
        let p = softmax(&[2.0, 2.0, 2.0, 2.0]);
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p[0] > 0.999);
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
    }
}
