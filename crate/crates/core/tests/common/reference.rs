//! Independent f64 reference implementations used as gradient oracles.
//!
//! Everything here is written as direct loops from the mathematical
//! definitions, deliberately sharing no code with the crate under test.

pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Cross-correlation with zero padding, direct seven-loop form.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    d: &Dims4,
    w: &[f64],
    k_out: usize,
    kh: usize,
    kw: usize,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let h_out = (d.h + 2 * pad - kh) / stride + 1;
    let w_out = (d.w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; d.n * k_out * h_out * w_out];
    for n in 0..d.n {
        for k in 0..k_out {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = b[k];
                    for c in 0..d.c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                    continue;
                                }
                                let xv = x[((n * d.c + c) * d.h + ih as usize) * d.w + iw as usize];
                                let wv = w[((k * d.c + c) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * k_out + k) * h_out + oh) * w_out + ow] = acc;
                }
            }
        }
    }
    (out, h_out, w_out)
}

pub fn depthwise_conv2d(
    x: &[f64],
    d: &Dims4,
    w: &[f64],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let h_out = (d.h + 2 * pad - kh) / stride + 1;
    let w_out = (d.w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; d.n * d.c * h_out * w_out];
    for n in 0..d.n {
        for c in 0..d.c {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = 0.0;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            let iw = (ow * stride + kj) as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= d.h as isize || iw >= d.w as isize {
                                continue;
                            }
                            acc += x[((n * d.c + c) * d.h + ih as usize) * d.w + iw as usize]
                                * w[(c * kh + ki) * kw + kj];
                        }
                    }
                    out[((n * d.c + c) * h_out + oh) * w_out + ow] = acc;
                }
            }
        }
    }
    (out, h_out, w_out)
}

pub fn batchnorm_train(x: &[f64], d: &Dims4, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let plane = d.h * d.w;
    let m = (d.n * plane) as f64;
    let mut out = vec![0.0; x.len()];
    for c in 0..d.c {
        let mut sum = 0.0;
        for n in 0..d.n {
            for i in 0..plane {
                sum += x[(n * d.c + c) * plane + i];
            }
        }
        let mean = sum / m;
        let mut sq = 0.0;
        for n in 0..d.n {
            for i in 0..plane {
                let v = x[(n * d.c + c) * plane + i] - mean;
                sq += v * v;
            }
        }
        let var = sq / m;
        let inv = 1.0 / (var + eps).sqrt();
        for n in 0..d.n {
            for i in 0..plane {
                let idx = (n * d.c + c) * plane + i;
                out[idx] = gamma[c] * (x[idx] - mean) * inv + beta[c];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer(
    x: &[f64],
    d: &Dims4,
    gamma: &[f64],
    beta: &[f64],
    rm: &[f64],
    rv: &[f64],
    eps: f64,
) -> Vec<f64> {
    let plane = d.h * d.w;
    let mut out = vec![0.0; x.len()];
    for c in 0..d.c {
        let inv = 1.0 / (rv[c] + eps).sqrt();
        for n in 0..d.n {
            for i in 0..plane {
                let idx = (n * d.c + c) * plane + i;
                out[idx] = gamma[c] * (x[idx] - rm[c]) * inv + beta[c];
            }
        }
    }
    out
}

pub fn avg_pool(x: &[f64], d: &Dims4, window: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let h_out = (d.h - window) / stride + 1;
    let w_out = (d.w - window) / stride + 1;
    let mut out = vec![0.0; d.n * d.c * h_out * w_out];
    for p in 0..d.n * d.c {
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut acc = 0.0;
                for ki in 0..window {
                    for kj in 0..window {
                        acc += x[p * d.h * d.w + (oh * stride + ki) * d.w + ow * stride + kj];
                    }
                }
                out[(p * h_out + oh) * w_out + ow] = acc / (window * window) as f64;
            }
        }
    }
    (out, h_out, w_out)
}

pub fn max_pool(x: &[f64], d: &Dims4, window: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let h_out = (d.h - window) / stride + 1;
    let w_out = (d.w - window) / stride + 1;
    let mut out = vec![0.0; d.n * d.c * h_out * w_out];
    for p in 0..d.n * d.c {
        for oh in 0..h_out {
            for ow in 0..w_out {
                let mut best = f64::NEG_INFINITY;
                for ki in 0..window {
                    for kj in 0..window {
                        best = best
                            .max(x[p * d.h * d.w + (oh * stride + ki) * d.w + ow * stride + kj]);
                    }
                }
                out[(p * h_out + oh) * w_out + ow] = best;
            }
        }
    }
    (out, h_out, w_out)
}

pub fn global_avg_pool(x: &[f64], d: &Dims4) -> Vec<f64> {
    let plane = d.h * d.w;
    (0..d.n * d.c)
        .map(|p| x[p * plane..(p + 1) * plane].iter().sum::<f64>() / plane as f64)
        .collect()
}

pub fn fully_connected(x: &[f64], w: &[f64], b: &[f64], n: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut acc = b[o];
            for j in 0..din {
                acc += x[i * din + j] * w[o * din + j];
            }
            out[i * dout + o] = acc;
        }
    }
    out
}

pub fn logit_margin(logits: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| logits[i * 2 + 1] - logits[i * 2]).collect()
}

pub fn sigmoid_bce_mean(margins: &[f64], targets: &[f64]) -> f64 {
    margins
        .iter()
        .zip(targets)
        .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / margins.len() as f64
}

pub fn softmax_ce_mean(logits: &[f64], classes: &[usize], n: usize, c: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[classes[i]];
    }
    total / n as f64
}

pub fn weighted_sum(x: &[f64], r: &[f64]) -> f64 {
    x.iter().zip(r).map(|(a, b)| a * b).sum()
}
