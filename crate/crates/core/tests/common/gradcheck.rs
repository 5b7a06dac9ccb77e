//! Per-operation gradient checks: analytic f32 gradients from the tape
//! against central finite differences of the f64 reference ops.
//!
//! Each check draws random shapes and values from its seed, reduces the op
//! output through a random weighted sum, and returns the worst relative
//! error over all input gradients.

use super::reference::{self as refop, Dims4};
use super::{fd_grads, max_rel_err, rand_tensor, rand_tensor_off_kink, rng, to_f64};
use fundus_dqa::tensor::{BnMode, BnState, GradientTape};
use rand::Rng;

fn rand_weights(rng: &mut rand::rngs::StdRng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn check_conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..3);
    let c = r.gen_range(1..4);
    let k = r.gen_range(1..4);
    let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
    let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
    let stride = r.gen_range(1..3);
    let padding = r.gen_range(0..2);
    let x = rand_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &[k, c, kh, kw], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[k], -0.5, 0.5);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let wid = tape.input(wt.clone());
    let bid = tape.input(b.clone());
    let out = tape.conv2d(xid, wid, bid, stride, padding).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n, c, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x), to_f64(&wt), to_f64(&b)];
    let mut f = |p: &[Vec<f64>]| {
        let (y, _, _) = refop::conv2d(&p[0], &dims, &p[1], k, kh, kw, &p[2], stride, padding);
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-3);
    max_rel_err(grads.wrt(xid), &num[0])
        .max(max_rel_err(grads.wrt(wid), &num[1]))
        .max(max_rel_err(grads.wrt(bid), &num[2]))
}

pub fn check_depthwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..3);
    let c = r.gen_range(1..5);
    let (h, w) = (r.gen_range(3..7), r.gen_range(3..7));
    let k = r.gen_range(1..4);
    let stride = r.gen_range(1..3);
    let padding = r.gen_range(0..2);
    let x = rand_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &[c, k, k], -1.0, 1.0);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let wid = tape.input(wt.clone());
    let out = tape.depthwise_conv2d(xid, wid, stride, padding).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n, c, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x), to_f64(&wt)];
    let mut f = |p: &[Vec<f64>]| {
        let (y, _, _) = refop::depthwise_conv2d(&p[0], &dims, &p[1], k, k, stride, padding);
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-3);
    max_rel_err(grads.wrt(xid), &num[0]).max(max_rel_err(grads.wrt(wid), &num[1]))
}

pub fn check_batchnorm(seed: u64, train: bool) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(2..4);
    let c = r.gen_range(1..4);
    let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
    let eps = 1e-5f32;
    let x = rand_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);
    let gamma = rand_tensor(&mut r, &[c], 0.5, 1.5);
    let beta = rand_tensor(&mut r, &[c], -0.5, 0.5);
    let rm = rand_tensor(&mut r, &[c], -0.3, 0.3);
    let rv = rand_tensor(&mut r, &[c], 0.5, 1.5);

    let mut state = BnState::new(c);
    if !train {
        state.running_mean.copy_from_slice(rm.data());
        state.running_var.copy_from_slice(rv.data());
        state.initialized = true;
    }
    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let gid = tape.input(gamma.clone());
    let bid = tape.input(beta.clone());
    let mode = if train { BnMode::Train } else { BnMode::Infer };
    let out = tape.batchnorm2d(xid, gid, bid, mode, &mut state, eps, 0.1).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n, c, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let rm64 = to_f64(&rm);
    let rv64 = to_f64(&rv);
    let inputs = vec![to_f64(&x), to_f64(&gamma), to_f64(&beta)];
    let mut f = |p: &[Vec<f64>]| {
        let y = if train {
            refop::batchnorm_train(&p[0], &dims, &p[1], &p[2], eps as f64)
        } else {
            refop::batchnorm_infer(&p[0], &dims, &p[1], &p[2], &rm64, &rv64, eps as f64)
        };
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-4);
    max_rel_err(grads.wrt(xid), &num[0])
        .max(max_rel_err(grads.wrt(gid), &num[1]))
        .max(max_rel_err(grads.wrt(bid), &num[2]))
}

pub fn check_avg_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..3);
    let c = r.gen_range(1..4);
    let (h, w) = (r.gen_range(4..8), r.gen_range(4..8));
    let window = r.gen_range(2..4).min(h).min(w);
    let stride = r.gen_range(1..3);
    let x = rand_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let out = tape.avg_pool2d(xid, window, stride).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n, c, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x)];
    let mut f = |p: &[Vec<f64>]| {
        let (y, _, _) = refop::avg_pool(&p[0], &dims, window, stride);
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-3);
    max_rel_err(grads.wrt(xid), &num[0])
}

pub fn check_max_pool(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..3);
    let c = r.gen_range(1..3);
    let (h, w) = (r.gen_range(4..7), r.gen_range(4..7));
    let window = 2;
    let stride = r.gen_range(1..3);
    let x = rand_tensor(&mut r, &[n, c, h, w], -1.0, 1.0);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let out = tape.max_pool2d(xid, window, stride).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n, c, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x)];
    let mut f = |p: &[Vec<f64>]| {
        let (y, _, _) = refop::max_pool(&p[0], &dims, window, stride);
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-6);
    max_rel_err(grads.wrt(xid), &num[0])
}

pub fn check_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..3);
    let k = r.gen_range(1..5);
    let (h, w) = (r.gen_range(2..6), r.gen_range(2..6));
    let x = rand_tensor(&mut r, &[n, k, h, w], -1.0, 1.0);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let out = tape.global_avg_pool(xid).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n, c: k, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x)];
    let mut f = |p: &[Vec<f64>]| refop::weighted_sum(&refop::global_avg_pool(&p[0], &dims), &rw);
    let num = fd_grads(&mut f, &inputs, 1e-4);
    max_rel_err(grads.wrt(xid), &num[0])
}

pub fn check_fully_connected(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..4);
    let d = r.gen_range(1..8);
    let o = r.gen_range(1..6);
    let x = rand_tensor(&mut r, &[n, d], -1.0, 1.0);
    let wt = rand_tensor(&mut r, &[o, d], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[o], -0.5, 0.5);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let wid = tape.input(wt.clone());
    let bid = tape.input(b.clone());
    let out = tape.fully_connected(xid, wid, bid).unwrap();
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x), to_f64(&wt), to_f64(&b)];
    let mut f = |p: &[Vec<f64>]| {
        refop::weighted_sum(&refop::fully_connected(&p[0], &p[1], &p[2], n, d, o), &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-3);
    max_rel_err(grads.wrt(xid), &num[0])
        .max(max_rel_err(grads.wrt(wid), &num[1]))
        .max(max_rel_err(grads.wrt(bid), &num[2]))
}

pub fn check_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.gen_range(1..4), r.gen_range(1..6)];
    let x = rand_tensor_off_kink(&mut r, &shape, 0.05);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let out = tape.relu(xid);
    let weights = rand_weights(&mut r, tape.value(out).numel());
    let loss = tape.weighted_sum(out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x)];
    let mut f = |p: &[Vec<f64>]| refop::weighted_sum(&refop::relu(&p[0]), &rw);
    let num = fd_grads(&mut f, &inputs, 1e-6);
    max_rel_err(grads.wrt(xid), &num[0])
}

pub fn check_concat(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w) = (r.gen_range(2..5), r.gen_range(2..5));
    let c1 = r.gen_range(1..4);
    let c2 = r.gen_range(1..4);
    let n = r.gen_range(1..3);
    let a = rand_tensor(&mut r, &[n, c1, h, w], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[n, c2, h, w], -1.0, 1.0);

    let mut tape = GradientTape::new();
    let aid = tape.input(a.clone());
    let bid = tape.input(b.clone());
    let cat = tape.concat_channels(&[aid, bid]).unwrap();
    let weights = rand_weights(&mut r, tape.value(cat).numel());
    let loss = tape.weighted_sum(cat, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&a), to_f64(&b)];
    let sample1 = c1 * h * w;
    let sample2 = c2 * h * w;
    let mut f = |p: &[Vec<f64>]| {
        let mut y = Vec::new();
        for i in 0..n {
            y.extend_from_slice(&p[0][i * sample1..(i + 1) * sample1]);
            y.extend_from_slice(&p[1][i * sample2..(i + 1) * sample2]);
        }
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, 1e-4);
    max_rel_err(grads.wrt(aid), &num[0]).max(max_rel_err(grads.wrt(bid), &num[1]))
}

pub fn check_sigmoid_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..8);
    let logits = rand_tensor(&mut r, &[n, 2], -2.0, 2.0);
    let targets: Vec<f32> = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();

    let mut tape = GradientTape::new();
    let lid = tape.input(logits.clone());
    let margins = tape.logit_margin(lid).unwrap();
    let loss = tape.sigmoid_bce_mean(margins, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();

    let t64: Vec<f64> = targets.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&logits)];
    let mut f = |p: &[Vec<f64>]| refop::sigmoid_bce_mean(&refop::logit_margin(&p[0], n), &t64);
    let num = fd_grads(&mut f, &inputs, 1e-4);
    max_rel_err(grads.wrt(lid), &num[0])
}

pub fn check_softmax_ce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.gen_range(1..6);
    let c = r.gen_range(2..5);
    let logits = rand_tensor(&mut r, &[n, c], -2.0, 2.0);
    let classes: Vec<usize> = (0..n).map(|_| r.gen_range(0..c)).collect();

    let mut tape = GradientTape::new();
    let lid = tape.input(logits.clone());
    let loss = tape.softmax_cross_entropy_mean(lid, &classes).unwrap();
    let grads = tape.backward(loss).unwrap();

    let inputs = vec![to_f64(&logits)];
    let mut f = |p: &[Vec<f64>]| refop::softmax_ce_mean(&p[0], &classes, n, c);
    let num = fd_grads(&mut f, &inputs, 1e-4);
    max_rel_err(grads.wrt(lid), &num[0])
}

/// Composite network: conv -> relu -> global average pool -> fully
/// connected -> weighted score. Exercises the whole tape end to end.
///
/// Runs at eps 1e-5 and re-probes at 1e-6 when the error is large: a ReLU
/// kink inside the difference window produces a spurious mismatch that
/// shrinks with eps, while a real gradient bug does not.
pub fn check_composite(seed: u64) -> f64 {
    let err = composite_at_eps(seed, 1e-5);
    if err > 5e-3 {
        composite_at_eps(seed, 1e-6)
    } else {
        err
    }
}

fn composite_at_eps(seed: u64, eps: f64) -> f64 {
    let mut r = rng(seed);
    let (c, h, w) = (3, 16, 16);
    let k = 4;
    let o = 2;
    let x = rand_tensor(&mut r, &[1, c, h, w], -1.0, 1.0);
    let conv_w = rand_tensor(&mut r, &[k, c, 3, 3], -0.5, 0.5);
    let conv_b = rand_tensor(&mut r, &[k], -0.2, 0.2);
    let fc_w = rand_tensor(&mut r, &[o, k], -0.7, 0.7);
    let fc_b = rand_tensor(&mut r, &[o], -0.2, 0.2);

    let mut tape = GradientTape::new();
    let xid = tape.input(x.clone());
    let cw = tape.input(conv_w.clone());
    let cb = tape.input(conv_b.clone());
    let fw = tape.input(fc_w.clone());
    let fb = tape.input(fc_b.clone());
    let y = tape.conv2d(xid, cw, cb, 1, 1).unwrap();
    let y = tape.relu(y);
    let y = tape.global_avg_pool(y).unwrap();
    let y = tape.fully_connected(y, fw, fb).unwrap();
    let weights = rand_weights(&mut r, o);
    let loss = tape.weighted_sum(y, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let dims = Dims4 { n: 1, c, h, w };
    let rw: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
    let inputs = vec![to_f64(&x), to_f64(&conv_w), to_f64(&conv_b), to_f64(&fc_w), to_f64(&fc_b)];
    let mut f = |p: &[Vec<f64>]| {
        let (y, hh, ww) = refop::conv2d(&p[0], &dims, &p[1], k, 3, 3, &p[2], 1, 1);
        let y = refop::relu(&y);
        let y = refop::global_avg_pool(&y, &Dims4 { n: 1, c: k, h: hh, w: ww });
        let y = refop::fully_connected(&y, &p[3], &p[4], 1, k, o);
        refop::weighted_sum(&y, &rw)
    };
    let num = fd_grads(&mut f, &inputs, eps);
    let mut worst: f64 = 0.0;
    for (id, n) in [(xid, 0), (cw, 1), (cb, 2), (fw, 3), (fb, 4)] {
        worst = worst.max(max_rel_err(grads.wrt(id), &num[n]));
    }
    worst
}

/// Every per-op check for one seed, as (name, worst relative error) pairs.
pub fn all_op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", check_conv2d(seed)),
        ("depthwise_conv2d", check_depthwise(seed)),
        ("batchnorm2d(train)", check_batchnorm(seed, true)),
        ("batchnorm2d(infer)", check_batchnorm(seed, false)),
        ("avg_pool2d", check_avg_pool(seed)),
        ("max_pool2d", check_max_pool(seed)),
        ("global_avg_pool", check_gap(seed)),
        ("fully_connected", check_fully_connected(seed)),
        ("relu", check_relu(seed)),
        ("concat_channels", check_concat(seed)),
        ("sigmoid_bce", check_sigmoid_bce(seed)),
        ("softmax_cross_entropy", check_softmax_ce(seed)),
    ]
}
