//! f64 reference interpreter for whole network graphs.
//!
//! Executes a built network's graph with the reference ops from
//! [`super::reference`], taking parameters from an external f64 store so
//! finite differences can perturb any element. Batch norm runs in
//! inference mode against the network's running statistics.

use fundus_dqa::backbones::{GraphOp, Network};

use super::reference as refop;
use super::reference::Dims4;

/// All parameters of a network as f64 vectors, in parameter order.
pub fn params_f64(net: &Network) -> Vec<Vec<f64>> {
    net.params()
        .iter()
        .map(|p| p.value.data().iter().map(|&v| v as f64).collect())
        .collect()
}

struct Value {
    data: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
}

/// Inference-mode logits of `net` on a single 3xRxR image, computed
/// entirely in f64 with `params` standing in for the stored parameters.
pub fn forward_f64(net: &Network, image: &[f64], params: &[Vec<f64>]) -> Vec<f64> {
    let r = net.input_resolution();
    let mut values: Vec<Option<Value>> = Vec::with_capacity(net.graph().len());
    let shape_of = |i: usize| -> Vec<usize> { net.params()[i].value.shape().to_vec() };
    for op in net.graph() {
        let value = match op {
            GraphOp::Input => Value { data: image.to_vec(), c: 3, h: r, w: r },
            GraphOp::Conv { input, weight, bias, stride, padding } => {
                let x = values[*input].as_ref().unwrap();
                let ws = shape_of(*weight);
                let (out, ho, wo) = refop::conv2d(
                    &x.data,
                    &Dims4 { n: 1, c: x.c, h: x.h, w: x.w },
                    &params[*weight],
                    ws[0],
                    ws[2],
                    ws[3],
                    &params[*bias],
                    *stride,
                    *padding,
                );
                Value { data: out, c: ws[0], h: ho, w: wo }
            }
            GraphOp::DepthwiseConv { input, weight, stride, padding } => {
                let x = values[*input].as_ref().unwrap();
                let ws = shape_of(*weight);
                let (out, ho, wo) = refop::depthwise_conv2d(
                    &x.data,
                    &Dims4 { n: 1, c: x.c, h: x.h, w: x.w },
                    &params[*weight],
                    ws[1],
                    ws[2],
                    *stride,
                    *padding,
                );
                Value { data: out, c: x.c, h: ho, w: wo }
            }
            GraphOp::BatchNorm { input, gamma, beta, state } => {
                let x = values[*input].as_ref().unwrap();
                let st = &net.bn_states()[*state].state;
                assert!(st.initialized, "reference forward needs initialized statistics");
                let rm: Vec<f64> = st.running_mean.iter().map(|&v| v as f64).collect();
                let rv: Vec<f64> = st.running_var.iter().map(|&v| v as f64).collect();
                let out = refop::batchnorm_infer(
                    &x.data,
                    &Dims4 { n: 1, c: x.c, h: x.h, w: x.w },
                    &params[*gamma],
                    &params[*beta],
                    &rm,
                    &rv,
                    1e-5,
                );
                Value { data: out, c: x.c, h: x.h, w: x.w }
            }
            GraphOp::Relu { input } => {
                let x = values[*input].as_ref().unwrap();
                Value { data: refop::relu(&x.data), c: x.c, h: x.h, w: x.w }
            }
            GraphOp::AvgPool { input, window, stride } => {
                let x = values[*input].as_ref().unwrap();
                let (out, ho, wo) = refop::avg_pool(
                    &x.data,
                    &Dims4 { n: 1, c: x.c, h: x.h, w: x.w },
                    *window,
                    *stride,
                );
                Value { data: out, c: x.c, h: ho, w: wo }
            }
            GraphOp::GlobalAvgPool { input } => {
                let x = values[*input].as_ref().unwrap();
                let out = refop::global_avg_pool(&x.data, &Dims4 { n: 1, c: x.c, h: x.h, w: x.w });
                Value { data: out, c: x.c, h: 1, w: 1 }
            }
            GraphOp::Concat { inputs } => {
                let mut data = Vec::new();
                let mut c = 0;
                let (mut h, mut w) = (0, 0);
                for &i in inputs {
                    let v = values[i].as_ref().unwrap();
                    data.extend_from_slice(&v.data);
                    c += v.c;
                    h = v.h;
                    w = v.w;
                }
                Value { data, c, h, w }
            }
            GraphOp::Add { lhs, rhs } => {
                let a = values[*lhs].as_ref().unwrap();
                let b = values[*rhs].as_ref().unwrap();
                let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
                Value { data, c: a.c, h: a.h, w: a.w }
            }
            GraphOp::FullyConnected { input, weight, bias } => {
                let x = values[*input].as_ref().unwrap();
                let ws = shape_of(*weight);
                let out = refop::fully_connected(&x.data, &params[*weight], &params[*bias], 1, ws[1], ws[0]);
                Value { data: out, c: ws[0], h: 1, w: 1 }
            }
        };
        values.push(Some(value));
    }
    values.last().unwrap().as_ref().unwrap().data.clone()
}
