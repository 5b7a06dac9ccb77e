//! Grad-CAM saliency maps and overlay rendering.
//!
//! For a chosen class the gradient of its pre-softmax logit is taken with
//! respect to the final convolutional activation maps; global average
//! pooling of those gradients yields one importance weight per map, and the
//! rectified weighted sum of the maps is the raw saliency. The raw map is
//! upsampled to the input size and rescaled to [0, 1] for rendering.

use crate::backbones::Network;
use crate::error::{Error, Result};
use crate::hierarchy::{HierarchicalClassifier, Prediction, StageDecision};
use crate::imgio::RgbImage;
use crate::tensor::{bilinear_upsample, Tensor, TensorError};

/// Saliency at final-conv resolution (`raw`), upsampled to the input size,
/// and normalized to [0, 1]. Raw values are non-negative; a map whose peak
/// is below 1e-12 normalizes to all zeros instead of amplifying noise.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub raw: Tensor,
    pub upsampled: Tensor,
    pub normalized: Tensor,
}

pub const ZERO_MAP_EPSILON: f32 = 1e-12;

/// Grad-CAM for `class_index` of the network's output head.
pub fn grad_cam(net: &Network, image: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    if class_index >= net.num_outputs() {
        return Err(Error::Tensor(TensorError::IndexOutOfBounds {
            index: class_index,
            len: net.num_outputs(),
        }));
    }
    if image.shape().len() != 3 {
        return Err(Error::Tensor(TensorError::InvalidShape(format!(
            "grad_cam expects a single 3xHxW image, got {:?}",
            image.shape()
        ))));
    }
    let mut traced = net.trace_infer(image)?;
    let score = traced.tape.pick(traced.logits, class_index)?;
    let grads = traced.tape.backward(score)?;

    let activations = traced.tape.value(traced.final_conv);
    let gradient = grads.wrt(traced.final_conv);
    let (k, h, w) = match activations.shape() {
        [k, h, w] => (*k, *h, *w),
        other => {
            return Err(Error::Tensor(TensorError::InvalidShape(format!(
                "final conv activations must be KxHxW, got {other:?}"
            ))))
        }
    };

    // importance weight per map: global average pooling of its gradient
    let plane = h * w;
    let g = gradient.data();
    let a = activations.data();
    let mut raw = vec![0.0f32; plane];
    for map in 0..k {
        let weight: f32 =
            g[map * plane..(map + 1) * plane].iter().sum::<f32>() / plane as f32;
        for (acc, &av) in raw.iter_mut().zip(&a[map * plane..(map + 1) * plane]) {
            *acc += weight * av;
        }
    }
    for v in &mut raw {
        *v = v.max(0.0); // keep only positive correlations
    }
    let raw = Tensor::new(&[h, w], raw)?;

    let resolution = net.input_resolution();
    let upsampled = bilinear_upsample(&raw, resolution, resolution, true)?;
    let normalized = normalize_map(&upsampled);
    Ok(SaliencyMap { raw, upsampled, normalized })
}

fn normalize_map(map: &Tensor) -> Tensor {
    let max = map.data().iter().cloned().fold(0.0f32, f32::max);
    if max < ZERO_MAP_EPSILON {
        return Tensor::zeros(map.shape());
    }
    let data = map.data().iter().map(|&v| v / max).collect();
    Tensor::new(map.shape(), data).expect("shape preserved")
}

/// Grad-CAM for a routed prediction: the stage that produced the final
/// label explains it, for the class it actually decided.
pub fn explain_prediction(
    hc: &HierarchicalClassifier,
    image: &Tensor,
    prediction: &Prediction,
) -> Result<SaliencyMap> {
    let stage = hc.stage(prediction.explainer_role);
    let class_index = match prediction.stage2().decision {
        StageDecision::Positive => 1,
        StageDecision::Negative => 0,
    };
    grad_cam(stage.network(), image, class_index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverlayKind {
    Heat,
    Transparency,
}

/// RGB rendering with all channel values in [0, 1].
#[derive(Clone, Debug)]
pub struct OverlayImage {
    pub pixels: RgbImage,
    pub kind: OverlayKind,
}

/// Monotone blue -> green -> red map over m in [0, 1]:
/// R = clamp(2m-1), G = 1-|2m-1|, B = clamp(1-2m).
pub fn colormap(m: f32) -> [f32; 3] {
    let t = 2.0 * m - 1.0;
    [t.clamp(0.0, 1.0), 1.0 - t.abs(), (-t).clamp(0.0, 1.0)]
}

fn check_dims(image: &RgbImage, map: &Tensor) -> Result<(usize, usize)> {
    match map.shape() {
        [h, w] if *h == image.height() && *w == image.width() => Ok((*h, *w)),
        other => Err(Error::Image(format!(
            "saliency map {:?} does not match image {}x{}",
            other,
            image.height(),
            image.width()
        ))),
    }
}

/// Blend the colormapped saliency over the image:
/// out = (1 - alpha) * image + alpha * colormap(normalized).
pub fn render_heatmap(image: &RgbImage, map: &SaliencyMap, alpha: f32) -> Result<OverlayImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Image(format!("alpha {alpha} outside [0, 1]")));
    }
    let (h, w) = check_dims(image, &map.normalized)?;
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let m = map.normalized.data()[y * w + x];
            let c = colormap(m);
            let p = image.pixel(x, y);
            out.set_pixel(
                x,
                y,
                [
                    (1.0 - alpha) * p[0] + alpha * c[0],
                    (1.0 - alpha) * p[1] + alpha * c[1],
                    (1.0 - alpha) * p[2] + alpha * c[2],
                ],
            );
        }
    }
    Ok(OverlayImage { pixels: out, kind: OverlayKind::Heat })
}

/// Scale pixel visibility by relevance:
/// out = image * (floor + (1 - floor) * normalized).
pub fn render_transparency(image: &RgbImage, map: &SaliencyMap, floor: f32) -> Result<OverlayImage> {
    if !(0.0..1.0).contains(&floor) {
        return Err(Error::Image(format!("floor {floor} outside [0, 1)")));
    }
    let (h, w) = check_dims(image, &map.normalized)?;
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let m = map.normalized.data()[y * w + x];
            let g = floor + (1.0 - floor) * m;
            let p = image.pixel(x, y);
            out.set_pixel(x, y, [p[0] * g, p[1] * g, p[2] * g]);
        }
    }
    Ok(OverlayImage { pixels: out, kind: OverlayKind::Transparency })
}

/// Grayscale rendering of the normalized map (diagnostic output).
pub fn saliency_to_image(map: &SaliencyMap) -> RgbImage {
    let [h, w] = [map.normalized.shape()[0], map.normalized.shape()[1]];
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let v = map.normalized.data()[y * w + x];
            out.set_pixel(x, y, [v, v, v]);
        }
    }
    out
}
