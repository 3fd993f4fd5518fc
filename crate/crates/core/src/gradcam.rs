//! Gradient-weighted class activation maps over the per-level features.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::multiscale::{Model, LEVELS};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor4};

/// Row-major map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Nearest-neighbour resize.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> Heatmap {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                values.push(self.at(sy, x * self.width / width));
            }
        }
        Heatmap { height, width, values }
    }

    /// 8-bit quantization, `round(255 * v)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Pixels whose value is positive and within the top `fraction` of all
    /// pixels (ties at the cut-off are included).
    pub fn top_fraction(&self, fraction: f64) -> Vec<bool> {
        let mut sorted = self.values.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let keep = ((fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        let cut = sorted[keep - 1];
        self.values.iter().map(|&v| v > 0.0 && v >= cut).collect()
    }
}

/// Intersection over union of two binary masks; two empty masks give 0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Combines an activation `A` and `d logit / d A` for sample 0:
/// `alpha_c = mean(grad_c)`, `cam = relu(sum_c alpha_c A_c)`, scaled by its
/// maximum. An all-zero map stays all-zero.
pub fn cam_from_gradients<T: Element>(activation: &Tensor4<T>, gradient: &Tensor4<T>) -> Result<Heatmap> {
    let s = activation.shape();
    if gradient.shape() != s {
        return Err(Error::Config(format!(
            "gradient shape {} does not match activation shape {s}",
            gradient.shape()
        )));
    }
    let plane = s.plane();
    let mut cam = vec![0.0f64; plane];
    for c in 0..s.c {
        let alpha = gradient.plane(0, c).iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (acc, a) in cam.iter_mut().zip(activation.plane(0, c)) {
            *acc += alpha * a.to_f64_lossy();
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let peak = cam.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in &mut cam {
            *v /= peak;
        }
    }
    Ok(Heatmap {
        height: s.h,
        width: s.w,
        values: cam,
    })
}

/// Grad-CAM of `class` for a single image at tap level `level` (2..=5),
/// upsampled to the image extent.
pub fn grad_cam<T: Element>(
    model: &Model,
    store: &ParamStore<T>,
    image: &Tensor4<T>,
    class: usize,
    level: usize,
) -> Result<Heatmap> {
    if !(2..2 + LEVELS).contains(&level) {
        return Err(Error::Config(format!("level {level} outside 2..=5")));
    }
    if class >= model.config.num_classes {
        return Err(Error::Config(format!(
            "class index {class} out of range for {} classes",
            model.config.num_classes
        )));
    }
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::Config(format!("grad_cam expects a single image, got batch {}", s.n)));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let out = model.forward(&mut g, store, x)?;
    let target = out.enriched[level - 2];
    let score = g.pick_class(out.logits, class)?;
    let grads = g.backward(score)?;
    let activation = g.value(target);
    let zeros;
    let gradient = match grads.get(target) {
        Some(gr) => gr,
        None => {
            zeros = Tensor4::zeros(activation.shape());
            &zeros
        }
    };
    Ok(cam_from_gradients(activation, gradient)?.upsample_nearest(s.h, s.w))
}
