//! Reference implementations written independently of the library kernels.
#![allow(dead_code)]

use eam_core::attention::AttentionIds;
use eam_core::{ParamStore, Tensor4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Direct convolution by nested loops.
pub fn conv_oracle(
    x: &Tensor4<f64>,
    w: &Tensor4<f64>,
    b: &Tensor4<f64>,
    stride: usize,
    pad: usize,
    dil: usize,
) -> Tensor4<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let k = ws.h;
    let span = dil * (k - 1) + 1;
    let ho = (xs.h + 2 * pad - span) / stride + 1;
    let wo = (xs.w + 2 * pad - span) / stride + 1;
    let mut out = Tensor4::zeros([xs.n, ws.n, ho, wo]);
    for n in 0..xs.n {
        for o in 0..ws.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.shape().index(n, o, oy, ox);
                    out.data_mut()[i] = acc;
                }
            }
        }
    }
    out
}

/// `y = b + x · W` with `W` stored `(1, 1, in, out)`.
pub fn dense(x: &[f64], w: &Tensor4<f64>, b: &Tensor4<f64>) -> Vec<f64> {
    let (fin, fout) = (w.shape().h, w.shape().w);
    assert_eq!(x.len(), fin);
    (0..fout)
        .map(|o| b.data()[o] + (0..fin).map(|i| x[i] * w.data()[i * fout + o]).sum::<f64>())
        .collect()
}

pub fn mlp(x: &[f64], store: &ParamStore<f64>, a: &AttentionIds) -> Vec<f64> {
    let m = a.channel_mlp;
    let h: Vec<f64> = dense(x, store.value(m.hidden.weight), store.value(m.hidden.bias))
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    dense(&h, store.value(m.output.weight), store.value(m.output.bias))
}

/// Channel gate `(n, c)` from per-plane mean and max.
pub fn channel_gate(x: &Tensor4<f64>, store: &ParamStore<f64>, a: &AttentionIds) -> Vec<Vec<f64>> {
    let s = x.shape();
    (0..s.n)
        .map(|n| {
            let avg: Vec<f64> = (0..s.c).map(|c| x.plane(n, c).iter().sum::<f64>() / s.plane() as f64).collect();
            let max: Vec<f64> = (0..s.c)
                .map(|c| x.plane(n, c).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            mlp(&avg, store, a)
                .iter()
                .zip(mlp(&max, store, a))
                .map(|(u, v)| sigmoid(u + v))
                .collect()
        })
        .collect()
}

/// Spatial gate `(n, 1, h, w)` from channel mean and max maps.
pub fn spatial_gate(x: &Tensor4<f64>, store: &ParamStore<f64>, a: &AttentionIds) -> Tensor4<f64> {
    let s = x.shape();
    let pooled = Tensor4::from_fn([s.n, 2, s.h, s.w], |n, c, y, xx| {
        let vals = (0..s.c).map(|ch| x.at(n, ch, y, xx));
        if c == 0 {
            vals.sum::<f64>() / s.c as f64
        } else {
            vals.fold(f64::NEG_INFINITY, f64::max)
        }
    });
    let conv = a.spatial_conv;
    let k = store.shape(conv.weight).h;
    conv_oracle(&pooled, store.value(conv.weight), store.value(conv.bias), 1, k / 2, 1).map(sigmoid)
}

pub fn scale_channels(x: &Tensor4<f64>, gate: &[Vec<f64>]) -> Tensor4<f64> {
    Tensor4::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) * gate[n][c])
}

pub fn scale_pixels(x: &Tensor4<f64>, gate: &Tensor4<f64>) -> Tensor4<f64> {
    Tensor4::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) * gate.at(n, 0, y, xx))
}

pub fn cbam(x: &Tensor4<f64>, store: &ParamStore<f64>, a: &AttentionIds) -> Tensor4<f64> {
    let f1 = scale_channels(x, &channel_gate(x, store, a));
    let sp = spatial_gate(&f1, store, a);
    scale_pixels(&f1, &sp)
}

/// `CBAM(I') + (Channel(I')·I') ⊙ (Spatial(I')·I')`.
pub fn icbam(x: &Tensor4<f64>, store: &ParamStore<f64>, upper: &AttentionIds, middle: &AttentionIds) -> Tensor4<f64> {
    let seq = cbam(x, store, upper);
    let lambda = scale_channels(x, &channel_gate(x, store, middle));
    let beta = scale_pixels(x, &spatial_gate(x, store, middle));
    Tensor4::from_fn(x.shape(), |n, c, y, xx| {
        seq.at(n, c, y, xx) + lambda.at(n, c, y, xx) * beta.at(n, c, y, xx)
    })
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 { 0.0 } else { (x - y).abs() / scale }
        })
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn centroids(train: &[(Vec<f64>, usize)], k: usize) -> Vec<Vec<f64>> {
    let dim = train[0].0.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, l) in train {
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(x) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c.max(1) as f64).collect())
        .collect()
}

pub fn nearest_centroid(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let d = |c: &Vec<f64>| c.iter().zip(x).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    (0..centroids.len())
        .min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b])))
        .unwrap()
}

/// Nearest class centroid on raw pixels; returns held-out accuracy.
pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], k: usize) -> f64 {
    let c = centroids(train, k);
    let correct = test.iter().filter(|(x, l)| nearest_centroid(&c, x) == *l).count();
    correct as f64 / test.len() as f64
}

/// Scalar Adam recurrence with coupled weight decay.
pub fn adam_reference(p0: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, &g0) in grads.iter().enumerate() {
        let g = g0 + wd * p;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        p -= lr * mh / (vh.sqrt() + eps);
        out.push(p);
    }
    out
}
