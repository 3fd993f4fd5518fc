//! Scene samples, the procedural dataset generator and the on-disk loader.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::{read_ppm, write_ppm, RgbImage};
use crate::tensor::{Element, Tensor4};

/// One labelled image. `image` has shape `(1, 3, H, W)` with values in
/// `[0, 1]`; `mask` (row-major `H*W`) marks the object for classes that
/// have one.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Tensor4<f32>,
    pub label: usize,
    pub mask: Option<Vec<bool>>,
}

impl SceneSample {
    pub fn extent(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.h, s.w)
    }

    pub fn to_rgb(&self) -> RgbImage {
        let s = self.image.shape();
        let mut pixels = Vec::with_capacity(3 * s.plane());
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    pixels.push((self.image.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        RgbImage {
            width: s.w,
            height: s.h,
            pixels,
        }
    }

    pub fn from_rgb(img: &RgbImage, label: usize) -> Self {
        let image = Tensor4::from_fn([1, 3, img.height, img.width], |_, c, y, x| {
            img.pixels[(y * img.width + x) * 3 + c] as f32 / 255.0
        });
        SceneSample {
            image,
            label,
            mask: None,
        }
    }
}

/// Stacks sample images into a batch, converted to `T`.
pub fn batch_images<T: Element>(samples: &[&SceneSample]) -> Result<Tensor4<T>> {
    let images: Vec<&Tensor4<f32>> = samples.iter().map(|s| &s.image).collect();
    let stacked = Tensor4::stack(&images)?;
    Ok(stacked.cast())
}

/// Procedural scene classes, in label order.
pub const SYNTH_CLASSES: [&str; 8] = [
    "horizontal_stripes",
    "vertical_stripes",
    "checkerboard",
    "centered_blob",
    "corner_blob",
    "diagonal_gradient",
    "ring",
    "noise_texture",
];

/// Standard deviation of the additive pixel noise.
pub const SYNTH_NOISE: f64 = 0.05;

struct Canvas {
    extent: usize,
    /// Pattern intensity in `[0, 1]` per pixel.
    pattern: Vec<f64>,
    mask: Option<Vec<bool>>,
}

fn square_wave(pos: f64, period: f64) -> f64 {
    if (pos / (period / 2.0)).floor().rem_euclid(2.0) < 1.0 {
        1.0
    } else {
        0.0
    }
}

fn disk(extent: usize, cy: f64, cx: f64, r_in: f64, r_out: f64) -> Vec<bool> {
    let mut m = Vec::with_capacity(extent * extent);
    for y in 0..extent {
        for x in 0..extent {
            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
            m.push(d <= r_out && d >= r_in);
        }
    }
    m
}

fn draw(class: usize, e: usize, rng: &mut ChaCha8Rng) -> Canvas {
    let ef = e as f64;
    let mut mask = None;
    let pattern: Vec<f64> = match class {
        0 | 1 => {
            let period = rng.random_range(ef / 8.0..ef / 4.0);
            let phase = rng.random_range(0.0..period);
            (0..e * e)
                .map(|i| {
                    let pos = if class == 0 { i / e } else { i % e } as f64;
                    square_wave(pos + phase, period)
                })
                .collect()
        }
        2 => {
            let cell = rng.random_range(ef / 12.0..ef / 6.0);
            let (py, px) = (rng.random_range(0.0..2.0 * cell), rng.random_range(0.0..2.0 * cell));
            (0..e * e)
                .map(|i| {
                    let a = square_wave((i / e) as f64 + py, 2.0 * cell);
                    let b = square_wave((i % e) as f64 + px, 2.0 * cell);
                    if a == b { 1.0 } else { 0.0 }
                })
                .collect()
        }
        3 | 4 | 6 => {
            let (cy, cx, r_in, r_out) = match class {
                3 => {
                    let r = rng.random_range(ef / 8.0..ef / 5.0);
                    let j = ef / 8.0;
                    (ef / 2.0 + rng.random_range(-j..j), ef / 2.0 + rng.random_range(-j..j), 0.0, r)
                }
                4 => {
                    let r = rng.random_range(ef / 8.0..ef / 5.0);
                    let off = r + rng.random_range(1.0..ef / 16.0 + 1.0);
                    let (top, left) = (rng.random_bool(0.5), rng.random_bool(0.5));
                    let cy = if top { off } else { ef - off };
                    let cx = if left { off } else { ef - off };
                    (cy, cx, 0.0, r)
                }
                _ => {
                    let r_out = rng.random_range(ef / 5.0..ef / 3.0);
                    let width = rng.random_range(ef / 20.0..ef / 10.0);
                    let j = ef / 16.0;
                    (ef / 2.0 + rng.random_range(-j..j), ef / 2.0 + rng.random_range(-j..j), r_out - width, r_out)
                }
            };
            let m = disk(e, cy, cx, r_in, r_out);
            let p = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            mask = Some(m);
            p
        }
        5 => {
            let flip = rng.random_bool(0.5);
            let offset = rng.random_range(-0.2..0.2);
            (0..e * e)
                .map(|i| {
                    let (y, x) = ((i / e) as f64, (i % e) as f64);
                    let t = if flip { (x + y) / (2.0 * ef) } else { (x + ef - y) / (2.0 * ef) };
                    (t + offset).clamp(0.0, 1.0)
                })
                .collect()
        }
        _ => {
            let raw: Vec<f64> = (0..e * e).map(|_| rng.random::<f64>()).collect();
            let radius = 2isize;
            let mut out = vec![0.0; e * e];
            for y in 0..e as isize {
                for x in 0..e as isize {
                    let (mut sum, mut count) = (0.0, 0.0);
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            let (yy, xx) = (y + dy, x + dx);
                            if yy >= 0 && xx >= 0 && yy < e as isize && xx < e as isize {
                                sum += raw[yy as usize * e + xx as usize];
                                count += 1.0;
                            }
                        }
                    }
                    out[y as usize * e + x as usize] = sum / count;
                }
            }
            let (lo, hi) = out.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            out.iter().map(|v| (v - lo) / (hi - lo).max(1e-12)).collect()
        }
    };
    Canvas {
        extent: e,
        pattern,
        mask,
    }
}

fn render(canvas: Canvas, label: usize, rng: &mut ChaCha8Rng) -> SceneSample {
    let e = canvas.extent;
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid std");
    let low = rng.random_range(0.1..0.35);
    let high = rng.random_range(0.65..0.9);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..1.0));
    let mut data = Vec::with_capacity(3 * e * e);
    for t in tint {
        for &p in &canvas.pattern {
            let v = (low + (high - low) * p) * t + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    SceneSample {
        image: Tensor4::new([1, 3, e, e], data).expect("synthetic image shape"),
        label,
        mask: canvas.mask,
    }
}

/// `k_classes * n_per_class` procedural samples, grouped by class.
/// Deterministic for a fixed seed.
pub fn synth_dataset(k_classes: usize, n_per_class: usize, extent: usize, seed: u64) -> Result<Vec<SceneSample>> {
    if !(2..=SYNTH_CLASSES.len()).contains(&k_classes) {
        return Err(Error::Dataset(format!(
            "unsupported class count {k_classes}; the generator supports 2..=8"
        )));
    }
    if extent == 0 || extent % 32 != 0 {
        return Err(Error::Dataset(format!("extent {extent} must be a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k_classes * n_per_class);
    for class in 0..k_classes {
        for _ in 0..n_per_class {
            let canvas = draw(class, extent, &mut rng);
            out.push(render(canvas, class, &mut rng));
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut entries = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::File {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })? {
        let path = e?.path();
        let hidden = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'));
        if !hidden {
            entries.push(path);
        }
    }
    entries.sort();
    Ok(entries)
}

/// Loads `dir/<class>/<image>.ppm`; labels follow sorted class-directory
/// names. Returns the samples and the class names.
pub fn load_dataset(dir: &Path) -> Result<(Vec<SceneSample>, Vec<String>)> {
    let classes: Vec<_> = sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()).collect();
    let mut names = Vec::with_capacity(classes.len());
    let mut samples = Vec::new();
    let mut extent: Option<(usize, usize)> = None;
    let mut errors = Vec::new();
    for (label, class_dir) in classes.iter().enumerate() {
        names.push(class_dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(class_dir)?.into_iter().filter(|p| p.is_file()) {
            match read_ppm(&file) {
                Ok(img) => {
                    let this = (img.height, img.width);
                    match extent {
                        Some(e) if e != this => errors.push(format!(
                            "{}: extent {}x{} differs from {}x{}",
                            file.display(),
                            this.0,
                            this.1,
                            e.0,
                            e.1
                        )),
                        _ => {
                            extent = Some(this);
                            samples.push(SceneSample::from_rgb(&img, label));
                        }
                    }
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
    }
    if !errors.is_empty() {
        return Err(Error::Dataset(errors.join("\n")));
    }
    if samples.is_empty() {
        return Err(Error::Dataset(format!("{}: empty dataset", dir.display())));
    }
    Ok((samples, names))
}

/// Writes samples as `dir/<label>_<class name>/<index>.ppm`; the label
/// prefix keeps the sorted directory order equal to the label order.
pub fn save_dataset(dir: &Path, samples: &[SceneSample], class_names: &[&str]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let class_dir = dir.join(format!("{:02}_{}", s.label, class_names[s.label]));
        fs::create_dir_all(&class_dir)?;
        write_ppm(&class_dir.join(format!("{i:05}.ppm")), &s.to_rgb())?;
    }
    Ok(())
}
