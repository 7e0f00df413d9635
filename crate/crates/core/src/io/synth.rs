//! Synthetic shapes dataset with a synthetic teacher.
//!
//! Each sample has a uniform-noise background and one to three flat-coloured
//! disks or rectangles. The last shape drawn is the target, so it is never
//! occluded; it is convex and fits inside the crop, and the prompt is its
//! rounded centroid. The teacher is
//! `logit(clip(boxblur3(mask_crop), 1e-4, 1 - 1e-4))`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{format_prompt, Sample, IMAGE_FILE, MASK_FILE, PROMPT_FILE, TEACHER_FILE};
use super::netpbm::{save_pgm, save_ppm};
use super::ptsr::save_tensor;
use super::write_file;
use crate::error::{Error, Result};
use crate::prompt::{crop_centered, mask_centroid};
use crate::tensor::{AnyTensor, Tensor};

pub const TEACHER_CLIP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthParams {
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    pub crop_size: usize,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size < 16 || self.crop_size % 2 != 0 {
            return Err(Error::Config(format!("crop size must be even and >= 16, got {}", self.crop_size)));
        }
        if self.image_size < self.crop_size / 2 {
            return Err(Error::Config(format!(
                "image size {} is too small for crop size {}",
                self.image_size, self.crop_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x0: usize, y0: usize, x1: usize, y1: usize },
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { x0, y0, x1, y1 } => (x0..=x1).contains(&x) && (y0..=y1).contains(&y),
        }
    }
}

/// A shape fully inside a `size`x`size` image whose extent fits in `crop`.
fn random_shape(rng: &mut ChaCha8Rng, size: usize, crop: usize) -> Shape {
    let max_half = ((crop as f64 / 3.2) as usize).min((size - 1) / 2).max(2);
    let min_half = (crop / 12).clamp(2, max_half);
    if rng.random_bool(0.5) {
        let r = rng.random_range(min_half..=max_half);
        let cx = rng.random_range(r..size - r);
        let cy = rng.random_range(r..size - r);
        Shape::Disk {
            cx: cx as f64,
            cy: cy as f64,
            r: r as f64,
        }
    } else {
        let hw = rng.random_range(min_half..=max_half);
        let hh = rng.random_range(min_half..=max_half);
        let cx = rng.random_range(hw..size - hw);
        let cy = rng.random_range(hh..size - hh);
        Shape::Rect {
            x0: cx - hw,
            y0: cy - hh,
            x1: cx + hw,
            y1: cy + hh,
        }
    }
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> u32 {
    a.iter().zip(&b).map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs()).sum()
}

fn box_blur3(m: &[f32], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut s = 0.0;
            for yy in y.saturating_sub(1)..=(y + 1).min(side - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(side - 1) {
                    s += m[yy * side + xx] as f64;
                }
            }
            out[y * side + x] = s / 9.0;
        }
    }
    out
}

/// Teacher logits for a crop-frame mask.
pub fn synthetic_teacher(mask_crop: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [_, _, side, w] = mask_crop.dims4()?;
    if side != w {
        return Err(Error::Shape(format!("teacher needs a square crop, got {:?}", mask_crop.shape())));
    }
    let blurred = box_blur3(mask_crop.data(), side);
    let logits = blurred
        .iter()
        .map(|&p| {
            let p = p.clamp(TEACHER_CLIP, 1.0 - TEACHER_CLIP);
            (p / (1.0 - p)).ln() as f32
        })
        .collect();
    Tensor::new(vec![1, 1, side, side], logits)
}

/// Sample `index` of the dataset defined by `params`.
pub fn synth_sample(params: &SynthParams, index: usize) -> Result<Sample> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);
    let n = params.image_size;

    let bg_lo: u8 = rng.random_range(0..=150);
    let bg_amp: u8 = rng.random_range(20..=100);
    let bg_mean = [bg_lo.saturating_add(bg_amp / 2); 3];
    let mut px = vec![[0u8; 3]; n * n];
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = bg_lo.saturating_add(rng.random_range(0..=bg_amp));
        }
    }

    let shapes = rng.random_range(1..=3);
    let mut colors: Vec<[u8; 3]> = Vec::new();
    let mut target = None;
    for k in 0..shapes {
        let shape = random_shape(&mut rng, n, params.crop_size);
        let color = loop {
            let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
            if color_distance(c, bg_mean) >= 120 && colors.iter().all(|&o| color_distance(c, o) >= 90) {
                break c;
            }
        };
        colors.push(color);
        for y in 0..n {
            for x in 0..n {
                if shape.contains(x, y) {
                    px[y * n + x] = color;
                }
            }
        }
        if k + 1 == shapes {
            target = Some(shape);
        }
    }
    let target = target.expect("at least one shape");

    let image = Tensor::from_fn(vec![1, 3, n, n], |i| {
        let (c, p) = (i / (n * n), i % (n * n));
        px[p][c] as f32 / 255.0
    });
    let mask = Tensor::from_fn(vec![1, 1, n, n], |i| target.contains(i % n, i / n) as u8 as f32);
    let prompt = mask_centroid(&mask)?.ok_or_else(|| Error::Numeric("empty target mask".into()))?;
    if mask.data()[prompt.y * n + prompt.x] != 1.0 {
        return Err(Error::Numeric(format!("sample {index}: centroid outside target")));
    }
    let (mask_crop, _) = crop_centered(&mask, prompt, params.crop_size)?;
    let teacher = synthetic_teacher(&mask_crop)?;
    Ok(Sample {
        name: sample_name(index),
        image,
        mask,
        prompt,
        teacher: Some(teacher),
    })
}

pub fn sample_name(index: usize) -> String {
    format!("sample_{index:05}")
}

pub fn write_sample(sample: &Sample, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_ppm(&sample.image, dir.join(IMAGE_FILE))?;
    save_pgm(&sample.mask, dir.join(MASK_FILE))?;
    write_file(&dir.join(PROMPT_FILE), format_prompt(sample.prompt).as_bytes())?;
    if let Some(t) = &sample.teacher {
        save_tensor(&AnyTensor::F32(t.clone()), dir.join(TEACHER_FILE))?;
    }
    Ok(())
}

/// Writes `count` samples as `out_dir/sample_NNNNN/`.
pub fn synth_shapes_dataset(out_dir: &Path, params: &SynthParams) -> Result<()> {
    params.validate()?;
    for i in 0..params.count {
        write_sample(&synth_sample(params, i)?, &out_dir.join(sample_name(i)))?;
    }
    Ok(())
}
