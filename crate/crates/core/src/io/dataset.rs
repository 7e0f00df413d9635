//! Sample directories: `image.ppm`, `mask.pgm`, `prompt.txt` ("x y") and an
//! optional `teacher.ptsr` holding crop-frame teacher logits `1x1xSxS`.
//! A dataset is a directory of sample directories, read in name order.

use std::path::{Path, PathBuf};

use super::netpbm::{load_pgm, load_ppm};
use super::ptsr::load_tensor;
use super::read_file;
use crate::error::{Error, Result};
use crate::prompt::{crop_centered, crop_with, CropSpec, PromptPoint};
use crate::tensor::Tensor;

pub const IMAGE_FILE: &str = "image.ppm";
pub const MASK_FILE: &str = "mask.pgm";
pub const PROMPT_FILE: &str = "prompt.txt";
pub const TEACHER_FILE: &str = "teacher.ptsr";

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub prompt: PromptPoint,
    pub teacher: Option<Tensor<f32>>,
}

/// A sample cut to the model's input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CroppedSample {
    pub name: String,
    pub crop: Tensor<f32>,
    pub mask_crop: Tensor<f32>,
    pub teacher: Option<Tensor<f32>>,
    pub spec: CropSpec,
    /// Ground truth in the original frame, for evaluation.
    pub mask: Tensor<f32>,
}

pub fn parse_prompt(text: &str) -> Result<PromptPoint> {
    let nums: Vec<&str> = text.split_whitespace().collect();
    match nums[..] {
        [x, y] => match (x.parse(), y.parse()) {
            (Ok(x), Ok(y)) => Ok(PromptPoint::new(x, y)),
            _ => Err(Error::Data(format!("prompt {text:?} is not two non-negative integers"))),
        },
        _ => Err(Error::Data(format!("prompt must be \"x y\", got {text:?}"))),
    }
}

pub fn format_prompt(p: PromptPoint) -> String {
    format!("{} {}\n", p.x, p.y)
}

/// Reads one sample directory. `teacher.ptsr` is only opened when
/// `load_teacher` is set.
pub fn load_sample(dir: &Path, load_teacher: bool) -> Result<Sample> {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let image = load_ppm(dir.join(IMAGE_FILE))?;
    let mask = load_pgm(dir.join(MASK_FILE))?;
    if image.shape()[2..] != mask.shape()[2..] {
        return Err(Error::Data(format!(
            "{}: mask is {:?} but image is {:?}",
            dir.display(),
            &mask.shape()[2..],
            &image.shape()[2..]
        )));
    }
    let prompt_path = dir.join(PROMPT_FILE);
    let text = String::from_utf8(read_file(&prompt_path)?)
        .map_err(|_| Error::Data(format!("{}: not UTF-8", prompt_path.display())))?;
    let prompt = parse_prompt(&text).map_err(|e| Error::Data(format!("{}: {e}", prompt_path.display())))?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if prompt.x >= w || prompt.y >= h {
        return Err(Error::Data(format!(
            "{}: prompt ({}, {}) outside {w}x{h} image",
            prompt_path.display(),
            prompt.x,
            prompt.y
        )));
    }
    let teacher_path = dir.join(TEACHER_FILE);
    let teacher = if load_teacher && teacher_path.exists() {
        Some(load_tensor(&teacher_path)?.into_f32().map_err(|e| {
            Error::Data(format!("{}: {e}", teacher_path.display()))
        })?)
    } else {
        None
    };
    Ok(Sample {
        name,
        image,
        mask,
        prompt,
        teacher,
    })
}

/// Sample directories under `root`, sorted by name.
pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if e.path().join(IMAGE_FILE).is_file() {
            dirs.push(e.path());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("{}: no sample directories found", root.display())));
    }
    Ok(dirs)
}

pub fn load_dataset(root: &Path, load_teacher: bool) -> Result<Vec<Sample>> {
    sample_dirs(root)?.iter().map(|d| load_sample(d, load_teacher)).collect()
}

impl Sample {
    /// Crops image and mask around the prompt; checks the teacher side.
    pub fn crop(&self, side: usize) -> Result<CroppedSample> {
        let (crop, spec) = crop_centered(&self.image, self.prompt, side)?;
        let mask_crop = crop_with(&self.mask, &spec)?;
        if let Some(t) = &self.teacher {
            if t.shape() != [1, 1, side, side] {
                return Err(Error::Data(format!(
                    "sample {}: teacher logits have shape {:?}, expected [1, 1, {side}, {side}]",
                    self.name,
                    t.shape()
                )));
            }
        }
        Ok(CroppedSample {
            name: self.name.clone(),
            crop,
            mask_crop,
            teacher: self.teacher.clone(),
            spec,
            mask: self.mask.clone(),
        })
    }
}
