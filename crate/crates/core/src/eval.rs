//! Scoring a segmenter on prompted samples in the original image frame.

use crate::error::Result;
use crate::io::dataset::Sample;
use crate::metrics::{iou, map_single_prompt, miou, ScoredPrediction};
use crate::model::{binarize_logits, Model};
use crate::prompt::{crop_centered, uncrop_mask};
use crate::tensor::{sigmoid, Tensor};

/// Anything mapping a `1x3xSxS` crop to `1x1xSxS` logits.
pub trait Segmenter {
    fn input_size(&self) -> usize;
    fn logits(&self, crop: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Segmenter for Model<f32> {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn logits(&self, crop: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.predict_mask(crop)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Binary mask in the original frame.
    pub mask: Tensor<f32>,
    pub score: f64,
}

/// Predicts the mask for `sample.prompt`. The score is the mean foreground
/// probability over predicted pixels that lie inside the image.
pub fn predict(seg: &dyn Segmenter, image: &Tensor<f32>, prompt: crate::prompt::PromptPoint) -> Result<Prediction> {
    let (crop, spec) = crop_centered(image, prompt, seg.input_size())?;
    let logits = seg.logits(&crop)?;
    let bin = binarize_logits(&logits);
    let (xs, ys) = spec.valid_window();
    let s = spec.side;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in ys {
        for x in xs.clone() {
            let l = logits.data()[y * s + x];
            if l > 0.0 {
                sum += sigmoid(l as f64);
                n += 1;
            }
        }
    }
    Ok(Prediction {
        mask: uncrop_mask(&bin, &spec)?,
        score: if n == 0 { 0.0 } else { sum / n as f64 },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<ScoredPrediction>,
    pub miou: f64,
    pub map: f64,
}

pub fn evaluate(seg: &dyn Segmenter, samples: &[Sample]) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(seg, &s.image, s.prompt)?;
        predictions.push(ScoredPrediction {
            score: p.score,
            iou: iou(&p.mask, &s.mask)?,
        });
    }
    let ious: Vec<f64> = predictions.iter().map(|p| p.iou).collect();
    Ok(Evaluation {
        miou: miou(&ious)?,
        map: map_single_prompt(&predictions)?,
        predictions,
    })
}
