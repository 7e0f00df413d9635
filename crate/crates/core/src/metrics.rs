//! Segmentation quality and efficiency metrics.

use crate::error::{Error, Result};
use crate::io::kv::KvMap;
use crate::tensor::Tensor;

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

fn check_binary(name: &str, t: &Tensor<f32>) -> Result<()> {
    match t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::Domain(format!("{name} mask element {i} is {}, expected 0 or 1", t.data()[i]))),
        None => Ok(()),
    }
}

/// `|P and G| / |P or G|`; two empty masks score 1.
pub fn iou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("iou", "pred", pred.shape(), "gt", gt.shape()));
    }
    check_binary("pred", pred)?;
    check_binary("gt", gt)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == 1.0, g == 1.0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn miou(ious: &[f64]) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Domain("mIoU of zero instances".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// One prediction per prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPrediction {
    /// Mean foreground probability inside the predicted mask (0 if empty).
    pub score: f64,
    pub iou: f64,
}

/// All-point interpolated AP at IoU threshold `tau`. Every prompt is a
/// positive; predictions with equal scores enter the ranking together.
pub fn average_precision(preds: &[ScoredPrediction], tau: f64) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Domain("average precision of zero predictions".into()));
    }
    if let Some(p) = preds.iter().find(|p| !p.score.is_finite()) {
        return Err(Error::Domain(format!("non-finite score {}", p.score)));
    }
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let npos = preds.len() as f64;
    // (recall, precision) after each tie group
    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = order[i].score;
        while i < order.len() && order[i].score == s {
            tp += (order[i].iou >= tau) as usize;
            seen += 1;
            i += 1;
        }
        curve.push((tp as f64 / npos, tp as f64 / seen as f64));
    }
    let mut ap = 0.0;
    let mut best = 0.0f64;
    for k in (0..curve.len()).rev() {
        best = best.max(curve[k].1);
        let lower = if k == 0 { 0.0 } else { curve[k - 1].0 };
        ap += (curve[k].0 - lower) * best;
    }
    Ok(ap)
}

/// Mean of [`average_precision`] over IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_single_prompt(preds: &[ScoredPrediction]) -> Result<f64> {
    let mut total = 0.0;
    for tau in IOU_THRESHOLDS {
        total += average_precision(preds, tau)?;
    }
    Ok(total / IOU_THRESHOLDS.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Efficiency {
    pub macs_per_cycle: f64,
    /// `macs_per_cycle / mac_units`, when the array width is known.
    pub utilization: Option<f64>,
}

/// `macs / (latency_s * clock_hz)`.
pub fn efficiency_report(macs: u64, latency_s: f64, clock_hz: f64, mac_units: Option<u64>) -> Result<Efficiency> {
    if macs == 0 || !(latency_s > 0.0) || !(clock_hz > 0.0) || mac_units == Some(0) {
        return Err(Error::Domain(format!(
            "efficiency needs positive inputs, got macs={macs} latency={latency_s}s clock={clock_hz}Hz"
        )));
    }
    let macs_per_cycle = macs as f64 / (latency_s * clock_hz);
    Ok(Efficiency {
        macs_per_cycle,
        utilization: mac_units.map(|u| macs_per_cycle / u as f64),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub map: f64,
    pub params: usize,
    pub macs: u64,
    pub model_bytes: usize,
    pub macs_per_cycle: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "miou,map,params,macs,model_bytes,macs_per_cycle";

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("miou", format!("{:.6}", self.miou));
        kv.insert("map", format!("{:.6}", self.map));
        kv.insert("params", self.params);
        kv.insert("macs", self.macs);
        kv.insert("model_bytes", self.model_bytes);
        if let Some(m) = self.macs_per_cycle {
            kv.insert("macs_per_cycle", format!("{m:.4}"));
        }
        kv
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{}",
            self.miou,
            self.map,
            self.params,
            self.macs,
            self.model_bytes,
            self.macs_per_cycle.map(|m| format!("{m:.4}")).unwrap_or_default()
        )
    }
}
