//! AdamW and the training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::io::checkpoint::save_checkpoint;
use crate::io::dataset::Sample;
use crate::loss::{supervised_loss, total_loss, LambdaPolicy};
use crate::model::Model;
use crate::nn::{GraphCache, ParamTensor};
use crate::prompt::{crop_centered, crop_with, PromptPoint};
use crate::tensor::{batch_item, stack_batch, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &[&ParamTensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamWState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay on the pre-update value:
/// `p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p`.
///
/// Every gradient is checked before anything is modified.
pub fn adamw_step<T: Real>(params: &mut [&mut ParamTensor<T>], state: &mut AdamWState<T>, cfg: &AdamWConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::State(format!(
            "optimizer state tracks {} tensors, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.value.shape() != m.shape() {
            return Err(Error::shape(format!("adamw {}", p.name), "param", p.value.shape(), "state", m.shape()));
        }
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {} at element {i}",
                p.name
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps, decay) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.lr * cfg.weight_decay));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let ParamTensor { value, grad, .. } = &mut **p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps) - decay * *w;
        }
    }
    Ok(())
}

/// He-uniform conv weights (bound `sqrt(6 / fan_in)`), zero biases,
/// identity norms.
pub fn init_params<T: Real>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        if p.name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in p.value.data_mut() {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        } else if p.name.ends_with(".gamma") {
            p.value.data_mut().fill(T::one());
        } else {
            p.value.data_mut().fill(T::zero());
        }
        p.zero_grad();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Teacher-confidence blend of logit MSE with BCE + Dice.
    Distilled,
    /// BCE + Dice only; teacher files are never read.
    Supervised,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distilled" => Ok(TrainMode::Distilled),
            "supervised" => Ok(TrainMode::Supervised),
            _ => Err(Error::Config(format!("mode must be distilled or supervised, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSampling {
    /// The stored prompt (the target's centroid).
    Centroid,
    /// A uniformly random target pixel, redrawn every epoch. Supervised only,
    /// since teacher maps are stored in the centroid frame.
    Interior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub lambda_policy: LambdaPolicy,
    pub prompt_sampling: PromptSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 8,
            epochs: 5,
            seed: 0,
            mode: TrainMode::Distilled,
            lambda_policy: LambdaPolicy::default(),
            prompt_sampling: PromptSampling::Centroid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.mode == TrainMode::Distilled && self.prompt_sampling == PromptSampling::Interior {
            return Err(Error::Config(
                "interior prompt sampling needs supervised mode: teacher maps are centroid-framed".into(),
            ));
        }
        Ok(())
    }
}

/// Model-frame training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub crop: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub teacher: Option<Tensor<f32>>,
}

fn random_interior(mask: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Option<PromptPoint> {
    let w = mask.shape()[3];
    let inside: Vec<usize> = (0..mask.numel()).filter(|&i| mask.data()[i] > 0.5).collect();
    let &i = inside.get(rng.random_range(0..inside.len().max(1)))?;
    Some(PromptPoint::new(i % w, i / w))
}

/// Crops `sample` for training. `rng` is only consulted for interior sampling.
pub fn make_item(sample: &Sample, side: usize, mode: TrainMode, sampling: PromptSampling, rng: &mut ChaCha8Rng) -> Result<TrainItem> {
    let prompt = match sampling {
        PromptSampling::Centroid => sample.prompt,
        PromptSampling::Interior => random_interior(&sample.mask, rng).unwrap_or(sample.prompt),
    };
    let (crop, spec) = crop_centered(&sample.image, prompt, side)?;
    let mask = crop_with(&sample.mask, &spec)?;
    let teacher = match mode {
        TrainMode::Supervised => None,
        TrainMode::Distilled => {
            let t = sample.teacher.as_ref().ok_or_else(|| {
                Error::Data(format!("sample {} has no teacher logits (distilled mode)", sample.name))
            })?;
            if t.shape() != [1, 1, side, side] {
                return Err(Error::Data(format!(
                    "sample {}: teacher logits {:?}, expected [1, 1, {side}, {side}]",
                    sample.name,
                    t.shape()
                )));
            }
            Some(t.clone())
        }
    };
    Ok(TrainItem { crop, mask, teacher })
}

/// Forward, loss, backward and one optimizer update on a batch. Returns the
/// mean per-sample loss before the update.
pub fn train_step(
    model: &mut Model<f32>,
    state: &mut AdamWState<f32>,
    batch: &[TrainItem],
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let x = stack_batch(&batch.iter().map(|b| &b.crop).collect::<Vec<_>>())?;
    let mut cache = GraphCache::default();
    let logits = model.forward(&x, Some(&mut cache))?;
    let n = batch.len();
    let mut grads = Vec::with_capacity(n);
    let mut total = 0.0;
    for (i, item) in batch.iter().enumerate() {
        let s = batch_item(&logits, i)?;
        let r = match (&item.teacher, cfg.mode) {
            (Some(t), TrainMode::Distilled) => total_loss(&s, t, &item.mask, &cfg.lambda_policy)?,
            (None, TrainMode::Distilled) => {
                return Err(Error::Data("distilled batch item without teacher logits".into()))
            }
            (_, TrainMode::Supervised) => supervised_loss(&s, &item.mask)?,
        };
        if !r.loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on batch item {i}")));
        }
        total += r.loss;
        grads.push(r.grad.map(|g| g / n as f32));
    }
    let g = stack_batch(&grads.iter().collect::<Vec<_>>())?;
    model.zero_grad();
    model.backward(&g, &cache)?;
    adamw_step(&mut model.params_mut(), state, &cfg.optimizer)?;
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_miou";

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6}", self.epoch, self.train_loss, self.val_miou)
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = format!("{}\n", EpochRecord::CSV_HEADER);
    for r in history {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: Model<f32>,
}

/// Trains `model` in place from its current parameters. The epoch order is
/// a seeded shuffle; after each epoch the model is scored on `val` and the
/// best one so far is kept (and written to `checkpoint`, if given).
pub fn train(
    model: &mut Model<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and validation sets, got {} and {}",
            train_set.len(),
            val_set.len()
        )));
    }
    if cfg.mode == TrainMode::Distilled {
        if let Some(s) = train_set.iter().find(|s| s.teacher.is_none()) {
            return Err(Error::Data(format!("sample {} has no teacher logits (distilled mode)", s.name)));
        }
    }
    let side = model.config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut state = AdamWState::new(&model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Model<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| make_item(&train_set[i], side, cfg.mode, cfg.prompt_sampling, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            loss_sum += train_step(model, &mut state, &batch, cfg)? * batch.len() as f64;
            steps += batch.len();
        }
        let val_miou = evaluate(model, val_set)?.miou;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_miou,
        };
        log::info!("epoch {epoch}: train_loss {:.5} val_miou {:.4}", rec.train_loss, val_miou);
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|b| val_miou > b.1) {
            if let Some(p) = checkpoint {
                save_checkpoint(model, p)?;
            }
            best = Some((epoch, val_miou, model.clone()));
        }
    }
    let (best_epoch, _, best) = match best {
        Some(b) => b,
        None => {
            if let Some(p) = checkpoint {
                save_checkpoint(model, p)?;
            }
            (0, f64::NAN, model.clone())
        }
    };
    Ok(TrainOutcome {
        history,
        best_epoch,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synth_sample, SynthParams};
    use crate::model::ModelConfig;
    use crate::nn::Activation;

    fn scalar_param(v: f64, g: f64) -> ParamTensor<f64> {
        let mut p = ParamTensor::new("p", Tensor::full([1], v));
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn adamw_scalar_oracle() {
        // m_hat = 0.5, sqrt(v_hat) = 0.5: step 0.1 * 0.5 / (0.5 + 1e-8), decay 0.1 * 0.01 * 1.0
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.001;
        let mut p = scalar_param(1.0, 0.5);
        let cfg = AdamWConfig { lr: 0.1, ..Default::default() };
        let mut st = AdamWState::new(&[&p]);
        adamw_step(&mut [&mut p], &mut st, &cfg).unwrap();
        assert!((p.value.data()[0] - expected).abs() < 1e-12);
        assert!((p.value.data()[0] - 0.899).abs() < 1e-4);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_cases() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = scalar_param(0.7, 0.0);
        let mut st = AdamWState::new(&[&p]);
        for _ in 0..10 {
            adamw_step(&mut [&mut p], &mut st, &cfg).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.7);

        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.1, ..Default::default() };
        let mut p = scalar_param(2.0, 0.0);
        let mut st = AdamWState::new(&[&p]);
        for _ in 0..25 {
            adamw_step(&mut [&mut p], &mut st, &cfg).unwrap();
        }
        assert!((p.value.data()[0] - 2.0 * (1.0 - 0.005f64).powi(25)).abs() < 1e-12);
    }

    #[test]
    fn adam_solves_quadratic() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut p = scalar_param(5.0, 0.0);
        let mut st = AdamWState::new(&[&p]);
        let target = -1.25;
        for _ in 0..2000 {
            p.grad.data_mut()[0] = 2.0 * (p.value.data()[0] - target);
            adamw_step(&mut [&mut p], &mut st, &cfg).unwrap();
        }
        assert!((p.value.data()[0] - target).abs() < 1e-6, "{}", p.value.data()[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = scalar_param(1.0, f64::NAN);
        p.name = "enc0.dw.weight".into();
        let mut st = AdamWState::new(&[&p]);
        let err = adamw_step(&mut [&mut p], &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(err.to_string().contains("enc0.dw.weight"));
        assert_eq!(p.value.data()[0], 1.0);
        assert_eq!(st.t, 0);
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_size: 32,
            stage_channels: vec![8, 16, 24],
            blocks_per_stage: 1,
            head_channels: 0,
            activation: Activation::Relu,
            norm: true,
        }
    }

    #[test]
    fn init_is_seeded_he_uniform() {
        let cfg = crate::model::desk_config();
        let mut a = Model::<f32>::build(&cfg).unwrap();
        let mut b = a.clone();
        init_params(&mut a, 1);
        init_params(&mut b, 1);
        assert_eq!(a, b);
        init_params(&mut b, 2);
        assert_ne!(a, b);
        let mut checked = 0;
        for p in a.params() {
            if p.name.ends_with(".weight") && p.numel() >= 10_000 {
                let fan_in: usize = p.value.shape()[1..].iter().product();
                let var = p.value.data().iter().map(|&w| (w as f64).powi(2)).sum::<f64>() / p.numel() as f64;
                let want = 2.0 / fan_in as f64;
                assert!((var / want - 1.0).abs() < 0.2, "{}: {var} vs {want}", p.name);
                checked += 1;
            }
            if p.name.ends_with(".gamma") {
                assert!(p.value.data().iter().all(|&g| g == 1.0));
            }
            if p.name.ends_with(".bias") || p.name.ends_with(".beta") {
                assert!(p.value.data().iter().all(|&g| g == 0.0));
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn interior_sampling_needs_supervised() {
        let cfg = TrainConfig { prompt_sampling: PromptSampling::Interior, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig { mode: TrainMode::Supervised, ..cfg };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn overfits_one_batch() {
        let p = SynthParams { count: 0, seed: 5, image_size: 48, crop_size: 32 };
        let sample = synth_sample(&p, 0).unwrap();
        let mut model = Model::<f32>::build(&small_config()).unwrap();
        init_params(&mut model, 0);
        let cfg = TrainConfig { optimizer: AdamWConfig { lr: 3e-3, ..Default::default() }, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let item = make_item(&sample, 32, TrainMode::Distilled, PromptSampling::Centroid, &mut rng).unwrap();
        let mut state = AdamWState::new(&model.params());
        let losses: Vec<f64> = (0..200)
            .map(|_| train_step(&mut model, &mut state, std::slice::from_ref(&item), &cfg).unwrap())
            .collect();
        assert!(losses[0] / losses[199] >= 10.0, "{} -> {}", losses[0], losses[199]);
    }

    #[test]
    fn missing_teacher_is_data_error() {
        let p = SynthParams { count: 0, seed: 5, image_size: 48, crop_size: 32 };
        let mut s = synth_sample(&p, 0).unwrap();
        s.teacher = None;
        s.name = "lonely".into();
        let mut model = Model::<f32>::build(&small_config()).unwrap();
        let err = train(&mut model, &[s.clone()], &[s.clone()], &TrainConfig::default(), None, &mut |_| {})
            .unwrap_err();
        assert!(err.is_data_error() && err.to_string().contains("lonely"), "{err}");
        let sup = TrainConfig { mode: TrainMode::Supervised, epochs: 1, ..Default::default() };
        assert!(train(&mut model, &[s.clone()], &[s], &sup, None, &mut |_| {}).is_ok());
    }

    #[test]
    fn deterministic_history() {
        let p = SynthParams { count: 0, seed: 9, image_size: 40, crop_size: 32 };
        let data: Vec<Sample> = (0..6).map(|i| synth_sample(&p, i).unwrap()).collect();
        let run = || {
            let mut m = Model::<f32>::build(&small_config()).unwrap();
            init_params(&mut m, 3);
            let cfg = TrainConfig { epochs: 2, batch_size: 2, seed: 11, ..Default::default() };
            let out = train(&mut m, &data[..4], &data[4..], &cfg, None, &mut |_| {}).unwrap();
            (out.history, m)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert!(h1.iter().all(|r| r.train_loss.is_finite()));
        assert!(history_csv(&h1).starts_with("epoch,train_loss,val_miou\n1,"));
    }
}
