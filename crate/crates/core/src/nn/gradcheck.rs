//! Central finite-difference verification of the analytic backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, GraphCache, Layer, LayerCache, ParamTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Something with a cached forward pass and an analytic backward pass in f64.
pub trait Differentiable {
    type Cache: Default;

    fn forward_cached(&self, inputs: &[&Tensor<f64>], cache: &mut Self::Cache) -> Result<Tensor<f64>>;

    /// Returns one gradient per input; parameter gradients are accumulated.
    fn backward_cached(&mut self, grad_out: &Tensor<f64>, cache: &Self::Cache) -> Result<Vec<Tensor<f64>>>;

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>>;

    /// Hash of every ReLU on/off decision in the cache. A perturbation that
    /// changes it crossed a kink, where finite differences are meaningless.
    fn kink_signature(&self, cache: &Self::Cache) -> u64;
}

impl Differentiable for Layer<f64> {
    type Cache = LayerCache<f64>;

    fn forward_cached(&self, inputs: &[&Tensor<f64>], cache: &mut Self::Cache) -> Result<Tensor<f64>> {
        self.forward(inputs, Some(cache))
    }

    fn backward_cached(&mut self, grad_out: &Tensor<f64>, cache: &Self::Cache) -> Result<Vec<Tensor<f64>>> {
        self.backward(grad_out, cache)
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        Layer::params_mut(self)
    }

    fn kink_signature(&self, cache: &Self::Cache) -> u64 {
        use std::hash::Hasher;
        let mut h = std::hash::DefaultHasher::new();
        cache.relu_signature(self.nodes(), &mut h);
        h.finish()
    }
}

impl Differentiable for Graph<f64> {
    type Cache = GraphCache<f64>;

    fn forward_cached(&self, inputs: &[&Tensor<f64>], cache: &mut Self::Cache) -> Result<Tensor<f64>> {
        match inputs {
            [x] => self.forward(x, Some(cache)),
            _ => Err(Error::Shape(format!("graph takes 1 input, got {}", inputs.len()))),
        }
    }

    fn backward_cached(&mut self, grad_out: &Tensor<f64>, cache: &Self::Cache) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![self.backward(grad_out, cache)?])
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<f64>> {
        Graph::params_mut(self)
    }

    fn kink_signature(&self, cache: &Self::Cache) -> u64 {
        self.relu_signature(cache)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked elements of |a - n| / max(1e-12, |a| + |n|)
    pub max_rel_error: f64,
    /// Element with the largest error, e.g. `param enc0.dw.weight[3]`.
    pub worst: String,
    pub checked: usize,
    /// Elements whose perturbation flipped a ReLU and were therefore skipped.
    pub skipped_kinks: usize,
}

/// Scalar loss `sum(r * y)` with a fixed pseudo-random `r` in [-1, 1].
pub fn projection_loss(seed: u64) -> impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    move |y: &Tensor<f64>| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Tensor::from_fn(y.shape().to_vec(), |_| rng.random::<f64>() * 2.0 - 1.0);
        let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((loss, r))
    }
}

/// [`gradient_check_with_loss`] with a fixed projection loss.
pub fn gradient_check<M: Differentiable>(m: &mut M, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport> {
    gradient_check_with_loss(m, inputs, eps, &projection_loss(0x5eed))
}

/// Compares analytic gradients against central differences for every
/// parameter element and every input element.
pub fn gradient_check_with_loss<M: Differentiable>(
    m: &mut M,
    inputs: &[Tensor<f64>],
    eps: f64,
    loss: &dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
) -> Result<GradCheckReport> {
    for p in m.params_mut() {
        p.zero_grad();
    }
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let mut cache = M::Cache::default();
    let y = m.forward_cached(&refs, &mut cache)?;
    let base_sig = m.kink_signature(&cache);
    let (l0, dy) = loss(&y)?;
    if !l0.is_finite() {
        return Err(Error::Numeric(format!("non-finite base loss {l0}")));
    }
    let input_grads = m.backward_cached(&dy, &cache)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };

    // Loss at the current parameters/inputs, or None if a ReLU flipped.
    let probe = |m: &M, xs: &[&Tensor<f64>], what: &str| -> Result<Option<f64>> {
        let mut c = M::Cache::default();
        let y = m.forward_cached(xs, &mut c)?;
        let (l, _) = loss(&y)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss while perturbing {what}")));
        }
        Ok((m.kink_signature(&c) == base_sig).then_some(l))
    };

    let mut record = |analytic: f64, plus: Option<f64>, minus: Option<f64>, what: String| -> Result<()> {
        if !analytic.is_finite() {
            return Err(Error::Numeric(format!("non-finite analytic gradient at {what}")));
        }
        let (Some(lp), Some(lm)) = (plus, minus) else {
            report.skipped_kinks += 1;
            return Ok(());
        };
        let numeric = (lp - lm) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = format!("{what}: analytic {analytic:e} numeric {numeric:e}");
        }
        Ok(())
    };

    let analytic_params: Vec<(String, Vec<f64>)> = m
        .params_mut()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();
    for (pi, (name, grads)) in analytic_params.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = m.params_mut()[pi].value.data()[j];
            m.params_mut()[pi].value.data_mut()[j] = orig + eps;
            let plus = probe(m, &refs, name)?;
            m.params_mut()[pi].value.data_mut()[j] = orig - eps;
            let minus = probe(m, &refs, name)?;
            m.params_mut()[pi].value.data_mut()[j] = orig;
            record(a, plus, minus, format!("param {name}[{j}]"))?;
        }
    }

    for (k, x) in inputs.iter().enumerate() {
        let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
        for j in 0..x.numel() {
            let orig = x.data()[j];
            xs[k].data_mut()[j] = orig + eps;
            let plus = probe(m, &xs.iter().collect::<Vec<_>>(), "input")?;
            xs[k].data_mut()[j] = orig - eps;
            let minus = probe(m, &xs.iter().collect::<Vec<_>>(), "input")?;
            xs[k].data_mut()[j] = orig;
            record(input_grads[k].data()[j], plus, minus, format!("input {k}[{j}]"))?;
        }
    }
    Ok(report)
}
