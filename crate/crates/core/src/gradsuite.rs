//! The full finite-difference suite: every layer kind, a skip graph, every
//! loss term, and a tiny complete model under the blended loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{balanced_bce, dice_loss, mse_logits, total_loss, LambdaPolicy, DICE_EPS};
use crate::model::{Model, ModelConfig};
use crate::nn::{gradient_check, gradient_check_with_loss, Activation, Graph, Layer, LayerSpec, ParamTensor};
use crate::tensor::Tensor;
use crate::train::init_params;

pub const TOLERANCE: f64 = 1e-4;
pub const LINEAR_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: String,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: String,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

fn randomize(params: Vec<&mut ParamTensor<f64>>, rng: &mut ChaCha8Rng) {
    for p in params {
        for v in p.value.data_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
    }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
}

fn mask(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 })
}

/// Central differences of a scalar function of the logits.
fn loss_case(
    name: &str,
    seed: u64,
    s: &Tensor<f64>,
    f: &dyn Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
) -> Result<SuiteCase> {
    let eps = 1e-6;
    let (_, grad) = f(s)?;
    let mut case = SuiteCase {
        name: name.to_string(),
        seed,
        tolerance: TOLERANCE,
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: String::new(),
    };
    for i in 0..s.numel() {
        let mut p = s.clone();
        p.data_mut()[i] += eps;
        let mut m = s.clone();
        m.data_mut()[i] -= eps;
        let num = (f(&p)?.0 - f(&m)?.0) / (2.0 * eps);
        let a = grad.data()[i];
        let rel = (a - num).abs() / (a.abs() + num.abs()).max(1e-12);
        case.checked += 1;
        if rel > case.max_rel_error {
            case.max_rel_error = rel;
            case.worst = format!("logit[{i}]: analytic {a:e} numeric {num:e}");
        }
    }
    Ok(case)
}

fn layer_cases(seed: u64, out: &mut Vec<SuiteCase>) -> Result<()> {
    // (name, spec, input shape, linear in every coordinate)
    let specs = [
        ("conv3x3", LayerSpec::conv2d(3, 4, 3, 1), [1, 3, 5, 5], true),
        ("conv1x1", LayerSpec::conv2d(2, 3, 1, 1), [1, 2, 3, 3], true),
        (
            "conv_s2_norm_relu",
            LayerSpec::conv2d(3, 2, 3, 2).with_norm(true).with_activation(Activation::Relu),
            [2, 3, 6, 6],
            false,
        ),
        ("depthwise_separable", LayerSpec::depthwise_separable(2, 3, 3), [1, 2, 4, 4], false),
        ("downsample", LayerSpec::downsample(2, 3, 3), [1, 2, 6, 6], false),
        ("upsample", LayerSpec::upsample(3, 2), [1, 3, 3, 3], false),
        ("upsample_linear", LayerSpec::upsample(3, 2).with_activation(Activation::None), [1, 3, 3, 3], true),
        ("norm", LayerSpec::norm(3), [2, 3, 3, 2], true),
        ("relu", LayerSpec::activation(3, Activation::Relu), [1, 3, 3, 3], false),
        ("sigmoid_head", LayerSpec::sigmoid_head(2), [1, 2, 3, 3], false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, spec, shape, linear) in specs {
        let mut layer = Layer::<f64>::build("l", spec)?;
        randomize(layer.params_mut(), &mut rng);
        let mut g = Graph::new();
        g.push(layer, false);
        let x = uniform(&shape, 1.0, &mut rng);
        let rep = gradient_check(&mut g, std::slice::from_ref(&x), 1e-5)?;
        out.push(SuiteCase {
            name: format!("layer {name}"),
            seed,
            tolerance: TOLERANCE,
            max_rel_error: rep.max_rel_error,
            checked: rep.checked,
            skipped_kinks: rep.skipped_kinks,
            worst: rep.worst,
        });
        if linear {
            // Central differences are exact here, so a wide step avoids the
            // roundoff floor that a 1e-5 step hits at this tolerance.
            let rep = gradient_check(&mut g, &[x], 1e-3)?;
            out.push(SuiteCase {
                name: format!("layer {name} (linear)"),
                seed,
                tolerance: LINEAR_TOLERANCE,
                max_rel_error: rep.max_rel_error,
                checked: rep.checked,
                skipped_kinks: rep.skipped_kinks,
                worst: rep.worst,
            });
        }
    }

    let mut g = Graph::<f64>::new();
    g.push(Layer::build("stem", LayerSpec::conv2d(2, 3, 3, 1).with_activation(Activation::Relu))?, true);
    g.push(Layer::build("down", LayerSpec::downsample(3, 4, 3))?, false);
    g.push(Layer::build("up", LayerSpec::upsample(4, 3))?, false);
    g.push(Layer::build("cat", LayerSpec::concat_skip(3, 3))?, false);
    g.push(Layer::build("head", LayerSpec::conv2d(6, 1, 1, 1))?, false);
    randomize(g.params_mut(), &mut rng);
    let x = uniform(&[1, 2, 6, 6], 0.5, &mut rng);
    let rep = gradient_check(&mut g, &[x], 1e-5)?;
    out.push(SuiteCase {
        name: "graph with skip".into(),
        seed,
        tolerance: TOLERANCE,
        max_rel_error: rep.max_rel_error,
        checked: rep.checked,
        skipped_kinks: rep.skipped_kinks,
        worst: rep.worst,
    });
    Ok(())
}

fn loss_cases(seed: u64, out: &mut Vec<SuiteCase>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x105);
    let shape = [1, 1, 8, 8];
    let s = uniform(&shape, 3.0, &mut rng);
    let t = uniform(&shape, 5.0, &mut rng);
    let g = mask(&shape, &mut rng);
    let policy = LambdaPolicy::fixed(0.4)?;
    out.push(loss_case("loss mse", seed, &s, &|x| mse_logits(x, &t))?);
    out.push(loss_case("loss balanced bce", seed, &s, &|x| balanced_bce(x, &g))?);
    out.push(loss_case("loss dice", seed, &s, &|x| dice_loss(x, &g, DICE_EPS))?);
    out.push(loss_case("loss total (fixed lambda)", seed, &s, &|x| {
        total_loss(x, &t, &g, &policy).map(|b| (b.loss, b.grad))
    })?);
    Ok(())
}

/// A two-stage model small enough to perturb every parameter.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_size: 8,
        stage_channels: vec![4, 8],
        blocks_per_stage: 1,
        head_channels: 4,
        activation: Activation::Relu,
        norm: true,
    }
}

fn model_case(seed: u64) -> Result<SuiteCase> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x30de1);
    let mut model = Model::<f64>::build(&cfg)?;
    init_params(&mut model, seed);
    for p in model.params_mut() {
        if !p.name.ends_with(".weight") {
            for v in p.value.data_mut() {
                *v += (rng.random::<f64>() - 0.5) * 0.4;
            }
        }
    }
    let side = cfg.input_size;
    let x = uniform(&[1, 3, side, side], 1.0, &mut rng);
    let t = uniform(&[1, 1, side, side], 4.0, &mut rng);
    let g = mask(&[1, 1, side, side], &mut rng);
    let policy = LambdaPolicy::fixed(0.5)?;
    let loss = |y: &Tensor<f64>| total_loss(y, &t, &g, &policy).map(|b| (b.loss, b.grad));
    let rep = gradient_check_with_loss(&mut model.graph, &[x], 1e-5, &loss)?;
    Ok(SuiteCase {
        name: "model total loss".into(),
        seed,
        tolerance: TOLERANCE,
        max_rel_error: rep.max_rel_error,
        checked: rep.checked,
        skipped_kinks: rep.skipped_kinks,
        worst: rep.worst,
    })
}

/// Runs every case once per seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        layer_cases(seed, &mut out)?;
        loss_cases(seed, &mut out)?;
        out.push(model_case(seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_one_seed() {
        let cases = run_suite(&[0, 1, 2, 3, 4, 11]).unwrap();
        assert!(cases.len() > 15);
        for c in &cases {
            assert!(c.passed(), "{c:?}");
            assert!(c.skipped_kinks * 10 <= c.checked, "{c:?}");
        }
        assert!(Model::<f64>::build(&tiny_config()).unwrap().param_count() <= 50_000);
    }
}
