//! Distillation objective on student logits:
//! `lambda * mse(s, t) + (1 - lambda) * (0.5 * bce + 0.5 * dice)`,
//! where `lambda` follows the teacher's confidence and is a constant for the
//! gradient.
//!
//! All functions take maps of identical shape and return the scalar loss
//! (accumulated in f64) with its gradient with respect to the student logits.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Real, Tensor};

pub const DICE_EPS: f64 = 1.0;

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>, bname: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, "student", a.shape(), bname, b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::Shape(format!("{op}: empty input")));
    }
    Ok(())
}

fn check_binary<T: Real>(op: &str, gt: &Tensor<T>) -> Result<()> {
    match gt.data().iter().position(|&g| g != T::zero() && g != T::one()) {
        Some(i) => Err(Error::Domain(format!(
            "{op}: ground truth must be 0 or 1, element {i} is {}",
            gt.data()[i].as_f64()
        ))),
        None => Ok(()),
    }
}

/// `mean((s - t)^2)`.
pub fn mse_logits<T: Real>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape("mse_logits", student, teacher, "teacher")?;
    let n = student.numel() as f64;
    let mut loss = 0.0;
    let mut grad = student.clone();
    for (g, &t) in grad.data_mut().iter_mut().zip(teacher.data()) {
        let d = g.as_f64() - t.as_f64();
        loss += d * d;
        *g = T::lit(2.0 * d / n);
    }
    Ok((loss / n, grad))
}

/// Class-balanced BCE with weights `N/(2 max(Np,1))` and `N/(2 max(Nn,1))`.
pub fn balanced_bce<T: Real>(student: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    same_shape("balanced_bce", student, gt, "gt")?;
    check_binary("balanced_bce", gt)?;
    let n = student.numel() as f64;
    let np = gt.data().iter().filter(|&&g| g == T::one()).count() as f64;
    let nn = n - np;
    let w_pos = n / (2.0 * np.max(1.0));
    let w_neg = n / (2.0 * nn.max(1.0));
    let mut loss = 0.0;
    let mut grad = student.clone();
    for (gs, &g) in grad.data_mut().iter_mut().zip(gt.data()) {
        let s = gs.as_f64();
        let p = sigmoid(s);
        if g == T::one() {
            loss += w_pos * softplus(-s);
            *gs = T::lit(w_pos * (p - 1.0) / n);
        } else {
            loss += w_neg * softplus(s);
            *gs = T::lit(w_neg * p / n);
        }
    }
    Ok((loss / n, grad))
}

/// `1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)` with `p = sigmoid(s)`.
pub fn dice_loss<T: Real>(student: &Tensor<T>, gt: &Tensor<T>, eps: f64) -> Result<(f64, Tensor<T>)> {
    same_shape("dice_loss", student, gt, "gt")?;
    check_binary("dice_loss", gt)?;
    if !(eps >= 0.0) {
        return Err(Error::Domain(format!("dice eps must be >= 0, got {eps}")));
    }
    let p: Vec<f64> = student.data().iter().map(|s| sigmoid(s.as_f64())).collect();
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&pi, g) in p.iter().zip(gt.data()) {
        let g = g.as_f64();
        inter += pi * g;
        sp += pi;
        sg += g;
    }
    let num = 2.0 * inter + eps;
    let den = sp + sg + eps;
    if den == 0.0 {
        return Err(Error::Numeric("dice denominator is zero; use eps > 0".into()));
    }
    let mut grad = student.clone();
    for ((gs, &pi), g) in grad.data_mut().iter_mut().zip(&p).zip(gt.data()) {
        let dd_dp = (2.0 * g.as_f64() * den - num) / (den * den);
        *gs = T::lit(-dd_dp * pi * (1.0 - pi));
    }
    Ok((1.0 - num / den, grad))
}

/// Affine map from teacher confidence to the blend weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaPolicy {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy {
            lambda_min: 0.2,
            lambda_max: 0.8,
        }
    }
}

impl LambdaPolicy {
    /// Requires `0 < min <= max < 1`. `min == max` pins lambda.
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min > 0.0 && lambda_min <= lambda_max && lambda_max < 1.0) {
            return Err(Error::Config(format!(
                "lambda policy needs 0 < min <= max < 1, got [{lambda_min}, {lambda_max}]"
            )));
        }
        Ok(LambdaPolicy {
            lambda_min,
            lambda_max,
        })
    }

    pub fn fixed(lambda: f64) -> Result<Self> {
        Self::new(lambda, lambda)
    }
}

/// `lambda_min + (lambda_max - lambda_min) * mean|2 sigmoid(t) - 1|`.
pub fn teacher_confidence_lambda<T: Real>(teacher: &Tensor<T>, policy: &LambdaPolicy) -> f64 {
    if teacher.numel() == 0 {
        return policy.lambda_min;
    }
    let c = teacher
        .data()
        .iter()
        .map(|t| (2.0 * sigmoid(t.as_f64()) - 1.0).abs())
        .sum::<f64>()
        / teacher.numel() as f64;
    (policy.lambda_min + (policy.lambda_max - policy.lambda_min) * c).clamp(policy.lambda_min, policy.lambda_max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T> {
    pub loss: f64,
    pub grad: Tensor<T>,
    pub lambda: f64,
    pub mse: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Blends precomputed components with a fixed lambda.
pub fn blend(lambda: f64, mse: f64, bce: f64, dice: f64) -> f64 {
    lambda * mse + (1.0 - lambda) * (0.5 * bce + 0.5 * dice)
}

fn blend_grads<T: Real>(lambda: f64, gm: Option<&Tensor<T>>, gb: &Tensor<T>, gd: &Tensor<T>) -> Tensor<T> {
    let mut out = gb.clone();
    let sup = 1.0 - lambda;
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let m = gm.map_or(0.0, |g| g.data()[i].as_f64());
        *o = T::lit(lambda * m + sup * (0.5 * gb.data()[i].as_f64() + 0.5 * gd.data()[i].as_f64()));
    }
    out
}

/// Distillation loss with lambda taken from the teacher's confidence.
pub fn total_loss<T: Real>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    gt: &Tensor<T>,
    policy: &LambdaPolicy,
) -> Result<LossBreakdown<T>> {
    same_shape("total_loss", student, teacher, "teacher")?;
    same_shape("total_loss", student, gt, "gt")?;
    if let Some(i) = teacher.data().iter().position(|t| !t.as_f64().is_finite()) {
        return Err(Error::Numeric(format!("teacher logit {i} is not finite")));
    }
    let lambda = teacher_confidence_lambda(teacher, policy);
    let (mse, gm) = mse_logits(student, teacher)?;
    let (bce, gb) = balanced_bce(student, gt)?;
    let (dice, gd) = dice_loss(student, gt, DICE_EPS)?;
    Ok(LossBreakdown {
        loss: blend(lambda, mse, bce, dice),
        grad: blend_grads(lambda, Some(&gm), &gb, &gd),
        lambda,
        mse,
        bce,
        dice,
    })
}

/// Ground-truth-only loss `0.5 * bce + 0.5 * dice` (the lambda = 0 endpoint).
pub fn supervised_loss<T: Real>(student: &Tensor<T>, gt: &Tensor<T>) -> Result<LossBreakdown<T>> {
    let (bce, gb) = balanced_bce(student, gt)?;
    let (dice, gd) = dice_loss(student, gt, DICE_EPS)?;
    Ok(LossBreakdown {
        loss: blend(0.0, 0.0, bce, dice),
        grad: blend_grads(0.0, None, &gb, &gd),
        lambda: 0.0,
        mse: 0.0,
        bce,
        dice,
    })
}
