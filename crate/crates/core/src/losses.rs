//! Training losses: cross-entropy from labels, inplace distillation from a
//! teacher switch's predictions, and distillation with pre-head activation
//! matching.
//!
//! All losses average over the batch. The per-sample cross-entropy keeps a
//! `1/C` normalizer: `-(1/C) * sum_c target_c * ln(pred_c)`.

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities below this are clamped before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// A length-C probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector(Vec<f64>);

impl PredictionVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Invalid(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self(probs))
    }

    pub fn one_hot(len: usize, class: usize) -> Self {
        let mut v = vec![0.0; len];
        v[class] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A pre-head activation placed in full-model channel coordinates: the
/// switch's covered positions carry values, everything else is exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationVector(Vec<f64>);

impl ActivationVector {
    /// Builds a length-`full` vector from `(offset, values)` pieces.
    pub fn positional(full: usize, pieces: &[(usize, &[f64])]) -> Result<Self> {
        let mut v = vec![0.0; full];
        for &(offset, values) in pieces {
            if offset + values.len() > full {
                return Err(Error::Invalid(format!(
                    "activation piece at {offset}+{} exceeds length {full}",
                    values.len()
                )));
            }
            v[offset..offset + values.len()].copy_from_slice(values);
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Cross-entropy of `pred` (probabilities, `[B, C]`) against `target`
/// (`[B, C]`, one-hot or soft). Differentiable through `pred` only.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let (p, t) = (g.value(pred), g.value(target));
    if p.shape() != t.shape() {
        return Err(Error::shape("ce_loss", p.shape(), t.shape()));
    }
    let [b, c] = p.dims2("ce_loss")?;
    let clamped = g.clamp_min(pred, T::lit(PROB_FLOOR))?;
    let logp = g.ln(clamped)?;
    let weighted = g.mul(target, logp)?;
    let total = g.sum(weighted)?;
    g.scale(total, T::lit(-1.0 / (c as f64 * b as f64)))
}

/// Distillation from a teacher's predictions. The teacher is detached here, so
/// no gradient ever reaches it.
pub fn kd_loss<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let teacher = g.detach(teacher);
    ce_loss(g, student, teacher)
}

/// Mean squared error `(1/N) * ||a - b||^2` per sample, averaged over the batch,
/// with `N` the full activation length.
pub fn activation_mse<T: Scalar>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let (a, t) = (g.value(student), g.value(teacher));
    if a.shape() != t.shape() {
        return Err(Error::shape("activation_mse", a.shape(), t.shape()));
    }
    let [b, n] = a.dims2("activation_mse")?;
    let diff = g.sub(student, teacher)?;
    let sq = g.square(diff)?;
    let total = g.sum(sq)?;
    g.scale(total, T::lit(1.0 / (n as f64 * b as f64)))
}

/// `kd_loss + beta * activation_mse`, both teachers detached. With
/// `beta == 0` this is exactly [`kd_loss`].
pub fn kd_act_loss<T: Scalar>(
    g: &mut Graph<T>,
    student_pred: Var,
    teacher_pred: Var,
    student_act: Var,
    teacher_act: Var,
    beta: T,
) -> Result<Var> {
    let (sa, ta) = (g.value(student_act), g.value(teacher_act));
    if sa.shape() != ta.shape() {
        return Err(Error::shape("kd_act_loss", sa.shape(), ta.shape()));
    }
    let kd = kd_loss(g, student_pred, teacher_pred)?;
    if beta == T::zero() {
        return Ok(kd);
    }
    let teacher_act = g.detach(teacher_act);
    let mse = activation_mse(g, student_act, teacher_act)?;
    let term = g.scale(mse, beta)?;
    g.add(kd, term)
}

/// One-hot `[B, C]` targets.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros([labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Invalid(format!("label {l} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + l] = T::one();
    }
    Ok(t)
}

fn row<T: Scalar>(values: &[f64]) -> Result<Tensor<T>> {
    Tensor::new([1, values.len()], values.iter().map(|&v| T::lit(v)).collect())
}

/// [`ce_loss`] on single vectors.
pub fn ce_value(pred: &PredictionVector, target: &PredictionVector) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape("ce_loss", &[pred.len()], &[target.len()]));
    }
    let mut g = Graph::<f64>::new();
    let p = g.constant(row(pred.as_slice())?);
    let t = g.constant(row(target.as_slice())?);
    let l = ce_loss(&mut g, p, t)?;
    Ok(g.value(l).data()[0])
}

/// [`kd_act_loss`] on single vectors.
pub fn kd_act_value(
    student_pred: &PredictionVector,
    teacher_pred: &PredictionVector,
    student_act: &ActivationVector,
    teacher_act: &ActivationVector,
    beta: f64,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let sp = g.constant(row(student_pred.as_slice())?);
    let tp = g.constant(row(teacher_pred.as_slice())?);
    let sa = g.constant(row(student_act.as_slice())?);
    let ta = g.constant(row(teacher_act.as_slice())?);
    let l = kd_act_loss(&mut g, sp, tp, sa, ta, beta)?;
    Ok(g.value(l).data()[0])
}

/// Runs `loss_fn` with the student as a parameter and the teacher as a second
/// parameter, returning `(loss, grad_student, grad_teacher)`. Used to check the
/// detach contract.
pub fn loss_gradients<F>(student: &Tensor<f64>, teacher: &Tensor<f64>, loss_fn: F) -> Result<(f64, Tensor<f64>, Tensor<f64>)>
where
    F: Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let s = store.add("student", student.clone())?;
    let t = store.add("teacher", teacher.clone())?;
    let mut g = Graph::new();
    let sv = g.param(&store, s)?;
    let tv = g.param(&store, t)?;
    let l = loss_fn(&mut g, sv, tv)?;
    let value = g.value(l).data()[0];
    g.backward(l, &mut store)?;
    Ok((value, store.grad(s).clone(), store.grad(t).clone()))
}
