//! Minimal differentiable classifier with exact analytic gradients.
//!
//! The model is multinomial logistic regression (`hidden_dim = 0`) or a
//! one-hidden-layer tanh MLP, stored as a flat `f64` vector with a fixed
//! layer layout. Three losses are registered with the gradient engine:
//! plain cross-entropy, cross-entropy with an elastic quadratic anchor
//! penalty, and a distillation loss against a fixed teacher. A central
//! finite-difference checker validates the analytic gradients.
//!
//! Everything here is a pure function over value types; models are cheap to
//! copy and safe to share across threads.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Architecture descriptor. `hidden_dim = 0` means an affine map followed by
/// softmax; `hidden_dim > 0` inserts one tanh hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// One named contiguous segment of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            input_dim,
            hidden_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Total number of parameters, determined entirely by the three dims.
    pub fn parameter_count(&self) -> usize {
        if self.hidden_dim == 0 {
            self.input_dim * self.num_classes + self.num_classes
        } else {
            self.input_dim * self.hidden_dim
                + self.hidden_dim
                + self.hidden_dim * self.num_classes
                + self.num_classes
        }
    }

    /// Layer layout of the flat vector. Equal specs always produce identical
    /// layouts, which is what makes element-wise aggregation across clients
    /// safe.
    pub fn layout(&self) -> Vec<LayoutEntry> {
        let mut entries = Vec::new();
        let mut offset = 0;
        let mut push = |name: &'static str, len: usize, offset: &mut usize| {
            entries.push(LayoutEntry {
                name,
                offset: *offset,
                len,
            });
            *offset += len;
        };
        if self.hidden_dim > 0 {
            push("hidden_weights", self.input_dim * self.hidden_dim, &mut offset);
            push("hidden_bias", self.hidden_dim, &mut offset);
            push("output_weights", self.hidden_dim * self.num_classes, &mut offset);
        } else {
            push("output_weights", self.input_dim * self.num_classes, &mut offset);
        }
        push("output_bias", self.num_classes, &mut offset);
        entries
    }
}

/// A concrete model: spec plus the flat parameter vector and its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub values: Vec<f64>,
    pub layout: Vec<LayoutEntry>,
}

impl ModelParams {
    pub fn from_values(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_count();
        if values.len() != expected {
            return Err(Error::LayoutMismatch(format!(
                "expected {expected} parameter values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "parameter values must be finite".into(),
            ));
        }
        Ok(ModelParams {
            spec,
            values,
            layout: spec.layout(),
        })
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        Self::from_values(spec, vec![0.0; spec.parameter_count()])
    }

    fn segment(&self, name: &'static str) -> &[f64] {
        let entry = self
            .layout
            .iter()
            .find(|e| e.name == name)
            .expect("layout entry exists for this spec");
        &self.values[entry.offset..entry.offset + entry.len]
    }

    /// Logits for a feature matrix, one row per input row.
    pub fn forward(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_pass(features)?.logits)
    }

    fn forward_pass(&self, features: &Array2<f64>) -> Result<ForwardPass> {
        let spec = self.spec;
        if features.ncols() != spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "feature width {} != input_dim {}",
                features.ncols(),
                spec.input_dim
            )));
        }
        let out_bias = ArrayView1::from(self.segment("output_bias"));
        if spec.hidden_dim == 0 {
            let w = ArrayView2::from_shape(
                (spec.input_dim, spec.num_classes),
                self.segment("output_weights"),
            )
            .expect("segment length matches shape");
            let mut logits = features.dot(&w);
            for mut row in logits.rows_mut() {
                row += &out_bias;
            }
            Ok(ForwardPass {
                hidden: None,
                logits,
            })
        } else {
            let w1 = ArrayView2::from_shape(
                (spec.input_dim, spec.hidden_dim),
                self.segment("hidden_weights"),
            )
            .expect("segment length matches shape");
            let b1 = ArrayView1::from(self.segment("hidden_bias"));
            let w2 = ArrayView2::from_shape(
                (spec.hidden_dim, spec.num_classes),
                self.segment("output_weights"),
            )
            .expect("segment length matches shape");
            let mut pre = features.dot(&w1);
            for mut row in pre.rows_mut() {
                row += &b1;
            }
            let hidden = pre.mapv(f64::tanh);
            let mut logits = hidden.dot(&w2);
            for mut row in logits.rows_mut() {
                row += &out_bias;
            }
            Ok(ForwardPass {
                hidden: Some(hidden),
                logits,
            })
        }
    }
}

struct ForwardPass {
    hidden: Option<Array2<f64>>,
    logits: Array2<f64>,
}

/// Gradient of a loss with respect to a model's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

/// A batch of labeled examples: one feature row per example, labels in
/// `[0, num_classes)` of whichever model consumes the batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "batch features must be finite".into(),
            ));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fresh model with uniform weights scaled by `1/sqrt(fan_in)` and zero
/// biases. Bitwise-deterministic for a fixed `(spec, seed)`.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.parameter_count()];
    for entry in spec.layout() {
        let fan_in = match entry.name {
            "hidden_weights" => spec.input_dim,
            "output_weights" => {
                if spec.hidden_dim == 0 {
                    spec.input_dim
                } else {
                    spec.hidden_dim
                }
            }
            // biases stay zero
            _ => continue,
        };
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[entry.offset..entry.offset + entry.len] {
            *v = rng.random_range(-scale..scale);
        }
    }
    ModelParams::from_values(spec, values)
}

/// Numerically stable softmax with temperature. Entries are strictly
/// positive (floored at the smallest positive normal before normalizing) and
/// sum to 1.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(
            "softmax temperature must be positive".into(),
        ));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax over empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("softmax logits must be finite".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| (((z - max) / temperature).exp()).max(f64::MIN_POSITIVE))
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Row-wise softmax for a logits matrix (callers guarantee `t > 0` and
/// finite logits).
fn softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (((*v - max) / temperature).exp()).max(f64::MIN_POSITIVE);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise log-softmax, computed via log-sum-exp.
fn log_softmax_rows(logits: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|z| z / temperature);
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// The losses registered with the gradient engine.
///
/// `Anchored` adds a quadratic penalty `sum_i weight_i/2 * lambda *
/// (theta_i - anchor_i)^2` to cross-entropy; it backs the multi-task
/// personalization loss, with `weights` an importance estimate per
/// parameter. `Distill` blends cross-entropy with KL divergence from a fixed
/// teacher's tempered softmax to the student's; teacher parameters are
/// captured by value so later mutation of the original cannot leak in.
#[derive(Debug, Clone)]
pub enum Loss {
    CrossEntropy,
    Anchored {
        anchor: Vec<f64>,
        weights: Vec<f64>,
        lambda: f64,
    },
    Distill {
        teacher: ModelParams,
        alpha: f64,
        temperature: f64,
        /// Standard-literature variant: move the `T^2` factor from the
        /// cross-entropy term to the KL term.
        scale_on_kl: bool,
    },
}

impl Loss {
    fn validate(&self, model: &ModelParams) -> Result<()> {
        match self {
            Loss::CrossEntropy => Ok(()),
            Loss::Anchored {
                anchor,
                weights,
                lambda,
            } => {
                if anchor.len() != model.values.len() || weights.len() != model.values.len() {
                    return Err(Error::LayoutMismatch(
                        "anchor/weight vectors must match the model's parameter count".into(),
                    ));
                }
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return Err(Error::InvalidArgument(
                        "anchored loss lambda must be finite and >= 0".into(),
                    ));
                }
                Ok(())
            }
            Loss::Distill {
                teacher,
                alpha,
                temperature,
                ..
            } => {
                if teacher.spec.input_dim != model.spec.input_dim
                    || teacher.spec.num_classes != model.spec.num_classes
                {
                    return Err(Error::LayoutMismatch(
                        "teacher input/output dims must match the student's".into(),
                    ));
                }
                if !(*alpha >= 0.0 && *alpha <= 1.0) {
                    return Err(Error::InvalidArgument(
                        "distillation alpha must lie in [0, 1]".into(),
                    ));
                }
                if !(*temperature > 0.0) {
                    return Err(Error::InvalidArgument(
                        "distillation temperature must be positive".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

fn validate_labels(batch: &Batch, num_classes: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss over an empty batch".into()));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true labels under row-wise softmax.
fn mean_nll(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / n
}

/// Mean cross-entropy of a batch; always >= 0.
pub fn cross_entropy(model: &ModelParams, batch: &Batch) -> Result<f64> {
    loss_value(&Loss::CrossEntropy, model, batch)
}

/// Scalar value of a registered loss.
pub fn loss_value(loss: &Loss, model: &ModelParams, batch: &Batch) -> Result<f64> {
    loss.validate(model)?;
    validate_labels(batch, model.spec.num_classes)?;
    let fwd = model.forward_pass(&batch.features)?;
    let ce = mean_nll(&fwd.logits, &batch.labels);
    match loss {
        Loss::CrossEntropy => Ok(ce),
        Loss::Anchored {
            anchor,
            weights,
            lambda,
        } => {
            let penalty: f64 = model
                .values
                .iter()
                .zip(anchor)
                .zip(weights)
                .map(|((&v, &a), &w)| 0.5 * lambda * w * (v - a) * (v - a))
                .sum();
            Ok(ce + penalty)
        }
        Loss::Distill {
            teacher,
            alpha,
            temperature,
            scale_on_kl,
        } => {
            let t_logits = teacher.forward(&batch.features)?;
            let kl = mean_kl(&t_logits, &fwd.logits, *temperature);
            let t2 = temperature * temperature;
            if *scale_on_kl {
                Ok(alpha * ce + (1.0 - alpha) * t2 * kl)
            } else {
                Ok(alpha * t2 * ce + (1.0 - alpha) * kl)
            }
        }
    }
}

/// Batch-mean KL divergence from the teacher's tempered softmax to the
/// student's.
fn mean_kl(teacher_logits: &Array2<f64>, student_logits: &Array2<f64>, temperature: f64) -> f64 {
    let p = softmax_rows(teacher_logits, temperature);
    let log_p = log_softmax_rows(teacher_logits, temperature);
    let log_q = log_softmax_rows(student_logits, temperature);
    let n = teacher_logits.nrows() as f64;
    let mut total = 0.0;
    for ((p_row, lp_row), lq_row) in p
        .rows()
        .into_iter()
        .zip(log_p.rows())
        .zip(log_q.rows())
    {
        for ((&pi, &lpi), &lqi) in p_row.iter().zip(lp_row).zip(lq_row) {
            total += pi * (lpi - lqi);
        }
    }
    total / n
}

/// Analytic gradient of the mean loss with respect to every parameter.
pub fn grad(loss: &Loss, model: &ModelParams, batch: &Batch) -> Result<Gradient> {
    Ok(loss_and_grad(loss, model, batch)?.1)
}

/// Loss value and analytic gradient in a single pass.
pub fn loss_and_grad(loss: &Loss, model: &ModelParams, batch: &Batch) -> Result<(f64, Gradient)> {
    loss.validate(model)?;
    validate_labels(batch, model.spec.num_classes)?;
    let fwd = model.forward_pass(&batch.features)?;
    let n = batch.len() as f64;
    let ce = mean_nll(&fwd.logits, &batch.labels);

    // d(mean cross-entropy)/d(logits) = (softmax - onehot) / n
    let mut ce_dlogits = softmax_rows(&fwd.logits, 1.0);
    for (mut row, &label) in ce_dlogits.rows_mut().into_iter().zip(&batch.labels) {
        row[label] -= 1.0;
    }
    ce_dlogits.mapv_inplace(|v| v / n);

    let (value, dlogits) = match loss {
        Loss::CrossEntropy => (ce, ce_dlogits),
        Loss::Anchored { .. } => (ce, ce_dlogits),
        Loss::Distill {
            teacher,
            alpha,
            temperature,
            scale_on_kl,
        } => {
            let t_logits = teacher.forward(&batch.features)?;
            let kl = mean_kl(&t_logits, &fwd.logits, *temperature);
            let p = softmax_rows(&t_logits, *temperature);
            let q = softmax_rows(&fwd.logits, *temperature);
            let t = *temperature;
            let t2 = t * t;
            // d(mean KL)/d(student logits) = (q - p) / (T * n)
            let mut kl_dlogits = &q - &p;
            kl_dlogits.mapv_inplace(|v| v / (t * n));
            let (value, ce_w, kl_w) = if *scale_on_kl {
                (alpha * ce + (1.0 - alpha) * t2 * kl, *alpha, (1.0 - alpha) * t2)
            } else {
                (alpha * t2 * ce + (1.0 - alpha) * kl, alpha * t2, 1.0 - alpha)
            };
            let mut d = ce_dlogits;
            d.mapv_inplace(|v| v * ce_w);
            d.scaled_add(kl_w, &kl_dlogits);
            (value, d)
        }
    };

    let mut grad_values = backprop(model, &batch.features, &fwd, &dlogits);

    if let Loss::Anchored {
        anchor,
        weights,
        lambda,
    } = loss
    {
        let mut penalty = 0.0;
        for (i, g) in grad_values.iter_mut().enumerate() {
            let diff = model.values[i] - anchor[i];
            *g += lambda * weights[i] * diff;
            penalty += 0.5 * lambda * weights[i] * diff * diff;
        }
        return Ok((
            value + penalty,
            Gradient {
                values: grad_values,
            },
        ));
    }

    Ok((
        value,
        Gradient {
            values: grad_values,
        },
    ))
}

/// Backpropagate `dlogits` through the affine/tanh chain into a flat
/// parameter gradient in layout order.
fn backprop(
    model: &ModelParams,
    features: &Array2<f64>,
    fwd: &ForwardPass,
    dlogits: &Array2<f64>,
) -> Vec<f64> {
    let spec = model.spec;
    let mut out = vec![0.0; spec.parameter_count()];
    let db_out: Array1<f64> = dlogits.sum_axis(Axis(0));

    if spec.hidden_dim == 0 {
        let dw = features.t().dot(dlogits);
        write_segment(&mut out, &spec, "output_weights", dw.iter());
        write_segment(&mut out, &spec, "output_bias", db_out.iter());
    } else {
        let hidden = fwd.hidden.as_ref().expect("hidden activations cached");
        let w2 = ArrayView2::from_shape(
            (spec.hidden_dim, spec.num_classes),
            model.segment("output_weights"),
        )
        .expect("segment length matches shape");
        let dw2 = hidden.t().dot(dlogits);
        let mut dpre = dlogits.dot(&w2.t());
        dpre.zip_mut_with(hidden, |d, &h| *d *= 1.0 - h * h);
        let dw1 = features.t().dot(&dpre);
        let db1: Array1<f64> = dpre.sum_axis(Axis(0));
        write_segment(&mut out, &spec, "hidden_weights", dw1.iter());
        write_segment(&mut out, &spec, "hidden_bias", db1.iter());
        write_segment(&mut out, &spec, "output_weights", dw2.iter());
        write_segment(&mut out, &spec, "output_bias", db_out.iter());
    }
    out
}

fn write_segment<'a>(
    out: &mut [f64],
    spec: &ModelSpec,
    name: &'static str,
    values: impl Iterator<Item = &'a f64>,
) {
    let entry = spec
        .layout()
        .into_iter()
        .find(|e| e.name == name)
        .expect("layout entry exists");
    for (slot, v) in out[entry.offset..entry.offset + entry.len]
        .iter_mut()
        .zip(values)
    {
        *slot = *v;
    }
}

/// One SGD step: `values - lr * g`, returning a new model.
pub fn sgd_step(model: &ModelParams, g: &Gradient, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(
            "learning rate must be positive and finite".into(),
        ));
    }
    if g.values.len() != model.values.len() {
        return Err(Error::LayoutMismatch(format!(
            "gradient length {} != parameter count {}",
            g.values.len(),
            model.values.len()
        )));
    }
    let values = model
        .values
        .iter()
        .zip(&g.values)
        .map(|(&v, &gv)| v - lr * gv)
        .collect();
    ModelParams::from_values(model.spec, values)
}

/// Worst relative error between the analytic gradient and central finite
/// differences of the loss, with denominator `max(|analytic|, |numeric|,
/// 1e-8)` per coordinate.
pub fn finite_diff_check(loss: &Loss, model: &ModelParams, batch: &Batch, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(
            "finite-difference step must lie in (0, 1e-2]".into(),
        ));
    }
    let analytic = grad(loss, model, batch)?;
    let mut probe = model.clone();
    let mut worst = 0.0_f64;
    for i in 0..probe.values.len() {
        let original = probe.values[i];
        probe.values[i] = original + eps;
        let plus = loss_value(loss, &probe, batch)?;
        probe.values[i] = original - eps;
        let minus = loss_value(loss, &probe, batch)?;
        probe.values[i] = original;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.values[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn spec(i: usize, h: usize, c: usize) -> ModelSpec {
        ModelSpec::new(i, h, c).unwrap()
    }

    /// Straight-line scalar reimplementation of the affine/tanh chain, kept
    /// independent of the ndarray-based production path.
    fn naive_forward(model: &ModelParams, x: &[f64]) -> Vec<f64> {
        let s = model.spec;
        let v = &model.values;
        if s.hidden_dim == 0 {
            let w_off = 0;
            let b_off = s.input_dim * s.num_classes;
            (0..s.num_classes)
                .map(|c| {
                    let mut z = v[b_off + c];
                    for i in 0..s.input_dim {
                        z += x[i] * v[w_off + i * s.num_classes + c];
                    }
                    z
                })
                .collect()
        } else {
            let w1_off = 0;
            let b1_off = s.input_dim * s.hidden_dim;
            let w2_off = b1_off + s.hidden_dim;
            let b2_off = w2_off + s.hidden_dim * s.num_classes;
            let hidden: Vec<f64> = (0..s.hidden_dim)
                .map(|j| {
                    let mut z = v[b1_off + j];
                    for i in 0..s.input_dim {
                        z += x[i] * v[w1_off + i * s.hidden_dim + j];
                    }
                    z.tanh()
                })
                .collect();
            (0..s.num_classes)
                .map(|c| {
                    let mut z = v[b2_off + c];
                    for j in 0..s.hidden_dim {
                        z += hidden[j] * v[w2_off + j * s.num_classes + c];
                    }
                    z
                })
                .collect()
        }
    }

    fn random_model(s: ModelSpec, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.8).unwrap();
        let values = (0..s.parameter_count())
            .map(|_| normal.sample(&mut rng))
            .collect();
        ModelParams::from_values(s, values).unwrap()
    }

    fn random_batch(s: ModelSpec, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.5).unwrap();
        let features =
            Array2::from_shape_fn((n, s.input_dim), |_| normal.sample(&mut rng));
        let labels = (0..n).map(|_| rng.random_range(0..s.num_classes)).collect();
        Batch::new(features, labels).unwrap()
    }

    #[test]
    fn parameter_count_matches_layout() {
        let s = spec(4, 3, 5);
        assert_eq!(s.parameter_count(), 35);
        let total: usize = s.layout().iter().map(|e| e.len).sum();
        assert_eq!(total, 35);
        assert_eq!(spec(2, 0, 2).parameter_count(), 6);
    }

    #[test]
    fn init_biases_are_zero_and_deterministic() {
        let s = spec(2, 0, 2);
        let m = init_model(s, 7).unwrap();
        assert_eq!(m.values.len(), 6);
        assert_eq!(&m.values[4..6], &[0.0, 0.0]);
        let again = init_model(s, 7).unwrap();
        assert_eq!(m.values, again.values);
        let other = init_model(s, 8).unwrap();
        assert_ne!(m.values, other.values);
    }

    #[test]
    fn init_weights_respect_fan_in_scale() {
        let s = spec(16, 4, 3);
        let m = init_model(s, 1).unwrap();
        let bound_hidden = 1.0 / 4.0;
        for &v in m.segment("hidden_weights") {
            assert!(v.abs() < bound_hidden);
        }
        let bound_out = 1.0 / 2.0;
        for &v in m.segment("output_weights") {
            assert!(v.abs() < bound_out);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::new(0, 3, 2).is_err());
        assert!(ModelSpec::new(4, 0, 1).is_err());
    }

    #[test]
    fn equal_specs_produce_identical_layouts() {
        assert_eq!(spec(4, 3, 5).layout(), spec(4, 3, 5).layout());
    }

    #[test]
    fn forward_zero_weights_gives_zero_logits() {
        let m = ModelParams::zeros(spec(3, 2, 4)).unwrap();
        let x = arr2(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]);
        let logits = m.forward(&x).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_affine_one_hot_selects_weight_column() {
        // hidden_dim = 0, one-hot input row i: logits = W[i, :] + bias
        let s = spec(3, 0, 2);
        let mut values = vec![0.0; s.parameter_count()];
        // W laid out row-major (input x class)
        for (i, v) in values.iter_mut().enumerate().take(6) {
            *v = i as f64 + 1.0;
        }
        values[6] = 0.25; // bias class 0
        values[7] = -0.5; // bias class 1
        let m = ModelParams::from_values(s, values).unwrap();
        let x = arr2(&[[0.0, 1.0, 0.0]]);
        let logits = m.forward(&x).unwrap();
        assert_abs_diff_eq!(logits[[0, 0]], 3.0 + 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(logits[[0, 1]], 4.0 - 0.5, epsilon = 1e-15);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        for (h, seed) in [(0, 11), (4, 12)] {
            let s = spec(5, h, 3);
            let m = random_model(s, seed);
            let batch = random_batch(s, 7, seed + 100);
            let logits = m.forward(&batch.features).unwrap();
            for (r, row) in batch.features.rows().into_iter().enumerate() {
                let expect = naive_forward(&m, row.as_slice().unwrap());
                for c in 0..3 {
                    assert_abs_diff_eq!(logits[[r, c]], expect[c], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let m = ModelParams::zeros(spec(3, 0, 2)).unwrap();
        let x = arr2(&[[1.0, 2.0]]);
        assert!(m.forward(&x).is_err());
    }

    #[test]
    fn softmax_symmetry_and_reference_values() {
        let p = softmax(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &v in &p {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // exp(1..3) / sum, evaluated independently
        let p = softmax(&[1.0, 2.0, 3.0], 1.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.09003057, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], 0.24472847, epsilon = 1e-8);
        assert_abs_diff_eq!(p[2], 0.66524096, epsilon = 1e-8);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let p = softmax(&[3.0, -1.0], 1e6).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-5);
        assert!((p[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
        assert!(softmax(&[1.0], f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn softmax_normalizes_and_stays_positive(
            logits in proptest::collection::vec(-700.0_f64..700.0, 1..6),
            t in 0.5_f64..10.0,
        ) {
            let p = softmax(&logits, t).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_positive_at_extreme_gap() {
        let p = softmax(&[700.0, -700.0], 1.0).unwrap();
        assert!(p[1] > 0.0);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_predictor() {
        // all-zero model => uniform over C classes => loss = ln C
        let s = spec(3, 0, 4);
        let m = ModelParams::zeros(s).unwrap();
        let batch = random_batch(s, 9, 5);
        let loss = cross_entropy(&m, &batch).unwrap();
        assert_abs_diff_eq!(loss, 4.0_f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(loss, 1.3862944, epsilon = 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct_model_approaches_zero() {
        let s = spec(2, 0, 2);
        // large margin toward the true class for one-hot-ish inputs
        let values = vec![40.0, -40.0, -40.0, 40.0, 0.0, 0.0];
        let m = ModelParams::from_values(s, values).unwrap();
        let batch = Batch::new(arr2(&[[1.0, 0.0], [0.0, 1.0]]), vec![0, 1]).unwrap();
        let loss = cross_entropy(&m, &batch).unwrap();
        assert!(loss >= 0.0);
        assert!(loss < 1e-10);
    }

    #[test]
    fn cross_entropy_matches_per_example_sum() {
        let s = spec(4, 3, 3);
        let m = random_model(s, 21);
        let batch = random_batch(s, 6, 22);
        let loss = cross_entropy(&m, &batch).unwrap();
        let logits = m.forward(&batch.features).unwrap();
        let mut manual = 0.0;
        for (row, &label) in logits.rows().into_iter().zip(&batch.labels) {
            let p = softmax(row.as_slice().unwrap(), 1.0).unwrap();
            manual += -p[label].ln();
        }
        manual /= batch.len() as f64;
        assert_abs_diff_eq!(loss, manual, epsilon = 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_empty_batch() {
        let s = spec(2, 0, 2);
        let m = ModelParams::zeros(s).unwrap();
        let batch = Batch::new(Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(cross_entropy(&m, &batch).is_err());
    }

    #[test]
    fn gradient_passes_finite_difference_check() {
        for (h, seed) in [(0, 31), (3, 32)] {
            let s = spec(4, h, 3);
            let m = random_model(s, seed);
            let batch = random_batch(s, 5, seed + 7);
            let err = finite_diff_check(&Loss::CrossEntropy, &m, &batch, 1e-6).unwrap();
            assert!(err < 1e-5, "fd error {err}");
        }
    }

    #[test]
    fn gradient_zero_inputs_zero_weight_block() {
        let s = spec(3, 0, 2);
        let m = random_model(s, 33);
        let batch = Batch::new(Array2::zeros((4, 3)), vec![0, 1, 0, 1]).unwrap();
        let g = grad(&Loss::CrossEntropy, &m, &batch).unwrap();
        // weight gradients are x^T . d, all-zero inputs => zero block
        for &v in &g.values[0..6] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let s = spec(4, 3, 3);
        let m = random_model(s, 41);
        let batch = random_batch(s, 8, 42);
        let (before, g) = loss_and_grad(&Loss::CrossEntropy, &m, &batch).unwrap();
        let stepped = sgd_step(&m, &g, 1e-4).unwrap();
        let after = cross_entropy(&stepped, &batch).unwrap();
        assert!(after < before);
    }

    #[test]
    fn sgd_step_arithmetic_and_value_semantics() {
        let s = spec(1, 0, 2);
        let m = ModelParams::from_values(s, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let g = Gradient {
            values: vec![1.0, -1.0, 0.0, 0.0],
        };
        let stepped = sgd_step(&m, &g, 0.5).unwrap();
        assert_eq!(stepped.values, vec![0.5, 1.5, 0.0, 0.0]);
        // input unchanged
        assert_eq!(m.values, vec![1.0, 1.0, 0.0, 0.0]);

        let zero = Gradient {
            values: vec![0.0; 4],
        };
        assert_eq!(sgd_step(&m, &zero, 0.3).unwrap().values, m.values);
    }

    #[test]
    fn sgd_step_rejects_bad_inputs() {
        let s = spec(1, 0, 2);
        let m = ModelParams::zeros(s).unwrap();
        let short = Gradient { values: vec![0.0] };
        assert!(sgd_step(&m, &short, 0.1).is_err());
        let g = Gradient {
            values: vec![0.0; 4],
        };
        assert!(sgd_step(&m, &g, 0.0).is_err());
        assert!(sgd_step(&m, &g, -0.1).is_err());
    }

    #[test]
    fn repeated_steps_on_convex_problem_decrease_monotonically() {
        // hidden_dim = 0 cross-entropy is convex in the parameters
        let s = spec(2, 0, 2);
        let mut m = init_model(s, 3).unwrap();
        let batch = Batch::new(
            arr2(&[[1.0, 0.2], [0.9, -0.1], [-1.0, 0.1], [-0.8, -0.3]]),
            vec![0, 0, 1, 1],
        )
        .unwrap();
        let mut last = cross_entropy(&m, &batch).unwrap();
        for _ in 0..50 {
            let g = grad(&Loss::CrossEntropy, &m, &batch).unwrap();
            m = sgd_step(&m, &g, 0.1).unwrap();
            let now = cross_entropy(&m, &batch).unwrap();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn anchored_loss_with_zero_lambda_reduces_to_cross_entropy() {
        let s = spec(3, 2, 3);
        let m = random_model(s, 51);
        let anchor = random_model(s, 52);
        let weights: Vec<f64> = (0..s.parameter_count()).map(|i| i as f64 * 0.1).collect();
        let batch = random_batch(s, 5, 53);
        let loss = Loss::Anchored {
            anchor: anchor.values.clone(),
            weights,
            lambda: 0.0,
        };
        let (v, g) = loss_and_grad(&loss, &m, &batch).unwrap();
        let (v_ce, g_ce) = loss_and_grad(&Loss::CrossEntropy, &m, &batch).unwrap();
        assert_abs_diff_eq!(v, v_ce, epsilon = 1e-12);
        for (a, b) in g.values.iter().zip(&g_ce.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        let err = finite_diff_check(&loss, &m, &batch, 1e-6).unwrap();
        assert!(err < 1e-5);
    }

    #[test]
    fn distill_alpha_one_matches_scaled_cross_entropy_gradient() {
        let s = spec(3, 2, 4);
        let m = random_model(s, 61);
        let teacher = random_model(s, 62);
        let batch = random_batch(s, 5, 63);
        let temperature = 2.0;
        let loss = Loss::Distill {
            teacher,
            alpha: 1.0,
            temperature,
            scale_on_kl: false,
        };
        let g = grad(&loss, &m, &batch).unwrap();
        let g_ce = grad(&Loss::CrossEntropy, &m, &batch).unwrap();
        let k2 = temperature * temperature;
        for (a, b) in g.values.iter().zip(&g_ce.values) {
            assert_abs_diff_eq!(a, k2 * b, epsilon = 1e-10);
        }
    }

    #[test]
    fn distill_gradient_passes_finite_difference_check() {
        let s = spec(4, 3, 3);
        let m = random_model(s, 71);
        let teacher = random_model(s, 72);
        let batch = random_batch(s, 6, 73);
        for scale_on_kl in [false, true] {
            let loss = Loss::Distill {
                teacher: teacher.clone(),
                alpha: 0.5,
                temperature: 2.0,
                scale_on_kl,
            };
            let err = finite_diff_check(&loss, &m, &batch, 1e-6).unwrap();
            assert!(err < 1e-5, "fd error {err} (scale_on_kl={scale_on_kl})");
        }
    }

    #[test]
    fn finite_diff_check_rejects_bad_eps() {
        let s = spec(2, 0, 2);
        let m = ModelParams::zeros(s).unwrap();
        let batch = Batch::new(arr2(&[[1.0, 0.0]]), vec![0]).unwrap();
        assert!(finite_diff_check(&Loss::CrossEntropy, &m, &batch, 0.0).is_err());
        assert!(finite_diff_check(&Loss::CrossEntropy, &m, &batch, 0.1).is_err());
    }
}
