//! Linear probing, drift reports, and the gradient-overlap bound checker.
//!
//! The probe is a logistic classifier on frozen layer features: train it on
//! the pre-trained model's features, then ask how well it still reads the
//! fine-tuned model's features for the same inputs. The drift report pairs
//! that accuracy change with direct output and planted-subspace perturbation
//! measurements. The bound checker evaluates, per layer, the inequality
//! `|W_S grad^T|_F >= gamma * sigma_min(grad_Y)` relating benign-task
//! gradients to the planted safety region.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ToyModel;
use crate::svd::svd;
use crate::train::fmt_sig6;
use crate::world::SyntheticWorld;

/// Default probe training schedule.
pub const PROBE_ITERS: usize = 500;
pub const PROBE_LR: f64 = 0.1;
/// L2 penalty on probe weights.
const PROBE_L2: f64 = 1e-4;
/// Below this, the smallest singular value of the output gradient counts as
/// zero and the bound is vacuous.
const SIGMA_FLOOR: f64 = 1e-12;

/// Per-layer feature vectors with protected/benign labels.
///
/// Each column of `features` is the layer output for one input sample
/// (averaged over that sample's batch axis, which is a single column here);
/// `labels[j]` is true for protected-scenario samples.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    pub features: Matrix,
    pub labels: Vec<bool>,
}

impl ProbeDataset {
    pub fn new(features: Matrix, labels: Vec<bool>) -> Result<Self> {
        if features.cols() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature columns vs {} labels",
                features.cols(),
                labels.len()
            )));
        }
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            return Err(Error::validation("probe data needs both classes"));
        }
        Ok(ProbeDataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Logistic probe: `P(protected | x) = sigmoid(w x + b)`.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `1 x d`.
    pub weight: Matrix,
    pub bias: f64,
}

impl LinearProbe {
    fn logit(&self, features: &Matrix, col: usize) -> f64 {
        let mut z = self.bias;
        for i in 0..features.rows() {
            z += self.weight.get(0, i) * features.get(i, col);
        }
        z
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trains a logistic probe by full-batch gradient descent from zero init,
/// with an L2 penalty on the weights. Deterministic: same data, same probe.
pub fn train_probe(data: &ProbeDataset, iters: usize, lr: f64) -> Result<LinearProbe> {
    if !data.labels.iter().any(|&l| l) || data.labels.iter().all(|&l| l) {
        return Err(Error::validation("probe training needs both classes"));
    }
    let d = data.features.rows();
    let n = data.len() as f64;
    let mut probe = LinearProbe {
        weight: Matrix::zeros(1, d),
        bias: 0.0,
    };
    for _ in 0..iters {
        let mut grad_w = vec![0.0; d];
        let mut grad_b = 0.0;
        for j in 0..data.len() {
            let p = sigmoid(probe.logit(&data.features, j));
            let err = p - if data.labels[j] { 1.0 } else { 0.0 };
            grad_b += err;
            for (i, g) in grad_w.iter_mut().enumerate() {
                *g += err * data.features.get(i, j);
            }
        }
        for (i, g) in grad_w.iter().enumerate() {
            let step = g / n + PROBE_L2 * probe.weight.get(0, i);
            probe.weight.set(0, i, probe.weight.get(0, i) - lr * step);
        }
        probe.bias -= lr * grad_b / n;
    }
    Ok(probe)
}

/// Fraction of samples whose thresholded prediction matches the label.
/// `sigmoid(z) >= 0.5` predicts the protected class, so ties go to class 1.
pub fn probe_accuracy(probe: &LinearProbe, data: &ProbeDataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = (0..data.len())
        .filter(|&j| (probe.logit(&data.features, j) >= 0.0) == data.labels[j])
        .count();
    hits as f64 / data.len() as f64
}

/// Per-layer pre-activation features for each input column.
pub fn layer_features(model: &ToyModel, inputs: &Matrix) -> Result<Vec<Matrix>> {
    let (_, trace) = model.forward(inputs, true)?;
    Ok(trace.expect("capture requested").per_layer_outputs)
}

/// One drift-report row.
#[derive(Debug, Clone, Copy)]
pub struct DriftRow {
    pub layer: usize,
    /// Probe accuracy on the reference model's features (the probe's own
    /// training data).
    pub acc_before: f64,
    /// Same probe scored on the fine-tuned model's features.
    pub acc_after: f64,
    /// `|Y_after - Y_before|_F / |Y_before|_F` on protected inputs.
    pub output_drift: f64,
    /// `|V^T (W_eff_after - W_eff_before)|_F` against the planted basis.
    pub subspace_perturbation: f64,
}

/// Trains one probe per layer on `model_before`'s features for the world's
/// protected inputs versus an equal-sized benign slice, then measures how the
/// fine-tuned model moved: probe accuracy, protected-output drift, and the
/// planted-subspace component of the weight change.
pub fn drift_report(
    world: &SyntheticWorld,
    model_before: &ToyModel,
    model_after: &ToyModel,
) -> Result<Vec<DriftRow>> {
    check_same_architecture(model_before, model_after)?;

    let n = world
        .protected_inputs
        .cols()
        .min(world.benign.inputs.cols());
    let protected = world.protected_inputs.columns(0, n);
    let benign = world.benign.inputs.columns(0, n);
    let labels: Vec<bool> = (0..2 * n).map(|j| j < n).collect();

    let feats_protected_before = layer_features(model_before, &protected)?;
    let feats_benign_before = layer_features(model_before, &benign)?;
    let feats_protected_after = layer_features(model_after, &protected)?;
    let feats_benign_after = layer_features(model_after, &benign)?;

    let weights_before = model_before.effective_weights()?;
    let weights_after = model_after.effective_weights()?;

    let mut rows = Vec::with_capacity(model_before.layers.len());
    for l in 0..model_before.layers.len() {
        let before =
            ProbeDataset::new(hcat(&feats_protected_before[l], &feats_benign_before[l])?, labels.clone())?;
        let after =
            ProbeDataset::new(hcat(&feats_protected_after[l], &feats_benign_after[l])?, labels.clone())?;
        let probe = train_probe(&before, PROBE_ITERS, PROBE_LR)?;
        let acc_before = probe_accuracy(&probe, &before);
        let acc_after = probe_accuracy(&probe, &after);

        let y_before = &feats_protected_before[l];
        let y_after = &feats_protected_after[l];
        let denom = y_before.frobenius_norm();
        let diff = y_after.sub(y_before)?.frobenius_norm();
        let output_drift = if diff == 0.0 { 0.0 } else { diff / denom };

        let delta_w = weights_after[l].sub(&weights_before[l])?;
        let subspace_perturbation = world.planted[l]
            .basis
            .transpose()
            .matmul(&delta_w)?
            .frobenius_norm();

        rows.push(DriftRow {
            layer: l,
            acc_before,
            acc_after,
            output_drift,
            subspace_perturbation,
        });
    }
    Ok(rows)
}

fn check_same_architecture(a: &ToyModel, b: &ToyModel) -> Result<()> {
    let same = a.layers.len() == b.layers.len()
        && a.activation == b.activation
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.weight.shape() == y.weight.shape());
    if !same {
        return Err(Error::config("models do not share an architecture"));
    }
    Ok(())
}

/// Columns of `a` followed by columns of `b`.
fn hcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::shape(format!(
            "hcat: {} rows vs {} rows",
            a.rows(),
            b.rows()
        )));
    }
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(i, j, a.get(i, j));
        }
        for j in 0..b.cols() {
            out.set(i, a.cols() + j, b.get(i, j));
        }
    }
    Ok(out)
}

/// One bound-check row for a layer.
#[derive(Debug, Clone, Copy)]
pub struct Prop1Row {
    pub layer: usize,
    /// `|W_S grad_dW^T|_F`.
    pub lhs: f64,
    /// `gamma * sigma_min(grad_Y)`.
    pub rhs: f64,
    pub sigma_min: f64,
    /// `|W_S X|_F` for the supplied benign batch.
    pub activation: f64,
    pub gamma: f64,
    /// True when the preconditions fail and the bound says nothing: a zero
    /// smallest singular value, activation at or below gamma, or more batch
    /// columns than output rows (where the gradient's Gram spectrum bottoms
    /// out at zero).
    pub vacuous: bool,
    pub pass: bool,
}

/// Evaluates the gradient-overlap bound per layer for one benign batch.
///
/// The adapter-update gradient at a layer is `grad_dW = grad_Y X^T` by the
/// chain rule; the check computes `|W_S grad_dW^T|_F` and compares it with
/// `gamma * sigma_min(grad_Y)`, using the world's recorded gamma. Strict
/// inequality is tested as `>=` with a `1e-12` slack; vacuous rows pass by
/// definition but are flagged so callers can count them separately.
pub fn proposition1_check(
    world: &SyntheticWorld,
    model: &ToyModel,
    batch_inputs: &Matrix,
    loss_grad_at_output: &Matrix,
) -> Result<Vec<Prop1Row>> {
    if model.layers.len() != world.planted.len() {
        return Err(Error::config(format!(
            "model has {} layers, world records {} planted components",
            model.layers.len(),
            world.planted.len()
        )));
    }
    let (trace, layer_grads) = model.layer_output_grads(batch_inputs, loss_grad_at_output)?;

    let mut rows = Vec::with_capacity(model.layers.len());
    for (l, planted) in world.planted.iter().enumerate() {
        let x = &trace.per_layer_inputs[l];
        let g = &layer_grads[l];
        let grad_dw = g.matmul(&x.transpose())?;
        let lhs = planted.w_s.matmul(&grad_dw.transpose())?.frobenius_norm();
        let activation = planted.w_s.matmul(x)?.frobenius_norm();

        let spectrum = svd(g)?.s;
        let sigma_max = spectrum[0];
        let sigma_min = *spectrum.last().unwrap();
        let rhs = planted.gamma * sigma_min;

        let vacuous = sigma_min <= SIGMA_FLOOR
            || sigma_min <= SIGMA_FLOOR * sigma_max
            || activation <= planted.gamma
            || x.cols() > g.rows();
        let pass = vacuous || lhs >= rhs - 1e-12;
        rows.push(Prop1Row {
            layer: l,
            lhs,
            rhs,
            sigma_min,
            activation,
            gamma: planted.gamma,
            vacuous,
            pass,
        });
    }
    Ok(rows)
}

/// Writes drift rows as `layer,acc_before,acc_after,output_drift,subspace_perturbation`.
pub fn write_drift_csv<W: std::io::Write>(rows: &[DriftRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "layer,acc_before,acc_after,output_drift,subspace_perturbation")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.layer,
            fmt_sig6(r.acc_before),
            fmt_sig6(r.acc_after),
            fmt_sig6(r.output_drift),
            fmt_sig6(r.subspace_perturbation)
        )?;
    }
    Ok(())
}

/// Writes bound-check rows as `instance,lhs,rhs,vacuous,pass`.
pub fn write_prop1_csv<W: std::io::Write>(rows: &[Prop1Row], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "instance,lhs,rhs,vacuous,pass")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.layer,
            fmt_sig6(r.lhs),
            fmt_sig6(r.rhs),
            r.vacuous,
            r.pass
        )?;
    }
    Ok(())
}
