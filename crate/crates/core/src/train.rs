//! Fine-tuning: losses, AdamW, deterministic batching.
//!
//! The loop only ever touches the adapter factors `A` and `B`. Base weights,
//! projectors, frozen initial copies, and residual weights are digested
//! before and after training so callers can verify nothing else moved. All
//! shuffling comes from the config seed, so identical configs give
//! bit-identical adapters and loss curves.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::adapter::{
    assemble_salora, assemble_salora_lora_init, init_lora, init_pissa, SafetyContext, TaskContext,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::ToyModel;
use crate::rng;

/// Training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::format(format!("unknown loss `{other}`"))),
        }
    }
}

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Fine-tuning configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adamw: AdamWParams,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            batch_size: 16,
            epochs: 1,
            adamw: AdamWParams::default(),
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

impl TrainConfig {
    /// Rejects negative or degenerate settings. A zero learning rate is
    /// allowed: it turns training into a no-op, which is useful as a
    /// determinism check.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        let a = &self.adamw;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0) {
            return Err(Error::config("adamw betas must lie strictly in (0, 1)"));
        }
        if a.eps <= 0.0 || a.weight_decay < 0.0 {
            return Err(Error::config("adamw eps must be > 0 and weight decay >= 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates for a list of parameters, plus the
/// shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        OptimizerState {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

/// One AdamW update over a parameter list: decoupled weight decay first, then
/// the bias-corrected moment update. Deterministic given its inputs.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    state: &mut OptimizerState,
    learning_rate: f64,
    hp: &AdamWParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config(format!(
            "optimizer arity mismatch: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.step as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.step as i32);
    for (i, param) in params.iter_mut().enumerate() {
        let grad = grads[i];
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "param {} is {}x{}, grad is {}x{}",
                i,
                param.shape().0,
                param.shape().1,
                grad.shape().0,
                grad.shape().1
            )));
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let decay = 1.0 - learning_rate * hp.weight_decay;
        for (((p, &g), m_e), v_e) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *p *= decay;
            *m_e = hp.beta1 * *m_e + (1.0 - hp.beta1) * g;
            *v_e = hp.beta2 * *v_e + (1.0 - hp.beta2) * g * g;
            let m_hat = *m_e / bc1;
            let v_hat = *v_e / bc2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Loss value and its gradient with respect to the model output.
///
/// `mse` averages squared error over every output entry. `cross_entropy`
/// applies a column-wise softmax and averages the per-column cross-entropy
/// over the batch.
pub fn loss_and_output_grad(
    outputs: &Matrix,
    targets: &Matrix,
    kind: LossKind,
) -> Result<(f64, Matrix)> {
    if outputs.shape() != targets.shape() {
        return Err(Error::shape(format!(
            "outputs are {}x{}, targets are {}x{}",
            outputs.rows(),
            outputs.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    match kind {
        LossKind::Mse => {
            let count = (outputs.rows() * outputs.cols()) as f64;
            let diff = outputs.sub(targets)?;
            let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / count;
            let grad = diff.scale(2.0 / count);
            Ok((loss, grad))
        }
        LossKind::CrossEntropy => {
            let batch = outputs.cols() as f64;
            let mut grad = Matrix::zeros(outputs.rows(), outputs.cols());
            let mut loss = 0.0;
            for j in 0..outputs.cols() {
                let col = outputs.col(j);
                let shift = col.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = col.iter().map(|&y| (y - shift).exp()).collect();
                let z: f64 = exps.iter().sum();
                let log_z = z.ln();
                let target_mass: f64 = (0..outputs.rows()).map(|i| targets.get(i, j)).sum();
                for i in 0..outputs.rows() {
                    let t = targets.get(i, j);
                    let log_p = col[i] - shift - log_z;
                    loss -= t * log_p;
                    let p = exps[i] / z;
                    grad.set(i, j, (target_mass * p - t) / batch);
                }
            }
            Ok((loss / batch, grad))
        }
    }
}

/// Loss over a batch plus the adapter gradients produced by backpropagation.
pub fn loss_and_grad(
    model: &ToyModel,
    batch_inputs: &Matrix,
    batch_targets: &Matrix,
    kind: LossKind,
) -> Result<(f64, crate::model::AdapterGrads)> {
    let (outputs, _) = model.forward(batch_inputs, false)?;
    let (loss, grad) = loss_and_output_grad(&outputs, batch_targets, kind)?;
    let grads = model.backward(batch_inputs, &grad)?;
    Ok((loss, grads))
}

/// Fine-tuning method.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lora,
    Pissa,
    Salora,
    /// SaLoRA's projector with LoRA-style adapter initialization; the
    /// ablation arm for the task-specific initialization.
    SaloraNoTaskInit,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Pissa => "pissa",
            Method::Salora => "salora",
            Method::SaloraNoTaskInit => "salora_no_init",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "lora" => Ok(Method::Lora),
            "pissa" => Ok(Method::Pissa),
            "salora" => Ok(Method::Salora),
            "salora_no_init" => Ok(Method::SaloraNoTaskInit),
            other => Err(Error::format(format!("unknown method `{other}`"))),
        }
    }

    pub fn uses_projector(&self) -> bool {
        matches!(self, Method::Salora | Method::SaloraNoTaskInit)
    }
}

/// Adapter ranks: `r` for the trainable factors, `r_s` for the safety
/// subspace, `r_t` for task-region detection (normally equal to `r`).
#[derive(Debug, Clone, Copy)]
pub struct AdapterSpec {
    pub r: usize,
    pub r_s: usize,
    pub r_t: usize,
}

impl AdapterSpec {
    pub fn with_rank(r: usize) -> Self {
        AdapterSpec { r, r_s: r, r_t: r }
    }
}

/// Model-input feature sources for the safety and task contexts. SaLoRA
/// variants need `protected_inputs`; plain SaLoRA additionally needs
/// `task_inputs`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MethodContexts<'a> {
    pub protected_inputs: Option<&'a Matrix>,
    pub task_inputs: Option<&'a Matrix>,
}

/// Fine-tuning data: inputs and targets as column batches.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix) -> Result<Self> {
        if inputs.cols() != targets.cols() {
            return Err(Error::shape(format!(
                "{} input columns vs {} target columns",
                inputs.cols(),
                targets.cols()
            )));
        }
        if inputs.cols() == 0 {
            return Err(Error::validation("dataset is empty"));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

/// Norm of the adapter path inside the protected subspace, measured as
/// `|(I - C) C B A|_F` for one layer at one step. Zero up to rounding for a
/// correct projector.
#[derive(Debug, Clone, Copy)]
pub struct SafetyCheck {
    pub step: usize,
    pub layer: usize,
    pub projected_norm: f64,
}

/// Everything a fine-tuning run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub curve: Vec<LossPoint>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Projected-path norms sampled at the start, middle, and end of training
    /// (SaLoRA methods only).
    pub safety_checks: Vec<SafetyCheck>,
    pub frozen_digest_before: String,
    pub frozen_digest_after: String,
}

/// Runs the selected method end to end: attaches adapters to every layer,
/// trains only the `A`/`B` factors, and records the loss curve. Everything
/// else is frozen; compare the two digests to confirm.
pub fn fine_tune(
    model: &ToyModel,
    data: &Dataset,
    method: Method,
    spec: &AdapterSpec,
    config: &TrainConfig,
    contexts: &MethodContexts,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.inputs.rows() != model.in_dim() || data.targets.rows() != model.out_dim() {
        return Err(Error::shape(format!(
            "dataset {}x{} -> {}x{} does not fit model {} -> {}",
            data.inputs.rows(),
            data.inputs.cols(),
            data.targets.rows(),
            data.targets.cols(),
            model.in_dim(),
            model.out_dim()
        )));
    }

    let mut work = model.clone();
    attach_adapters(&mut work, method, spec, config.seed, contexts)?;

    let digest_before = frozen_digest(&work);
    let initial_loss = full_loss(&work, data, config.loss)?;

    let total_steps = config.epochs * data.len().div_ceil(config.batch_size);
    let mut checkpoints = vec![0usize];
    if total_steps > 1 {
        checkpoints.push(total_steps / 2);
    }
    checkpoints.push(total_steps);
    checkpoints.dedup();

    let mut safety_checks = Vec::new();
    if method.uses_projector() {
        record_safety_checks(&work, 0, &mut safety_checks)?;
    }

    let adapted: Vec<usize> = (0..work.layers.len()).collect();
    let shapes: Vec<(usize, usize)> = adapted
        .iter()
        .flat_map(|&i| {
            let slot = work.layers[i].adapter.as_ref().unwrap();
            [slot.a.shape(), slot.b.shape()]
        })
        .collect();
    let mut state = OptimizerState::new(&shapes);

    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let order = shuffled_indices(data.len(), config.seed, epoch);
        for batch in order.chunks(config.batch_size) {
            let bx = gather_columns(&data.inputs, batch);
            let bt = gather_columns(&data.targets, batch);
            let (loss, grads) = loss_and_grad(&work, &bx, &bt, config.loss)?;
            curve.push(LossPoint { step, epoch, loss });

            let mut grad_refs = Vec::with_capacity(shapes.len());
            for &i in &adapted {
                let g = grads.per_layer[i]
                    .as_ref()
                    .ok_or_else(|| Error::config("adapted layer produced no gradient"))?;
                grad_refs.push(g.d_a.clone());
                grad_refs.push(g.d_b.clone());
            }
            update_adapters(
                &mut work,
                &adapted,
                &grad_refs,
                &mut state,
                config.learning_rate,
                &config.adamw,
            )?;

            step += 1;
            if method.uses_projector() && checkpoints.contains(&step) {
                record_safety_checks(&work, step, &mut safety_checks)?;
            }
        }
    }

    let final_loss = full_loss(&work, data, config.loss)?;
    let digest_after = frozen_digest(&work);

    Ok(TrainOutcome {
        model: work,
        curve,
        initial_loss,
        final_loss,
        safety_checks,
        frozen_digest_before: digest_before,
        frozen_digest_after: digest_after,
    })
}

fn attach_adapters(
    model: &mut ToyModel,
    method: Method,
    spec: &AdapterSpec,
    seed: u64,
    contexts: &MethodContexts,
) -> Result<()> {
    let (trace_h, trace_t) = if method.uses_projector() {
        let protected = contexts.protected_inputs.ok_or_else(|| {
            Error::config("salora methods need protected inputs for the safety context")
        })?;
        let (_, trace_h) = model.forward(protected, true)?;
        let trace_t = if method == Method::Salora {
            let task = contexts
                .task_inputs
                .ok_or_else(|| Error::config("salora needs task inputs for its initialization"))?;
            let (_, trace_t) = model.forward(task, true)?;
            trace_t
        } else {
            None
        };
        (trace_h, trace_t)
    } else {
        (None, None)
    };

    for i in 0..model.layers.len() {
        let weight = model.layers[i].weight.clone();
        let layer_seed = rng::stream(seed, &format!("init/{i}")).gen::<u64>();
        match method {
            Method::Lora => {
                model.layers[i].adapter =
                    Some(init_lora(weight.rows(), weight.cols(), spec.r, layer_seed)?);
            }
            Method::Pissa => {
                let (slot, residual) = init_pissa(&weight, spec.r)?;
                model.layers[i].weight = residual;
                model.layers[i].adapter = Some(slot);
            }
            Method::Salora => {
                let x_h = trace_h.as_ref().unwrap().per_layer_inputs[i].clone();
                let x_t = trace_t.as_ref().unwrap().per_layer_inputs[i].clone();
                let safety = SafetyContext::new(x_h, spec.r_s)?;
                let task = TaskContext::new(x_t, spec.r_t)?;
                model.layers[i].adapter = Some(assemble_salora(&weight, &safety, &task, spec.r)?);
            }
            Method::SaloraNoTaskInit => {
                let x_h = trace_h.as_ref().unwrap().per_layer_inputs[i].clone();
                let safety = SafetyContext::new(x_h, spec.r_s)?;
                model.layers[i].adapter = Some(assemble_salora_lora_init(
                    &weight, &safety, spec.r, layer_seed,
                )?);
            }
        }
    }
    Ok(())
}

fn update_adapters(
    model: &mut ToyModel,
    adapted: &[usize],
    grads: &[Matrix],
    state: &mut OptimizerState,
    learning_rate: f64,
    hp: &AdamWParams,
) -> Result<()> {
    let mut params: Vec<&mut Matrix> = Vec::with_capacity(grads.len());
    for (i, layer) in model.layers.iter_mut().enumerate() {
        if !adapted.contains(&i) {
            continue;
        }
        let slot = layer
            .adapter
            .as_mut()
            .expect("adapted layer carries a slot");
        params.push(&mut slot.a);
        params.push(&mut slot.b);
    }
    let grad_refs: Vec<&Matrix> = grads.iter().collect();
    adamw_step(&mut params, &grad_refs, state, learning_rate, hp)
}

fn record_safety_checks(
    model: &ToyModel,
    step: usize,
    out: &mut Vec<SafetyCheck>,
) -> Result<()> {
    for (layer, l) in model.layers.iter().enumerate() {
        let Some(slot) = &l.adapter else { continue };
        let Some(c) = &slot.c else { continue };
        let path = c.matmul(&slot.b.matmul(&slot.a)?)?;
        // |U_C^T M| = |U_C U_C^T M| = |(I - C) M| for orthonormal U_C.
        let inside = Matrix::identity(c.rows()).sub(c)?.matmul(&path)?;
        out.push(SafetyCheck {
            step,
            layer,
            projected_norm: inside.frobenius_norm(),
        });
    }
    Ok(())
}

fn full_loss(model: &ToyModel, data: &Dataset, kind: LossKind) -> Result<f64> {
    let (outputs, _) = model.forward(&data.inputs, false)?;
    loss_and_output_grad(&outputs, &data.targets, kind).map(|(loss, _)| loss)
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut gen = rng::stream(seed, &format!("shuffle/{epoch}"));
    for i in (1..n).rev() {
        let j = gen.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn gather_columns(m: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), idx.len());
    for (jj, &j) in idx.iter().enumerate() {
        for i in 0..m.rows() {
            out.set(i, jj, m.get(i, j));
        }
    }
    out
}

/// SHA-256 over every frozen matrix in the model: base weights plus, per
/// adapter, the projector, frozen initial factors, and residual weight.
/// Trainable `a`/`b` are excluded on purpose.
pub fn frozen_digest(model: &ToyModel) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model.activation.name().as_bytes());
    for (i, layer) in model.layers.iter().enumerate() {
        hash_matrix(&mut hasher, &format!("weight/{i}"), &layer.weight);
        if let Some(slot) = &layer.adapter {
            hasher.update(slot.kind.name().as_bytes());
            if let Some(c) = &slot.c {
                hash_matrix(&mut hasher, &format!("c/{i}"), c);
            }
            if let Some(a0) = &slot.a0 {
                hash_matrix(&mut hasher, &format!("a0/{i}"), a0);
            }
            if let Some(b0) = &slot.b0 {
                hash_matrix(&mut hasher, &format!("b0/{i}"), b0);
            }
            if let Some(r) = &slot.residual_w {
                hash_matrix(&mut hasher, &format!("residual/{i}"), r);
            }
        }
    }
    hex_string(&hasher.finalize())
}

fn hash_matrix(hasher: &mut Sha256, label: &str, m: &Matrix) {
    hasher.update(label.as_bytes());
    hasher.update((m.rows() as u64).to_le_bytes());
    hasher.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        hasher.update(v.to_le_bytes());
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Formats a value with six significant digits, the precision used in
/// emitted CSV files.
pub fn fmt_sig6(x: f64) -> String {
    format!("{x:.5e}")
}

/// Writes the loss curve as `step,epoch,loss` rows with a header.
pub fn write_loss_csv<W: std::io::Write>(curve: &[LossPoint], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "step,epoch,loss")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.step, p.epoch, fmt_sig6(p.loss))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LinearLayer};
    use approx::assert_abs_diff_eq;

    fn seeded(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
        let mut gen = rng::stream(seed, label);
        Matrix::gaussian(rows, cols, 1.0, &mut gen)
    }

    fn tiny_model(seed: u64) -> ToyModel {
        ToyModel::new(
            vec![
                LinearLayer::new(seeded(6, 6, seed, "w0").scale(0.4)),
                LinearLayer::new(seeded(6, 6, seed, "w1").scale(0.4)),
            ],
            Activation::Tanh,
        )
        .unwrap()
    }

    fn tiny_dataset(model: &ToyModel, seed: u64, n: usize) -> Dataset {
        let inputs = seeded(model.in_dim(), n, seed, "data/x");
        // Teacher with perturbed weights gives the loop something to learn.
        let mut teacher = model.clone();
        for (i, layer) in teacher.layers.iter_mut().enumerate() {
            let bump = seeded(layer.weight.rows(), layer.weight.cols(), seed, &format!("bump{i}"))
                .scale(0.15);
            layer.weight = layer.weight.add(&bump).unwrap();
        }
        let (targets, _) = teacher.forward(&inputs, false).unwrap();
        Dataset::new(inputs, targets).unwrap()
    }

    #[test]
    fn mse_zero_when_targets_match() {
        let y = seeded(3, 4, 1, "y");
        let (loss, grad) = loss_and_output_grad(&y, &y, LossKind::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.frobenius_norm(), 0.0);
    }

    #[test]
    fn mse_hand_computed_case() {
        // outputs [[1],[2]], targets [[0],[0]]: loss = (1 + 4) / 2.
        let y = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let t = Matrix::zeros(2, 1);
        let (loss, grad) = loss_and_output_grad(&y, &t, LossKind::Mse).unwrap();
        assert_abs_diff_eq!(loss, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(grad.get(0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(grad.get(1, 0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_targets() {
        let y = Matrix::zeros(3, 2);
        let t = Matrix::from_vec(3, 2, vec![1.0 / 3.0; 6]).unwrap();
        let (loss, grad) = loss_and_output_grad(&y, &t, LossKind::CrossEntropy).unwrap();
        assert_abs_diff_eq!(loss, 3.0_f64.ln(), epsilon = 1e-12);
        // Softmax equals the target, so the gradient vanishes.
        assert!(grad.frobenius_norm() < 1e-15);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut p = seeded(3, 3, 4, "p");
        let before = p.clone();
        let g = Matrix::zeros(3, 3);
        let mut state = OptimizerState::new(&[(3, 3)]);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        adamw_step(&mut [&mut p], &[&g], &mut state, 0.1, &hp).unwrap();
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn adamw_first_step_matches_scalar_hand_computation() {
        let mut p = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let mut state = OptimizerState::new(&[(1, 1)]);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        let lr = 0.1;
        adamw_step(&mut [&mut p], &[&g], &mut state, lr, &hp).unwrap();
        // After one step: m_hat = g, v_hat = g^2, so the update is
        // -lr * g / (|g| + eps).
        let expected = -lr * 2.0 / (2.0 + hp.eps);
        assert_abs_diff_eq!(p.get(0, 0), expected, epsilon = 1e-12);
    }

    #[test]
    fn adamw_converges_on_quadratic() {
        // min (x - 3)^2 from x = 0.
        let mut x = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let mut state = OptimizerState::new(&[(1, 1)]);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        };
        for _ in 0..100 {
            let g = Matrix::from_vec(1, 1, vec![2.0 * (x.get(0, 0) - 3.0)]).unwrap();
            adamw_step(&mut [&mut x], &[&g], &mut state, 0.05, &hp).unwrap();
        }
        assert!((x.get(0, 0) - 3.0).abs() < 0.1, "x = {}", x.get(0, 0));
    }

    #[test]
    fn zero_learning_rate_leaves_adapters_bit_identical() {
        let model = tiny_model(10);
        let data = tiny_dataset(&model, 10, 24);
        let config = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            seed: 10,
            ..TrainConfig::default()
        };
        let spec = AdapterSpec::with_rank(2);
        let out = fine_tune(&model, &data, Method::Lora, &spec, &config, &MethodContexts::default())
            .unwrap();

        let mut expected = model.clone();
        attach_adapters(&mut expected, Method::Lora, &spec, 10, &MethodContexts::default())
            .unwrap();
        for (trained, init) in out.model.layers.iter().zip(&expected.layers) {
            let slot = trained.adapter.as_ref().unwrap();
            let fresh = init.adapter.as_ref().unwrap();
            assert!(slot.a.bit_eq(&fresh.a));
            assert!(slot.b.bit_eq(&fresh.b));
        }
    }

    #[test]
    fn fine_tune_reduces_loss_and_freezes_everything_else() {
        let model = tiny_model(11);
        let data = tiny_dataset(&model, 11, 48);
        let mut config = TrainConfig {
            learning_rate: 5e-3,
            epochs: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        config.adamw.weight_decay = 0.0;
        let spec = AdapterSpec::with_rank(2);
        let contexts_owned = seeded(6, 10, 11, "protected");
        let contexts = MethodContexts {
            protected_inputs: Some(&contexts_owned),
            task_inputs: Some(&data.inputs),
        };
        for method in [Method::Lora, Method::Pissa, Method::Salora, Method::SaloraNoTaskInit] {
            let out = fine_tune(&model, &data, method, &spec, &config, &contexts).unwrap();
            assert!(
                out.final_loss < out.initial_loss,
                "{}: {} !< {}",
                method.name(),
                out.final_loss,
                out.initial_loss
            );
            assert_eq!(out.frozen_digest_before, out.frozen_digest_after);
            if method.uses_projector() {
                assert!(!out.safety_checks.is_empty());
                for check in &out.safety_checks {
                    assert!(check.projected_norm < 1e-8, "leak at {:?}", check);
                }
            }
        }
    }

    #[test]
    fn fine_tune_is_deterministic() {
        let model = tiny_model(12);
        let data = tiny_dataset(&model, 12, 32);
        let config = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            seed: 12,
            ..TrainConfig::default()
        };
        let spec = AdapterSpec::with_rank(2);
        let run = |_| {
            fine_tune(&model, &data, Method::Lora, &spec, &config, &MethodContexts::default())
                .unwrap()
        };
        let a = run(());
        let b = run(());
        for (la, lb) in a.model.layers.iter().zip(&b.model.layers) {
            let sa = la.adapter.as_ref().unwrap();
            let sb = lb.adapter.as_ref().unwrap();
            assert!(sa.a.bit_eq(&sb.a));
            assert!(sa.b.bit_eq(&sb.b));
        }
        assert_eq!(a.curve.len(), b.curve.len());
        for (pa, pb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(pa.loss.to_bits(), pb.loss.to_bits());
        }
    }

    #[test]
    fn salora_without_contexts_is_config_error() {
        let model = tiny_model(13);
        let data = tiny_dataset(&model, 13, 16);
        let config = TrainConfig::default();
        let spec = AdapterSpec::with_rank(2);
        let err = fine_tune(
            &model,
            &data,
            Method::Salora,
            &spec,
            &config,
            &MethodContexts::default(),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn loss_csv_format() {
        let curve = vec![
            LossPoint { step: 0, epoch: 0, loss: 0.123456789 },
            LossPoint { step: 1, epoch: 0, loss: 42.0 },
        ];
        let mut buf = Vec::new();
        write_loss_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,epoch,loss\n0,0,1.23457e-1\n1,0,4.20000e1\n");
    }
}
