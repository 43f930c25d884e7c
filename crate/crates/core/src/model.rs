//! A small feed-forward stand-in for the model being fine-tuned.
//!
//! Layers are plain linear maps over column batches, with an elementwise
//! nonlinearity between layers (none after the last). Each layer may carry an
//! adapter slot; the forward pass always goes through the effective weight so
//! adapted and plain layers share one code path. Gradients are hand-derived
//! layer-local rules, verified against finite differences in the test suite.

use crate::adapter::{AdapterKind, AdapterSlot};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Elementwise nonlinearity applied between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Activation> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::format(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative as a function of the pre-activation input.
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn apply_matrix(&self, z: &Matrix) -> Matrix {
        let mut out = z.clone();
        for v in out.data_mut() {
            *v = self.apply(*v);
        }
        out
    }
}

/// One linear layer: a base weight and an optional adapter slot.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub adapter: Option<AdapterSlot>,
}

impl LinearLayer {
    pub fn new(weight: Matrix) -> Self {
        LinearLayer {
            weight,
            adapter: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Base weight plus the adapter contribution, as the forward pass sees it.
    pub fn effective_weight(&self) -> Result<Matrix> {
        match &self.adapter {
            None => Ok(self.weight.clone()),
            Some(slot) => {
                if slot.out_dim() != self.out_dim() || slot.in_dim() != self.in_dim() {
                    return Err(Error::shape(format!(
                        "adapter {}x{} on a {}x{} layer",
                        slot.out_dim(),
                        slot.in_dim(),
                        self.out_dim(),
                        self.in_dim()
                    )));
                }
                slot.effective_weight(&self.weight)
            }
        }
    }
}

/// Per-layer inputs and pre-activation outputs captured during a forward pass.
#[derive(Debug, Clone)]
pub struct FeatureTrace {
    /// One `in_dim x batch` matrix per layer.
    pub per_layer_inputs: Vec<Matrix>,
    /// One `out_dim x batch` matrix per layer, before the nonlinearity.
    pub per_layer_outputs: Vec<Matrix>,
}

/// Gradients of a scalar loss with respect to one layer's adapter factors.
#[derive(Debug, Clone)]
pub struct LayerAdapterGrad {
    pub d_a: Matrix,
    pub d_b: Matrix,
}

/// Adapter gradients for the whole model; `None` for layers without a slot.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub per_layer: Vec<Option<LayerAdapterGrad>>,
}

/// Feed-forward model over column batches.
#[derive(Debug, Clone)]
pub struct ToyModel {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

impl ToyModel {
    /// Builds a model, checking that consecutive layer dimensions chain.
    pub fn new(layers: Vec<LinearLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("model needs at least one layer"));
        }
        for i in 0..layers.len() - 1 {
            if layers[i].out_dim() != layers[i + 1].in_dim() {
                return Err(Error::shape(format!(
                    "layer {} outputs {}, layer {} expects {}",
                    i,
                    layers[i].out_dim(),
                    i + 1,
                    layers[i + 1].in_dim()
                )));
            }
        }
        Ok(ToyModel { layers, activation })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    /// Effective weight of every layer.
    pub fn effective_weights(&self) -> Result<Vec<Matrix>> {
        self.layers.iter().map(LinearLayer::effective_weight).collect()
    }

    /// Runs the model on a column batch. With `capture` set, also returns the
    /// trace of every layer's input and pre-activation output. The output is
    /// bit-identical either way.
    pub fn forward(&self, x: &Matrix, capture: bool) -> Result<(Matrix, Option<FeatureTrace>)> {
        if x.rows() != self.in_dim() {
            return Err(Error::shape(format!(
                "input is {}x{}, model expects {} rows",
                x.rows(),
                x.cols(),
                self.in_dim()
            )));
        }
        let mut trace = capture.then(|| FeatureTrace {
            per_layer_inputs: Vec::with_capacity(self.layers.len()),
            per_layer_outputs: Vec::with_capacity(self.layers.len()),
        });
        let mut current = x.clone();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let w_eff = layer.effective_weight()?;
            let z = w_eff.matmul(&current)?;
            if let Some(t) = trace.as_mut() {
                t.per_layer_inputs.push(current.clone());
                t.per_layer_outputs.push(z.clone());
            }
            current = if idx < last {
                self.activation.apply_matrix(&z)
            } else {
                z
            };
        }
        Ok((current, trace))
    }

    /// Backpropagates `upstream_grad` (the gradient of a scalar loss with
    /// respect to the model output) and returns, per layer, the gradient with
    /// respect to each layer's pre-activation output, along with the trace.
    pub fn layer_output_grads(
        &self,
        x: &Matrix,
        upstream_grad: &Matrix,
    ) -> Result<(FeatureTrace, Vec<Matrix>)> {
        let (output, trace) = self.forward(x, true)?;
        let trace = trace.expect("capture was requested");
        if upstream_grad.shape() != output.shape() {
            return Err(Error::shape(format!(
                "upstream gradient is {}x{}, output is {}x{}",
                upstream_grad.rows(),
                upstream_grad.cols(),
                output.rows(),
                output.cols()
            )));
        }

        let n = self.layers.len();
        let mut grads = vec![Matrix::zeros(0, 0); n];
        let mut g = upstream_grad.clone();
        for idx in (0..n).rev() {
            grads[idx] = g.clone();
            if idx > 0 {
                let w_eff = self.layers[idx].effective_weight()?;
                let g_input = w_eff.transpose().matmul(&g)?;
                // Chain through the nonlinearity that produced this layer's input.
                let z_prev = &trace.per_layer_outputs[idx - 1];
                let mut next = g_input;
                for (v, z) in next.data_mut().iter_mut().zip(z_prev.data()) {
                    *v *= self.activation.derivative(*z);
                }
                g = next;
            }
        }
        Ok((trace, grads))
    }

    /// Gradients of the scalar loss implied by `upstream_grad` with respect
    /// to every trainable adapter factor. Frozen pieces (`C`, `A0`, `B0`, the
    /// residual weight, and all base weights) receive no gradient.
    pub fn backward(&self, x: &Matrix, upstream_grad: &Matrix) -> Result<AdapterGrads> {
        if self.layers.iter().all(|l| l.adapter.is_none()) {
            return Err(Error::config("backward called on a model with no adapters"));
        }
        let (trace, layer_grads) = self.layer_output_grads(x, upstream_grad)?;
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let Some(slot) = &layer.adapter else {
                per_layer.push(None);
                continue;
            };
            let x_in = &trace.per_layer_inputs[idx];
            let g = &layer_grads[idx];
            let ax = slot.a.matmul(x_in)?;
            let (d_b, d_a) = match slot.kind {
                AdapterKind::Lora | AdapterKind::Pissa => {
                    let d_b = g.matmul(&ax.transpose())?;
                    let d_a = slot.b.transpose().matmul(g)?.matmul(&x_in.transpose())?;
                    (d_b, d_a)
                }
                AdapterKind::Salora => {
                    let c = slot
                        .c
                        .as_ref()
                        .ok_or_else(|| Error::config("salora slot is missing its projector"))?;
                    let ct_g = c.transpose().matmul(g)?;
                    let d_b = ct_g.matmul(&ax.transpose())?;
                    let d_a = slot.b.transpose().matmul(&ct_g)?.matmul(&x_in.transpose())?;
                    (d_b, d_a)
                }
            };
            per_layer.push(Some(LayerAdapterGrad { d_a, d_b }));
        }
        Ok(AdapterGrads { per_layer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_lora;
    use crate::rng;

    fn seeded(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
        let mut gen = rng::stream(seed, label);
        Matrix::gaussian(rows, cols, 1.0, &mut gen)
    }

    #[test]
    fn identity_layer_is_identity() {
        let model = ToyModel::new(
            vec![LinearLayer::new(Matrix::identity(3))],
            Activation::Identity,
        )
        .unwrap();
        let x = seeded(3, 4, 1, "x");
        let (y, _) = model.forward(&x, false).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn two_identity_activation_layers_compose() {
        let w1 = seeded(4, 3, 2, "w1");
        let w2 = seeded(2, 4, 2, "w2");
        let model = ToyModel::new(
            vec![LinearLayer::new(w1.clone()), LinearLayer::new(w2.clone())],
            Activation::Identity,
        )
        .unwrap();
        let x = seeded(3, 5, 2, "x");
        let (y, _) = model.forward(&x, false).unwrap();
        let expected = w2.matmul(&w1.matmul(&x).unwrap()).unwrap();
        assert!(y.max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn capture_does_not_change_output() {
        let model = ToyModel::new(
            vec![
                LinearLayer::new(seeded(4, 3, 3, "w1")),
                LinearLayer::new(seeded(3, 4, 3, "w2")),
            ],
            Activation::Tanh,
        )
        .unwrap();
        let x = seeded(3, 6, 3, "x");
        let (plain, none) = model.forward(&x, false).unwrap();
        let (captured, trace) = model.forward(&x, true).unwrap();
        assert!(none.is_none());
        assert!(plain.bit_eq(&captured));
        let trace = trace.unwrap();
        assert_eq!(trace.per_layer_inputs.len(), 2);
        assert_eq!(trace.per_layer_outputs.len(), 2);
    }

    #[test]
    fn mismatched_input_is_shape_error() {
        let model = ToyModel::new(
            vec![LinearLayer::new(Matrix::identity(3))],
            Activation::Identity,
        )
        .unwrap();
        assert!(matches!(
            model.forward(&Matrix::zeros(4, 2), false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mismatched_chain_is_rejected() {
        let err = ToyModel::new(
            vec![
                LinearLayer::new(Matrix::zeros(4, 3)),
                LinearLayer::new(Matrix::zeros(2, 5)),
            ],
            Activation::Identity,
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn backward_without_adapters_is_config_error() {
        let model = ToyModel::new(
            vec![LinearLayer::new(Matrix::identity(2))],
            Activation::Identity,
        )
        .unwrap();
        let x = Matrix::zeros(2, 1);
        let g = Matrix::zeros(2, 1);
        assert!(matches!(model.backward(&x, &g), Err(Error::Config(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_adapter_gradients() {
        let mut model = ToyModel::new(
            vec![LinearLayer::new(seeded(4, 4, 5, "w"))],
            Activation::Identity,
        )
        .unwrap();
        model.layers[0].adapter = Some(init_lora(4, 4, 2, 5).unwrap());
        let x = seeded(4, 3, 5, "x");
        let grads = model.backward(&x, &Matrix::zeros(4, 3)).unwrap();
        let g = grads.per_layer[0].as_ref().unwrap();
        assert_eq!(g.d_a.frobenius_norm(), 0.0);
        assert_eq!(g.d_b.frobenius_norm(), 0.0);
    }

    #[test]
    fn sum_loss_gradient_matches_hand_derivation() {
        // L = sum of outputs, so the upstream gradient is all ones and
        // grad_B must equal ones * (A x)^T.
        let mut model = ToyModel::new(
            vec![LinearLayer::new(seeded(3, 4, 6, "w"))],
            Activation::Identity,
        )
        .unwrap();
        let slot = init_lora(3, 4, 2, 6).unwrap();
        let a = slot.a.clone();
        model.layers[0].adapter = Some(slot);

        let x = seeded(4, 2, 6, "x");
        let ones = Matrix::from_vec(3, 2, vec![1.0; 6]).unwrap();
        let grads = model.backward(&x, &ones).unwrap();
        let g = grads.per_layer[0].as_ref().unwrap();

        let expected_db = ones.matmul(&a.matmul(&x).unwrap().transpose()).unwrap();
        assert!(g.d_b.max_abs_diff(&expected_db) < 1e-13);
    }

    #[test]
    fn frozen_parts_receive_no_gradient_slots() {
        use crate::adapter::{assemble_salora, SafetyContext, TaskContext};
        let w = seeded(5, 5, 7, "w");
        let safety = SafetyContext::new(seeded(5, 3, 7, "xh"), 2).unwrap();
        let task = TaskContext::new(seeded(5, 8, 7, "xt"), 2).unwrap();
        let slot = assemble_salora(&w, &safety, &task, 2).unwrap();
        let mut model =
            ToyModel::new(vec![LinearLayer::new(w)], Activation::Identity).unwrap();
        model.layers[0].adapter = Some(slot);

        let x = seeded(5, 4, 7, "x");
        let g_up = seeded(5, 4, 7, "g");
        let baseline = model.backward(&x, &g_up).unwrap();

        // Perturbing frozen pieces must not change which parameters receive
        // gradients or their shapes.
        let slot = model.layers[0].adapter.as_mut().unwrap();
        slot.a0.as_mut().unwrap().data_mut()[0] += 10.0;
        slot.b0.as_mut().unwrap().data_mut()[0] += 10.0;
        let perturbed = model.backward(&x, &g_up).unwrap();

        let b0 = baseline.per_layer[0].as_ref().unwrap();
        let p0 = perturbed.per_layer[0].as_ref().unwrap();
        assert_eq!(b0.d_a.shape(), p0.d_a.shape());
        assert_eq!(b0.d_b.shape(), p0.d_b.shape());
        // a0/b0 do not even feed the gradient values.
        assert!(b0.d_a.bit_eq(&p0.d_a));
        assert!(b0.d_b.bit_eq(&p0.d_b));
    }
}
