//! Forward and backward passes checked against a scalar reference
//! implementation and central finite differences.

use rand::Rng;

use salora_core::adapter::{assemble_salora, init_lora, init_pissa, SafetyContext, TaskContext};
use salora_core::matrix::Matrix;
use salora_core::model::{Activation, LinearLayer, ToyModel};
use salora_core::oracles;
use salora_core::rng;
use salora_core::train::{loss_and_grad, LossKind};

fn seeded(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
    let mut gen = rng::stream(seed, label);
    Matrix::gaussian(rows, cols, 1.0, &mut gen)
}

fn three_layer_tanh(seed: u64) -> ToyModel {
    ToyModel::new(
        vec![
            LinearLayer::new(seeded(5, 4, seed, "w0").scale(0.5)),
            LinearLayer::new(seeded(6, 5, seed, "w1").scale(0.5)),
            LinearLayer::new(seeded(3, 6, seed, "w2").scale(0.5)),
        ],
        Activation::Tanh,
    )
    .unwrap()
}

#[test]
fn forward_matches_scalar_reference() {
    let model = three_layer_tanh(50);
    let x = seeded(4, 7, 50, "x");
    let (fast, _) = model.forward(&x, false).unwrap();
    let weights = model.effective_weights().unwrap();
    let slow = oracles::scalar_reference_forward(&weights, Activation::Tanh, &x);
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

#[test]
fn forward_matches_scalar_reference_with_adapters() {
    let mut model = three_layer_tanh(51);
    model.layers[0].adapter = Some(init_lora(5, 4, 2, 51).unwrap());
    let (slot, residual) = init_pissa(&model.layers[1].weight, 2).unwrap();
    model.layers[1].weight = residual;
    model.layers[1].adapter = Some(slot);

    let x = seeded(4, 6, 51, "x");
    let (fast, _) = model.forward(&x, false).unwrap();
    let weights = model.effective_weights().unwrap();
    let slow = oracles::scalar_reference_forward(&weights, Activation::Tanh, &x);
    assert!(fast.max_abs_diff(&slow) < 1e-12);
}

fn attach_kind(model: &mut ToyModel, kind: &str, seed: u64) {
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let (out_dim, in_dim) = layer.weight.shape();
        let r = 2.min(out_dim).min(in_dim);
        match kind {
            "lora" => {
                layer.adapter = Some(init_lora(out_dim, in_dim, r, seed + i as u64).unwrap());
            }
            "pissa" => {
                let (slot, residual) = init_pissa(&layer.weight, r).unwrap();
                layer.weight = residual;
                layer.adapter = Some(slot);
            }
            "salora" => {
                let mut gen = rng::stream(seed + i as u64, "ctx");
                let x_h = Matrix::gaussian(in_dim, 4, 1.0, &mut gen);
                let x_t = Matrix::gaussian(in_dim, 8, 1.0, &mut gen);
                let safety = SafetyContext::new(x_h, 2).unwrap();
                let task = TaskContext::new(x_t, r).unwrap();
                let mut slot = assemble_salora(&layer.weight, &safety, &task, r).unwrap();
                // Move the trainable factors off the initialization point so
                // the gradient is generic, as after a few optimizer steps.
                for v in slot.a.data_mut() {
                    *v += 0.01 * gen.gen::<f64>();
                }
                for v in slot.b.data_mut() {
                    *v += 0.01 * gen.gen::<f64>();
                }
                layer.adapter = Some(slot);
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn adapter_gradients_match_finite_differences() {
    // The full 20-seed audit runs in the acceptance suite; this covers each
    // adapter kind and both losses on a handful of seeds.
    for seed in 0..4u64 {
        for kind in ["lora", "pissa", "salora"] {
            for loss in [LossKind::Mse, LossKind::CrossEntropy] {
                let mut model = three_layer_tanh(60 + seed);
                attach_kind(&mut model, kind, 60 + seed);
                let x = seeded(4, 5, 60 + seed, "x");
                let targets = match loss {
                    LossKind::Mse => seeded(3, 5, 60 + seed, "t"),
                    LossKind::CrossEntropy => {
                        // One-hot columns.
                        let mut t = Matrix::zeros(3, 5);
                        let mut gen = rng::stream(60 + seed, "labels");
                        for j in 0..5 {
                            t.set(gen.gen_range(0..3), j, 1.0);
                        }
                        t
                    }
                };

                let (_, analytic) = loss_and_grad(&model, &x, &targets, loss).unwrap();
                let fd = oracles::fd_adapter_gradients(&model, &x, &targets, loss, 1e-5).unwrap();

                for (layer, (got, reference)) in
                    analytic.per_layer.iter().zip(&fd).enumerate()
                {
                    let got = got.as_ref().unwrap();
                    let (fd_a, fd_b) = reference.as_ref().unwrap();
                    let err_a = oracles::max_gradient_rel_error(&got.d_a, fd_a);
                    let err_b = oracles::max_gradient_rel_error(&got.d_b, fd_b);
                    assert!(
                        err_a < 1e-5 && err_b < 1e-5,
                        "{kind}/{:?} seed {seed} layer {layer}: rel err a={err_a:.2e} b={err_b:.2e}",
                        loss
                    );
                }
            }
        }
    }
}

#[test]
fn perturbing_frozen_pieces_leaves_gradient_structure_alone() {
    let mut model = three_layer_tanh(70);
    attach_kind(&mut model, "salora", 70);
    let x = seeded(4, 5, 70, "x");
    let targets = seeded(3, 5, 70, "t");
    let (_, baseline) = loss_and_grad(&model, &x, &targets, LossKind::Mse).unwrap();

    // Shift every frozen matrix; the set of parameters receiving gradients
    // and their shapes must not change.
    for layer in model.layers.iter_mut() {
        let slot = layer.adapter.as_mut().unwrap();
        slot.a0.as_mut().unwrap().data_mut()[0] += 5.0;
        slot.b0.as_mut().unwrap().data_mut()[0] += 5.0;
        slot.residual_w.as_mut().unwrap().data_mut()[0] += 5.0;
        slot.c.as_mut().unwrap().data_mut()[0] += 5.0;
    }
    let (_, perturbed) = loss_and_grad(&model, &x, &targets, LossKind::Mse).unwrap();

    assert_eq!(baseline.per_layer.len(), perturbed.per_layer.len());
    for (b, p) in baseline.per_layer.iter().zip(&perturbed.per_layer) {
        let b = b.as_ref().unwrap();
        let p = p.as_ref().unwrap();
        assert_eq!(b.d_a.shape(), p.d_a.shape());
        assert_eq!(b.d_b.shape(), p.d_b.shape());
    }
}
