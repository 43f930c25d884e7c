//! Pipeline commands: world generation, fine-tuning, inference assembly,
//! analysis, and a self-test battery.
//!
//! Commands read and write only through the checkpoint layouts in
//! `salora_core::checkpoint`; given the same config and seed they reproduce
//! their output trees byte for byte, and they never modify their inputs.

use std::fs;
use std::path::{Path, PathBuf};

use salora_core::adapter::{assemble_for_inference, merge_for_saving, AdapterKind, AdapterRecord};
use salora_core::checkpoint::{
    load_adapter_checkpoint, load_model, load_world, save_adapter_checkpoint, save_model,
    save_world, AdapterMeta,
};
use salora_core::error::{Error, Result};
use salora_core::matrix::Matrix;
use salora_core::model::{Activation, LinearLayer, ToyModel};
use salora_core::oracles;
use salora_core::probe::{
    drift_report, proposition1_check, write_drift_csv, write_prop1_csv, DriftRow, Prop1Row,
};
use salora_core::rng;
use salora_core::train::{
    fine_tune, fmt_sig6, loss_and_grad, loss_and_output_grad, write_loss_csv, AdapterSpec,
    LossKind, Method, MethodContexts,
};
use salora_core::svd;
use salora_core::world::build_world;

use crate::config::ExperimentConfig;

pub struct GenWorldSummary {
    pub world_dir: PathBuf,
    pub gamma: f64,
}

/// Builds the synthetic world from the config and writes it out.
pub fn cmd_gen_world(cfg: &ExperimentConfig) -> Result<GenWorldSummary> {
    let world = build_world(&cfg.world)?;
    save_world(&cfg.paths.world_dir, &world)?;
    Ok(GenWorldSummary {
        world_dir: cfg.paths.world_dir.clone(),
        gamma: world.gamma,
    })
}

pub struct FinetuneSummary {
    pub method: Method,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub adapter_dir: PathBuf,
    pub loss_csv: PathBuf,
    pub snapshot_dir: PathBuf,
}

/// Runs the selected method end to end on the stored world: adapter setup
/// (projector and initialization for SaLoRA), training, and saving. Writes
/// the adapter checkpoint, the loss curve, and a snapshot of the effective
/// training-time weights.
pub fn cmd_finetune(cfg: &ExperimentConfig) -> Result<FinetuneSummary> {
    let world = load_world(&cfg.paths.world_dir)?;
    let spec = AdapterSpec {
        r: cfg.r,
        r_s: cfg.r_s,
        r_t: cfg.r_t,
    };
    let contexts = MethodContexts {
        protected_inputs: Some(&world.protected_inputs),
        task_inputs: Some(&world.benign.inputs),
    };
    let outcome = fine_tune(
        &world.model,
        &world.benign,
        cfg.method,
        &spec,
        &cfg.train,
        &contexts,
    )?;

    let run_dir = &cfg.paths.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;

    // Adapter checkpoint.
    let records = adapter_records(&outcome.model)?;
    let kind = method_kind(cfg.method);
    let meta = AdapterMeta {
        kind,
        r: cfg.r,
        r_s: if cfg.method.uses_projector() { cfg.r_s } else { 0 },
    };
    let adapter_dir = run_dir.join("adapter");
    save_adapter_checkpoint(&adapter_dir, &records, &meta)?;

    // Loss curve.
    let loss_csv = run_dir.join("loss.csv");
    let mut buf = Vec::new();
    write_loss_csv(&outcome.curve, &mut buf)
        .map_err(|e| Error::io(loss_csv.display().to_string(), e))?;
    fs::write(&loss_csv, buf).map_err(|e| Error::io(loss_csv.display().to_string(), e))?;

    // Snapshot of the training-time effective weights, for comparing the
    // inference assembly against retained training state.
    let snapshot_dir = run_dir.join("snapshot");
    let weights = outcome.model.effective_weights()?;
    let snapshot = ToyModel::new(
        weights.into_iter().map(LinearLayer::new).collect(),
        outcome.model.activation,
    )?;
    save_model(&snapshot_dir, &snapshot)?;

    Ok(FinetuneSummary {
        method: cfg.method,
        initial_loss: outcome.initial_loss,
        final_loss: outcome.final_loss,
        steps: outcome.curve.len(),
        adapter_dir,
        loss_csv,
        snapshot_dir,
    })
}

fn method_kind(method: Method) -> AdapterKind {
    match method {
        Method::Lora => AdapterKind::Lora,
        Method::Pissa => AdapterKind::Pissa,
        Method::Salora | Method::SaloraNoTaskInit => AdapterKind::Salora,
    }
}

/// Extracts one saved record per layer from a trained model.
fn adapter_records(model: &ToyModel) -> Result<Vec<AdapterRecord>> {
    let mut records = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let slot = layer
            .adapter
            .as_ref()
            .ok_or_else(|| Error::config("trained model has a layer without an adapter"))?;
        let record = match slot.kind {
            AdapterKind::Lora => AdapterRecord::Lora {
                b: slot.b.clone(),
                a: slot.a.clone(),
            },
            // The layer weight holds the PiSSA residual after attachment.
            AdapterKind::Pissa => AdapterRecord::Pissa {
                b: slot.b.clone(),
                a: slot.a.clone(),
                residual: layer.weight.clone(),
            },
            AdapterKind::Salora => merge_for_saving(slot)?,
        };
        records.push(record);
    }
    Ok(records)
}

/// Rebuilds the effective model from a pre-trained model checkpoint and an
/// adapter checkpoint.
pub fn assemble_model(model_dir: &Path, adapter_dir: &Path) -> Result<ToyModel> {
    let base = load_model(model_dir)?;
    let (records, _) = load_adapter_checkpoint(adapter_dir)?;
    if records.len() != base.layers.len() {
        return Err(Error::shape(format!(
            "adapter checkpoint covers {} layers, model has {}",
            records.len(),
            base.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(base.layers.len());
    for (layer, record) in base.layers.iter().zip(&records) {
        layers.push(LinearLayer::new(assemble_for_inference(&layer.weight, record)?));
    }
    ToyModel::new(layers, base.activation)
}

pub struct InferSummary {
    pub outputs: PathBuf,
    pub batch: usize,
}

/// Assembles the effective weights from the saved adapter and runs the
/// forward pass over the configured input batch.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<InferSummary> {
    let model = assemble_model(&cfg.paths.world_dir.join("model"), &cfg.paths.run_dir.join("adapter"))?;
    let inputs = Matrix::load_mtx(&cfg.paths.inputs)?;
    let (outputs, _) = model.forward(&inputs, false)?;
    if let Some(parent) = cfg.paths.outputs.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    outputs.save_mtx(&cfg.paths.outputs)?;
    Ok(InferSummary {
        outputs: cfg.paths.outputs.clone(),
        batch: inputs.cols(),
    })
}

pub struct AnalyzeSummary {
    pub drift: Vec<DriftRow>,
    pub prop1: Vec<Prop1Row>,
    pub mean_acc_drop: f64,
    pub drift_csv: PathBuf,
    pub prop1_csv: PathBuf,
}

impl AnalyzeSummary {
    /// Human-readable table printed by the CLI.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("layer  acc_before  acc_after  output_drift  subspace_perturbation\n");
        for r in &self.drift {
            s.push_str(&format!(
                "{:<5}  {:<10}  {:<9}  {:<12}  {}\n",
                r.layer,
                fmt_sig6(r.acc_before),
                fmt_sig6(r.acc_after),
                fmt_sig6(r.output_drift),
                fmt_sig6(r.subspace_perturbation)
            ));
        }
        s.push_str(&format!("mean probe-accuracy drop: {}\n", fmt_sig6(self.mean_acc_drop)));
        let vacuous = self.prop1.iter().filter(|r| r.vacuous).count();
        let failed = self.prop1.iter().filter(|r| !r.pass).count();
        s.push_str(&format!(
            "gradient-overlap bound: {} layers checked, {} vacuous, {} failed\n",
            self.prop1.len(),
            vacuous,
            failed
        ));
        s
    }
}

/// Compares the pre-trained model against the fine-tuned one: per-layer
/// probe accuracy, output drift, planted-subspace perturbation, and the
/// gradient-overlap bound on a benign batch. Writes both CSV reports.
pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<AnalyzeSummary> {
    let world = load_world(&cfg.paths.world_dir)?;
    let before = world.model.clone();
    let after = assemble_model(
        &cfg.paths.world_dir.join("model"),
        &cfg.paths.run_dir.join("adapter"),
    )?;

    let drift = drift_report(&world, &before, &after)?;

    // The bound compares the gradient's smallest singular value against the
    // planted activation, so the batch must not exceed the layer width.
    let batch_cols = world.config.width.min(world.benign.inputs.cols());
    let batch = world.benign.inputs.columns(0, batch_cols);
    let targets = world.benign.targets.columns(0, batch_cols);
    let (outputs, _) = before.forward(&batch, false)?;
    let (_, grad) = loss_and_output_grad(&outputs, &targets, LossKind::Mse)?;
    let prop1 = proposition1_check(&world, &before, &batch, &grad)?;

    let run_dir = &cfg.paths.run_dir;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir.display().to_string(), e))?;
    let drift_csv = run_dir.join("drift.csv");
    let mut buf = Vec::new();
    write_drift_csv(&drift, &mut buf).map_err(|e| Error::io(drift_csv.display().to_string(), e))?;
    fs::write(&drift_csv, buf).map_err(|e| Error::io(drift_csv.display().to_string(), e))?;

    let prop1_csv = run_dir.join("prop1.csv");
    let mut buf = Vec::new();
    write_prop1_csv(&prop1, &mut buf).map_err(|e| Error::io(prop1_csv.display().to_string(), e))?;
    fs::write(&prop1_csv, buf).map_err(|e| Error::io(prop1_csv.display().to_string(), e))?;

    let mean_acc_drop = if drift.is_empty() {
        0.0
    } else {
        drift.iter().map(|r| r.acc_before - r.acc_after).sum::<f64>() / drift.len() as f64
    };

    Ok(AnalyzeSummary {
        drift,
        prop1,
        mean_acc_drop,
        drift_csv,
        prop1_csv,
    })
}

pub struct SelftestLine {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

/// Quick verification battery against the independent reference
/// implementations. Returns one line per check.
pub fn cmd_selftest() -> Vec<SelftestLine> {
    let mut lines = Vec::new();
    let mut push = |name: &'static str, result: Result<String>| {
        lines.push(match result {
            Ok(detail) => SelftestLine {
                name,
                pass: true,
                detail,
            },
            Err(e) => SelftestLine {
                name,
                pass: false,
                detail: e.to_string(),
            },
        });
    };

    push("matmul vs naive oracle", selftest_matmul());
    push("svd vs gram-eigen oracle", selftest_svd());
    push("projector laws and optimality", selftest_projector());
    push("adapter gradients vs finite differences", selftest_gradients());
    push("merge/inference equivalence", selftest_merge());
    push("gradient-overlap bound", selftest_prop1());
    lines
}

fn gaussian(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
    let mut gen = rng::stream(seed, label);
    Matrix::gaussian(rows, cols, 1.0, &mut gen)
}

fn check(cond: bool, detail: String) -> Result<String> {
    if cond {
        Ok(detail)
    } else {
        Err(Error::validation(detail))
    }
}

fn selftest_matmul() -> Result<String> {
    let a = gaussian(6, 5, 1, "selftest/a");
    let b = gaussian(5, 4, 1, "selftest/b");
    let diff = a.matmul(&b)?.max_abs_diff(&oracles::naive_matmul(&a, &b));
    check(diff < 1e-12, format!("max diff {diff:.2e}"))
}

fn selftest_svd() -> Result<String> {
    let m = gaussian(6, 4, 2, "selftest/m");
    let result = svd::svd(&m)?;
    let reference = oracles::gram_singular_values(&m);
    let spectrum_err = result
        .s
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let recon_err = result.reconstruct().sub(&m)?.frobenius_norm() / m.frobenius_norm();
    check(
        spectrum_err < 1e-9 && recon_err < 1e-10,
        format!("spectrum err {spectrum_err:.2e}, reconstruction err {recon_err:.2e}"),
    )
}

fn selftest_projector() -> Result<String> {
    use salora_core::adapter::{compute_safety_projector, safety_basis, SafetyContext};
    let w = gaussian(8, 8, 3, "selftest/w");
    let x_h = gaussian(8, 5, 3, "selftest/xh");
    let ctx = SafetyContext::new(x_h.clone(), 3)?;
    let c = compute_safety_projector(&w, &ctx)?;
    let sym = c.sub(&c.transpose())?.frobenius_norm();
    let idem = c.matmul(&c)?.sub(&c)?.frobenius_norm();
    let wx = w.matmul(&x_h)?;
    let ours = c.matmul(&wx)?.frobenius_norm();
    let rank = safety_basis(&w, &ctx)?.cols();
    let mut gen = rng::stream(3, "selftest/rand");
    let mut worst_margin = f64::INFINITY;
    for _ in 0..50 {
        let q = oracles::random_orthonormal(8, rank, &mut gen);
        let alt = oracles::naive_matmul(&oracles::complement_projector(&q), &wx).frobenius_norm();
        worst_margin = worst_margin.min(alt - ours);
    }
    check(
        sym < 1e-9 && idem < 1e-9 && worst_margin > -1e-9,
        format!("sym {sym:.1e}, idem {idem:.1e}, worst margin {worst_margin:.2e}"),
    )
}

fn selftest_gradients() -> Result<String> {
    use salora_core::adapter::{assemble_salora, SafetyContext, TaskContext};
    let w = gaussian(5, 5, 4, "selftest/gw").scale(0.5);
    let safety = SafetyContext::new(gaussian(5, 4, 4, "selftest/gxh"), 2)?;
    let task = TaskContext::new(gaussian(5, 8, 4, "selftest/gxt"), 2)?;
    let slot = assemble_salora(&w, &safety, &task, 2)?;
    let mut model = ToyModel::new(vec![LinearLayer::new(w)], Activation::Tanh)?;
    model.layers[0].adapter = Some(slot);

    let x = gaussian(5, 4, 4, "selftest/gx");
    let t = gaussian(5, 4, 4, "selftest/gt");
    let (_, analytic) = loss_and_grad(&model, &x, &t, LossKind::Mse)?;
    let fd = oracles::fd_adapter_gradients(&model, &x, &t, LossKind::Mse, 1e-5)?;
    let got = analytic.per_layer[0].as_ref().unwrap();
    let (fd_a, fd_b) = fd[0].as_ref().unwrap();
    let err = oracles::max_gradient_rel_error(&got.d_a, fd_a)
        .max(oracles::max_gradient_rel_error(&got.d_b, fd_b));
    check(err < 1e-5, format!("max rel err {err:.2e}"))
}

fn selftest_merge() -> Result<String> {
    use salora_core::adapter::{assemble_salora, SafetyContext, TaskContext};
    let w = gaussian(6, 6, 5, "selftest/mw");
    let safety = SafetyContext::new(gaussian(6, 4, 5, "selftest/mxh"), 2)?;
    let task = TaskContext::new(gaussian(6, 9, 5, "selftest/mxt"), 2)?;
    let mut slot = assemble_salora(&w, &safety, &task, 2)?;
    // Nudge the trainable factors as training would.
    for v in slot.a.data_mut() {
        *v += 0.05;
    }
    for v in slot.b.data_mut() {
        *v -= 0.03;
    }
    let trained = slot.effective_weight(&w)?;
    let record = merge_for_saving(&slot)?;
    let rebuilt = assemble_for_inference(&w, &record)?;
    let diff = rebuilt.max_abs_diff(&trained);
    check(diff < 1e-9, format!("max diff {diff:.2e}"))
}

fn selftest_prop1() -> Result<String> {
    let world = build_world(&salora_core::world::WorldConfig {
        width: 12,
        layers: 2,
        planted_rank: 3,
        n_benign: 24,
        n_protected: 8,
        seed: 6,
    })?;
    let batch = world.benign.inputs.columns(0, 10);
    let targets = world.benign.targets.columns(0, 10);
    let (outputs, _) = world.model.forward(&batch, false)?;
    let (_, grad) = loss_and_output_grad(&outputs, &targets, LossKind::Mse)?;
    let rows = proposition1_check(&world, &world.model, &batch, &grad)?;
    let checked = rows.iter().filter(|r| !r.vacuous).count();
    let failed = rows.iter().filter(|r| !r.pass).count();
    check(
        failed == 0 && checked > 0,
        format!("{checked} layers checked, {failed} failed"),
    )
}
