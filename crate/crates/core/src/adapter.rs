//! Adapter slots: vanilla LoRA, PiSSA, and SaLoRA.
//!
//! A slot carries the trainable low-rank pair `(A, B)` and, for SaLoRA, the
//! fixed safety projector `C = I - U_C U_C^T`, the frozen initial copies
//! `(A0, B0)`, and the residual weight `W' = W - C B0 A0`. The projector is
//! built from the dominant output directions of a layer on protected inputs,
//! so anything the adapter adds stays orthogonal to those directions; the
//! residual reparameterization makes the adapted model match the pre-trained
//! model exactly at initialization.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::svd::{svd, top_left_singular_vectors};

/// Relative cutoff used when clamping the safety rank to the numerical rank
/// of `W X_h`: singular values above `1e-10 * s_max` count.
const RANK_CUTOFF: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    Pissa,
    Salora,
}

impl AdapterKind {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Pissa => "pissa",
            AdapterKind::Salora => "salora",
        }
    }

    pub fn parse(s: &str) -> Result<AdapterKind> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "pissa" => Ok(AdapterKind::Pissa),
            "salora" => Ok(AdapterKind::Salora),
            other => Err(Error::format(format!("unknown adapter kind `{other}`"))),
        }
    }
}

/// One adapter attached to a linear layer.
///
/// `a` and `b` are the trainable factors. For SaLoRA, `c`, `a0`, `b0`, and
/// `residual_w` are fixed for the lifetime of the slot; only the training
/// loop may mutate `a` and `b`.
#[derive(Debug, Clone)]
pub struct AdapterSlot {
    pub kind: AdapterKind,
    /// `r x in_dim`, trainable.
    pub a: Matrix,
    /// `out_dim x r`, trainable.
    pub b: Matrix,
    /// `out_dim x out_dim` safety projector, SaLoRA only.
    pub c: Option<Matrix>,
    /// Frozen copy of the initial `a`, SaLoRA only.
    pub a0: Option<Matrix>,
    /// Frozen copy of the initial `b`, SaLoRA only.
    pub b0: Option<Matrix>,
    /// Residual weight replacing the base weight during training, SaLoRA only.
    pub residual_w: Option<Matrix>,
}

impl AdapterSlot {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    /// Effective layer weight given the layer's stored base weight.
    ///
    /// SaLoRA ignores `base` (its residual plays that role); LoRA and PiSSA
    /// add `B A` on top of it.
    pub fn effective_weight(&self, base: &Matrix) -> Result<Matrix> {
        let delta = self.b.matmul(&self.a)?;
        match self.kind {
            AdapterKind::Lora | AdapterKind::Pissa => base.add(&delta),
            AdapterKind::Salora => {
                let c = self.c.as_ref().ok_or_else(|| {
                    Error::config("salora slot is missing its safety projector")
                })?;
                let residual = self.residual_w.as_ref().ok_or_else(|| {
                    Error::config("salora slot is missing its residual weight")
                })?;
                residual.add(&c.matmul(&delta)?)
            }
        }
    }

    /// Checks the structural invariants: factor shapes, rank bound, and the
    /// symmetry and idempotency of the projector when one is present.
    pub fn validate(&self) -> Result<()> {
        if self.b.cols() != self.a.rows() {
            return Err(Error::shape(format!(
                "adapter factors disagree: b is {}x{}, a is {}x{}",
                self.b.rows(),
                self.b.cols(),
                self.a.rows(),
                self.a.cols()
            )));
        }
        if self.rank() > self.out_dim().min(self.in_dim()) {
            return Err(Error::rank(format!(
                "rank {} exceeds min({}, {})",
                self.rank(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        if let Some(c) = &self.c {
            let sym = c.sub(&c.transpose())?.frobenius_norm();
            let idem = c.matmul(c)?.sub(c)?.frobenius_norm();
            if sym > 1e-9 || idem > 1e-9 {
                return Err(Error::validation(format!(
                    "projector defect: symmetry {sym:.3e}, idempotency {idem:.3e}"
                )));
            }
        }
        Ok(())
    }
}

/// Input features of protected samples at one layer plus the safety rank.
#[derive(Debug, Clone)]
pub struct SafetyContext {
    /// `in_dim x n_h` feature matrix.
    pub x_h: Matrix,
    pub r_s: usize,
}

impl SafetyContext {
    pub fn new(x_h: Matrix, r_s: usize) -> Result<Self> {
        if x_h.cols() == 0 {
            return Err(Error::validation("safety context needs at least one sample"));
        }
        Ok(SafetyContext { x_h, r_s })
    }
}

/// Input features of fine-tuning-task samples at one layer plus the task rank.
#[derive(Debug, Clone)]
pub struct TaskContext {
    /// `in_dim x n_t` feature matrix.
    pub x_t: Matrix,
    pub r_t: usize,
}

impl TaskContext {
    pub fn new(x_t: Matrix, r_t: usize) -> Result<Self> {
        if x_t.cols() == 0 {
            return Err(Error::validation("task context needs at least one sample"));
        }
        Ok(TaskContext { x_t, r_t })
    }
}

fn check_rank(r: usize, out_dim: usize, in_dim: usize) -> Result<()> {
    if r == 0 || r > out_dim.min(in_dim) {
        return Err(Error::rank(format!(
            "adapter rank {} out of range 1..={} for a {}x{} weight",
            r,
            out_dim.min(in_dim),
            out_dim,
            in_dim
        )));
    }
    Ok(())
}

/// Vanilla LoRA slot: `A` Gaussian with standard deviation `1/sqrt(in_dim)`,
/// `B` zero, so the initial update `B A` vanishes.
pub fn init_lora(out_dim: usize, in_dim: usize, r: usize, seed: u64) -> Result<AdapterSlot> {
    check_rank(r, out_dim, in_dim)?;
    let mut gen = rng::stream(seed, "lora/a");
    let a = Matrix::gaussian(r, in_dim, 1.0 / (in_dim as f64).sqrt(), &mut gen);
    Ok(AdapterSlot {
        kind: AdapterKind::Lora,
        a,
        b: Matrix::zeros(out_dim, r),
        c: None,
        a0: None,
        b0: None,
        residual_w: None,
    })
}

/// PiSSA split: `B = U_r sqrt(S_r)`, `A = sqrt(S_r) V_r^T` from the SVD of
/// `w`, residual `w - B A`. The residual replaces the layer's base weight so
/// `residual + B A` reproduces `w`.
pub fn init_pissa(w: &Matrix, r: usize) -> Result<(AdapterSlot, Matrix)> {
    check_rank(r, w.rows(), w.cols())?;
    let decomp = svd(w)?;
    let (b, a) = split_principal(&decomp.u, &decomp.s, &decomp.v, r);
    let residual = w.sub(&b.matmul(&a)?)?;
    let slot = AdapterSlot {
        kind: AdapterKind::Pissa,
        a,
        b,
        c: None,
        a0: None,
        b0: None,
        residual_w: None,
    };
    Ok((slot, residual))
}

/// `B = U_r sqrt(S_r)`, `A = sqrt(S_r) V_r^T`.
fn split_principal(u: &Matrix, s: &[f64], v: &Matrix, r: usize) -> (Matrix, Matrix) {
    let sqrt_s: Vec<f64> = s[..r].iter().map(|x| x.max(0.0).sqrt()).collect();
    let mut b = u.columns(0, r);
    for j in 0..r {
        for i in 0..b.rows() {
            b.set(i, j, b.get(i, j) * sqrt_s[j]);
        }
    }
    let vt = v.columns(0, r).transpose();
    let mut a = vt;
    for i in 0..r {
        for j in 0..a.cols() {
            a.set(i, j, a.get(i, j) * sqrt_s[i]);
        }
    }
    (b, a)
}

/// Orthonormal basis `U_C` of the protected output subspace: the top
/// singular vectors of `W X_h`, with the rank clamped to the numerical rank
/// of that product. Returns an `out_dim x 0` matrix when the subspace is
/// empty (`r_s = 0` or `W X_h = 0`).
pub fn safety_basis(w: &Matrix, ctx: &SafetyContext) -> Result<Matrix> {
    if w.cols() != ctx.x_h.rows() {
        return Err(Error::shape(format!(
            "safety features: weight is {}x{}, features are {}x{}",
            w.rows(),
            w.cols(),
            ctx.x_h.rows(),
            ctx.x_h.cols()
        )));
    }
    let d = w.rows();
    if ctx.r_s == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let activations = w.matmul(&ctx.x_h)?;
    let decomp = svd(&activations)?;
    let s_max = decomp.s[0];
    if s_max <= 0.0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let numerical_rank = decomp.s.iter().filter(|&&s| s > RANK_CUTOFF * s_max).count();
    let r_eff = ctx.r_s.min(numerical_rank);
    Ok(decomp.u.columns(0, r_eff))
}

/// Safety projector `C = I - U_C U_C^T` onto the orthogonal complement of the
/// protected output subspace. `C = I` when that subspace is empty.
pub fn compute_safety_projector(w: &Matrix, ctx: &SafetyContext) -> Result<Matrix> {
    let basis = safety_basis(w, ctx)?;
    let outer = basis.matmul(&basis.transpose())?;
    Matrix::identity(w.rows()).sub(&outer)
}

/// Task-specific initialization: project the principal split of `w` onto the
/// task subspace `U U^T`, where `U` spans the top directions of `W X_t`.
///
/// Returns `(b, a)` with `b = U U^T U_bar_r sqrt(S_bar_r)` and
/// `a = sqrt(S_bar_r) V_bar_r^T`. The detection rank is `r` (clamped to the
/// feature count when fewer task samples than dimensions are available).
pub fn task_specific_init(
    w: &Matrix,
    ctx: &TaskContext,
    r: usize,
) -> Result<(Matrix, Matrix)> {
    check_rank(r, w.rows(), w.cols())?;
    if w.cols() != ctx.x_t.rows() {
        return Err(Error::shape(format!(
            "task features: weight is {}x{}, features are {}x{}",
            w.rows(),
            w.cols(),
            ctx.x_t.rows(),
            ctx.x_t.cols()
        )));
    }
    let detection_rank = ctx.r_t.min(w.rows()).min(ctx.x_t.cols());
    let proj = if detection_rank == 0 {
        Matrix::zeros(w.rows(), w.rows())
    } else {
        let task_activations = w.matmul(&ctx.x_t)?;
        let u = top_left_singular_vectors(&task_activations, detection_rank)?;
        u.matmul(&u.transpose())?
    };

    let decomp = svd(w)?;
    let (b_principal, a) = split_principal(&decomp.u, &decomp.s, &decomp.v, r);
    let b = proj.matmul(&b_principal)?;
    Ok((b, a))
}

/// Builds a full SaLoRA slot for one layer: safety projector from the
/// protected features, task-specific `(B, A)` initialization, frozen copies,
/// and the residual weight `W' = W - C B0 A0`.
pub fn assemble_salora(
    w: &Matrix,
    safety: &SafetyContext,
    task: &TaskContext,
    r: usize,
) -> Result<AdapterSlot> {
    let c = compute_safety_projector(w, safety)?;
    let (b, a) = task_specific_init(w, task, r)?;
    finish_salora(w, c, b, a)
}

/// SaLoRA slot with the projector but LoRA-style initialization (`A`
/// Gaussian, `B` zero). This is the ablation arm that isolates the value of
/// the task-specific initialization.
pub fn assemble_salora_lora_init(
    w: &Matrix,
    safety: &SafetyContext,
    r: usize,
    seed: u64,
) -> Result<AdapterSlot> {
    check_rank(r, w.rows(), w.cols())?;
    let c = compute_safety_projector(w, safety)?;
    let mut gen = rng::stream(seed, "salora-lora-init/a");
    let a = Matrix::gaussian(r, w.cols(), 1.0 / (w.cols() as f64).sqrt(), &mut gen);
    let b = Matrix::zeros(w.rows(), r);
    finish_salora(w, c, b, a)
}

fn finish_salora(w: &Matrix, c: Matrix, b: Matrix, a: Matrix) -> Result<AdapterSlot> {
    let delta = c.matmul(&b.matmul(&a)?)?;
    let residual_w = w.sub(&delta)?;
    Ok(AdapterSlot {
        kind: AdapterKind::Salora,
        a0: Some(a.clone()),
        b0: Some(b.clone()),
        a,
        b,
        c: Some(c),
        residual_w: Some(residual_w),
    })
}

/// Matrices persisted for one adapted layer. SaLoRA folds the projector into
/// the `B` factors at save time (`B' = C B`, `B0' = C B0`), so the stored
/// shapes match vanilla LoRA's with twice the payload, and neither `C` nor
/// the residual weight needs to be saved.
#[derive(Debug, Clone)]
pub enum AdapterRecord {
    Lora {
        b: Matrix,
        a: Matrix,
    },
    Pissa {
        b: Matrix,
        a: Matrix,
        residual: Matrix,
    },
    Salora {
        b_prime: Matrix,
        a: Matrix,
        b0_prime: Matrix,
        a0: Matrix,
    },
}

impl AdapterRecord {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterRecord::Lora { .. } => AdapterKind::Lora,
            AdapterRecord::Pissa { .. } => AdapterKind::Pissa,
            AdapterRecord::Salora { .. } => AdapterKind::Salora,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            AdapterRecord::Lora { a, .. }
            | AdapterRecord::Pissa { a, .. }
            | AdapterRecord::Salora { a, .. } => a.rows(),
        }
    }
}

/// Folds the fixed projector into the `B` factors of a trained SaLoRA slot.
/// Only SaLoRA slots carry a projector, so other kinds are a configuration
/// error.
pub fn merge_for_saving(slot: &AdapterSlot) -> Result<AdapterRecord> {
    if slot.kind != AdapterKind::Salora {
        return Err(Error::config(format!(
            "merge_for_saving applies to salora slots, got {}",
            slot.kind.name()
        )));
    }
    let c = slot
        .c
        .as_ref()
        .ok_or_else(|| Error::config("salora slot is missing its safety projector"))?;
    let b0 = slot
        .b0
        .as_ref()
        .ok_or_else(|| Error::config("salora slot is missing its frozen b0"))?;
    let a0 = slot
        .a0
        .as_ref()
        .ok_or_else(|| Error::config("salora slot is missing its frozen a0"))?;
    Ok(AdapterRecord::Salora {
        b_prime: c.matmul(&slot.b)?,
        a: slot.a.clone(),
        b0_prime: c.matmul(b0)?,
        a0: a0.clone(),
    })
}

/// Rebuilds the effective weight of one layer from the pre-trained weight
/// and a saved record. For SaLoRA this is
/// `W + (B' A - B0' A0) = W' + C B A`, the training-time weight.
pub fn assemble_for_inference(w_pretrained: &Matrix, record: &AdapterRecord) -> Result<Matrix> {
    match record {
        AdapterRecord::Lora { b, a } => {
            check_record_dims(w_pretrained, b, a)?;
            w_pretrained.add(&b.matmul(a)?)
        }
        AdapterRecord::Pissa { b, a, residual } => {
            check_record_dims(w_pretrained, b, a)?;
            if residual.shape() != w_pretrained.shape() {
                return Err(Error::shape(format!(
                    "pissa residual is {}x{}, weight is {}x{}",
                    residual.rows(),
                    residual.cols(),
                    w_pretrained.rows(),
                    w_pretrained.cols()
                )));
            }
            residual.add(&b.matmul(a)?)
        }
        AdapterRecord::Salora {
            b_prime,
            a,
            b0_prime,
            a0,
        } => {
            check_record_dims(w_pretrained, b_prime, a)?;
            check_record_dims(w_pretrained, b0_prime, a0)?;
            let delta = b_prime.matmul(a)?.sub(&b0_prime.matmul(a0)?)?;
            w_pretrained.add(&delta)
        }
    }
}

fn check_record_dims(w: &Matrix, b: &Matrix, a: &Matrix) -> Result<()> {
    if b.rows() != w.rows() || a.cols() != w.cols() || b.cols() != a.rows() {
        return Err(Error::shape(format!(
            "adapter record ({}x{} * {}x{}) does not match weight {}x{}",
            b.rows(),
            b.cols(),
            a.rows(),
            a.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}
