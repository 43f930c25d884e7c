//! Synthetic planted-subspace worlds.
//!
//! A world is a toy "pre-trained, aligned" model whose layer weights carry a
//! known low-rank planted component `W_S = sum_i alpha_i v_i v_i^T` on top of
//! a generic random part. Protected inputs are drawn to excite the planted
//! directions strongly; benign inputs are generic Gaussians whose targets
//! come from a perturbed teacher, so fine-tuning has something real to learn.
//! Because the planted directions are recorded exactly, feature drift and
//! gradient overlap can be measured against ground truth instead of being
//! estimated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, LinearLayer, ToyModel};
use crate::rng;
use crate::svd::top_left_singular_vectors;
use crate::train::Dataset;

/// Scale constants for world generation. Chosen so pre-activations stay in
/// tanh's responsive range while the planted response still dominates on
/// protected inputs.
const GENERIC_WEIGHT_SCALE: f64 = 0.7;
const TEACHER_PERTURBATION_SCALE: f64 = 0.15;
/// Scale of the teacher's extra perturbation along the planted input
/// directions. Benign inputs overlap those directions, so fitting the
/// teacher pulls adapter updates into the protected subspace; this is the
/// pressure the safety projector has to withstand.
const TEACHER_PLANTED_SCALE: f64 = 0.1;
/// Fraction of the protected class-mean response the teacher suppresses at
/// the final layer. Benign inputs overlap the class-mean input direction, so
/// plain low-rank fine-tuning learns the suppression and collapses the
/// protected response signature by this fraction; a projector built from the
/// protected features blocks exactly this component. Only the final layer is
/// rewritten so the incentive cannot be met by rewiring earlier layers.
const TEACHER_PROTECTED_REWRITE: f64 = 0.9;
const ALPHA_LO: f64 = 1.4;
const ALPHA_HI: f64 = 2.2;
/// Fraction of a protected input's expected energy aligned with the planted
/// directions.
const PROTECTED_ALIGNMENT: f64 = 0.8;
/// Per-coordinate spread of protected samples around their shared planted
/// center. Small against the center norm so every protected input activates
/// the planted component about equally.
const PROTECTED_SPREAD: f64 = 0.4;

/// World-generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldConfig {
    pub width: usize,
    pub layers: usize,
    pub planted_rank: usize,
    pub n_benign: usize,
    pub n_protected: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            width: 32,
            layers: 3,
            planted_rank: 4,
            n_benign: 512,
            n_protected: 64,
            seed: 0,
        }
    }
}

/// Ground truth for one layer's planted component.
#[derive(Debug, Clone)]
pub struct PlantedLayer {
    /// Orthonormal planted directions, `width x planted_rank`.
    pub basis: Matrix,
    /// Spectrum of the planted component.
    pub alphas: Vec<f64>,
    /// `W_S = basis * diag(alphas) * basis^T`.
    pub w_s: Matrix,
    /// Minimum of `|W_S x|` over the protected inputs' features at this
    /// layer; zero when nothing is planted.
    pub gamma: f64,
}

/// A generated world: the pre-trained model, its data, and the planted
/// ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub model: ToyModel,
    pub benign: Dataset,
    pub protected_inputs: Matrix,
    pub planted: Vec<PlantedLayer>,
    /// Minimum of the per-layer gammas.
    pub gamma: f64,
}

/// Builds a world deterministically from its config.
pub fn build_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    if config.width == 0 || config.layers == 0 {
        return Err(Error::config("world needs positive width and layer count"));
    }
    if config.planted_rank >= config.width {
        return Err(Error::config(format!(
            "planted rank {} must be below the layer width {}",
            config.planted_rank, config.width
        )));
    }
    if config.n_benign == 0 || config.n_protected == 0 {
        return Err(Error::config("world needs at least one sample of each kind"));
    }

    let d = config.width;
    let p = config.planted_rank;
    let seed = config.seed;

    // Layer weights: generic part plus planted component.
    let mut layers = Vec::with_capacity(config.layers);
    let mut planted_parts = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let (basis, alphas, w_s) = planted_component(d, p, seed, l)?;
        let mut gen = rng::stream(seed, &format!("world/generic/{l}"));
        let generic = Matrix::gaussian(d, d, GENERIC_WEIGHT_SCALE / (d as f64).sqrt(), &mut gen);
        let weight = generic.add(&w_s)?;
        layers.push(LinearLayer::new(weight));
        planted_parts.push((basis, alphas, w_s));
    }
    let model = ToyModel::new(layers, Activation::Tanh)?;

    // Protected inputs: all drawn around a shared center inside the first
    // layer's planted directions, plus per-sample spread and a generic
    // remainder. The shared center gives the class a consistent feature
    // signature (a mean offset, not just extra variance), which is what a
    // linear probe can read. With nothing planted they are plain Gaussians,
    // indistinguishable from benign inputs.
    let mut gen = rng::stream(seed, "world/protected");
    let protected_inputs = if p == 0 {
        Matrix::gaussian(d, config.n_protected, 1.0, &mut gen)
    } else {
        let center_norm = (PROTECTED_ALIGNMENT * d as f64).sqrt();
        let mut center = Matrix::gaussian(p, 1, 1.0, &mut gen);
        let norm = center.frobenius_norm();
        center = center.scale(center_norm / norm);

        let mut coeffs = Matrix::gaussian(p, config.n_protected, PROTECTED_SPREAD, &mut gen);
        for j in 0..config.n_protected {
            for i in 0..p {
                coeffs.set(i, j, coeffs.get(i, j) + center.get(i, 0));
            }
        }
        let noise = Matrix::gaussian(
            d,
            config.n_protected,
            (1.0 - PROTECTED_ALIGNMENT).sqrt(),
            &mut gen,
        );
        planted_parts[0].0.matmul(&coeffs)?.add(&noise)?
    };

    // Protected features through the pre-trained model, used for the
    // teacher's rewrite term and the recorded gammas.
    let (_, trace) = model.forward(&protected_inputs, true)?;
    let trace = trace.expect("capture requested");

    // Benign data: Gaussian inputs, targets from a perturbed teacher. On top
    // of a generic bump, the teacher suppresses each layer's response along
    // the protected class-mean direction, so the fine-tuning task itself
    // asks for an update inside the protected feature subspace.
    let mut gen = rng::stream(seed, "world/benign/x");
    let benign_inputs = Matrix::gaussian(d, config.n_benign, 1.0, &mut gen);
    let mut teacher = model.clone();
    for (l, layer) in teacher.layers.iter_mut().enumerate() {
        let mut gen = rng::stream(seed, &format!("world/teacher/{l}"));
        let mut bump =
            Matrix::gaussian(d, d, TEACHER_PERTURBATION_SCALE / (d as f64).sqrt(), &mut gen);
        if p > 0 {
            let mixer = Matrix::gaussian(d, p, TEACHER_PLANTED_SCALE / (d as f64).sqrt(), &mut gen);
            bump = bump.add(&mixer.matmul(&planted_parts[l].0.transpose())?)?;

            // Rank-one suppression at the final layer: inputs at the
            // protected class mean lose TEACHER_PROTECTED_REWRITE of their
            // mean response.
            if l + 1 == config.layers {
                let input_mean = column_mean(&trace.per_layer_inputs[l]);
                let feature_mean = layer.weight.matmul(&input_mean)?;
                let in_norm_sq = input_mean.frobenius_norm().powi(2);
                if in_norm_sq > 0.0 {
                    let rewrite = feature_mean
                        .scale(TEACHER_PROTECTED_REWRITE / in_norm_sq)
                        .matmul(&input_mean.transpose())?;
                    bump = bump.sub(&rewrite)?;
                }
            }
        }
        layer.weight = layer.weight.add(&bump)?;
    }
    let (benign_targets, _) = teacher.forward(&benign_inputs, false)?;
    let benign = Dataset::new(benign_inputs, benign_targets)?;
    let mut planted = Vec::with_capacity(config.layers);
    let mut world_gamma = f64::INFINITY;
    for (l, (basis, alphas, w_s)) in planted_parts.into_iter().enumerate() {
        let gamma = if p == 0 {
            0.0
        } else {
            let activations = w_s.matmul(&trace.per_layer_inputs[l])?;
            min_column_norm(&activations)
        };
        world_gamma = world_gamma.min(gamma);
        planted.push(PlantedLayer {
            basis,
            alphas,
            w_s,
            gamma,
        });
    }

    Ok(SyntheticWorld {
        config: *config,
        model,
        benign,
        protected_inputs,
        planted,
        gamma: world_gamma,
    })
}

fn planted_component(
    d: usize,
    p: usize,
    seed: u64,
    layer: usize,
) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if p == 0 {
        return Ok((Matrix::zeros(d, 0), Vec::new(), Matrix::zeros(d, d)));
    }
    let mut gen = rng::stream(seed, &format!("world/planted/{layer}"));
    let raw = Matrix::gaussian(d, p, 1.0, &mut gen);
    let basis = top_left_singular_vectors(&raw, p)?;
    let alphas: Vec<f64> = (0..p).map(|_| gen.gen_range(ALPHA_LO..ALPHA_HI)).collect();
    let mut scaled = basis.clone();
    for j in 0..p {
        for i in 0..d {
            scaled.set(i, j, scaled.get(i, j) * alphas[j]);
        }
    }
    let w_s = scaled.matmul(&basis.transpose())?;
    Ok((basis, alphas, w_s))
}

fn column_mean(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), 1);
    if m.cols() == 0 {
        return out;
    }
    for i in 0..m.rows() {
        let sum: f64 = (0..m.cols()).map(|j| m.get(i, j)).sum();
        out.set(i, 0, sum / m.cols() as f64);
    }
    out
}

fn min_column_norm(m: &Matrix) -> f64 {
    (0..m.cols())
        .map(|j| {
            (0..m.rows())
                .map(|i| m.get(i, j) * m.get(i, j))
                .sum::<f64>()
                .sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_bit_exactly() {
        let config = WorldConfig {
            width: 8,
            layers: 2,
            planted_rank: 2,
            n_benign: 12,
            n_protected: 6,
            seed: 3,
        };
        let a = build_world(&config).unwrap();
        let b = build_world(&config).unwrap();
        for (la, lb) in a.model.layers.iter().zip(&b.model.layers) {
            assert!(la.weight.bit_eq(&lb.weight));
        }
        assert!(a.benign.inputs.bit_eq(&b.benign.inputs));
        assert!(a.benign.targets.bit_eq(&b.benign.targets));
        assert!(a.protected_inputs.bit_eq(&b.protected_inputs));
        assert_eq!(a.gamma.to_bits(), b.gamma.to_bits());
    }

    #[test]
    fn gamma_is_positive_and_matches_recomputation() {
        let config = WorldConfig {
            width: 10,
            layers: 2,
            planted_rank: 3,
            n_benign: 20,
            n_protected: 8,
            seed: 4,
        };
        let world = build_world(&config).unwrap();
        assert!(world.gamma > 0.0);

        let (_, trace) = world.model.forward(&world.protected_inputs, true).unwrap();
        let trace = trace.unwrap();
        for (l, planted) in world.planted.iter().enumerate() {
            let acts = planted.w_s.matmul(&trace.per_layer_inputs[l]).unwrap();
            let recomputed = min_column_norm(&acts);
            assert_eq!(planted.gamma.to_bits(), recomputed.to_bits());
        }
    }

    #[test]
    fn planted_basis_is_orthonormal() {
        let world = build_world(&WorldConfig {
            width: 9,
            layers: 2,
            planted_rank: 3,
            n_benign: 10,
            n_protected: 5,
            seed: 5,
        })
        .unwrap();
        for planted in &world.planted {
            let gram = planted.basis.transpose().matmul(&planted.basis).unwrap();
            let defect = gram.sub(&Matrix::identity(3)).unwrap().frobenius_norm();
            assert!(defect < 1e-10);
        }
    }

    #[test]
    fn null_world_has_zero_gamma_and_empty_basis() {
        let world = build_world(&WorldConfig {
            width: 8,
            layers: 1,
            planted_rank: 0,
            n_benign: 10,
            n_protected: 5,
            seed: 6,
        })
        .unwrap();
        assert_eq!(world.gamma, 0.0);
        assert_eq!(world.planted[0].basis.cols(), 0);
        assert_eq!(world.planted[0].w_s.frobenius_norm(), 0.0);
    }

    #[test]
    fn infeasible_dims_are_config_errors() {
        let bad = WorldConfig {
            width: 4,
            planted_rank: 4,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(&bad), Err(Error::Config(_))));
    }
}
