//! Low-rank representation interventions.
//!
//! Both operators rewrite a d-dimensional representation inside the row space
//! of an orthonormal basis matrix R (r×d):
//!
//! * the linear form adds Rᵀ(A·h + b − R·h), the same update for every input;
//! * the gated form weights each basis row by a sigmoid gate w_k(h) ∈ [0, 1]
//!   computed from the incoming representation, so different inputs can use
//!   different parts of the subspace.
//!
//! With all gates pinned to 1 the two coincide; the dense matrix form
//! h + Rᵀ·diag(w)·(A·h + b − R·h) is kept as an independently-computed oracle
//! for the summation form.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, matmul, matvec};
use crate::numerics::{gram_identity_deviation, orthonormalize, seeded_rng, Tape, Tensor, VarId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// All gates identically 1; the operator is purely linear.
    Constant,
    /// One shared sigmoid gate broadcast to every basis.
    Scalar,
    /// An independent sigmoid gate per basis.
    PerBasis,
}

impl GateMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::Constant => "constant",
            GateMode::Scalar => "scalar",
            GateMode::PerBasis => "per_basis",
        }
    }
}

/// Per-basis gate values for one representation.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub w: Vec<f64>,
}

/// Learnable tensors of one intervened layer.
#[derive(Debug, Clone)]
pub struct InterventionParams {
    pub rank: usize,
    pub dim: usize,
    pub gate_mode: GateMode,
    /// r×d, rows kept orthonormal by re-projection after optimizer steps.
    pub basis: Tensor,
    /// r×d subspace predictor rows.
    pub predictor: Tensor,
    /// r offsets.
    pub offset: Tensor,
    /// Gate linear form: (r×d, r) for per-basis gates, (1×d, 1) for a shared
    /// scalar gate, absent when gates are constant.
    pub gate_w: Option<Tensor>,
    pub gate_b: Option<Tensor>,
}

impl InterventionParams {
    /// Identity-initialized operator: R is an orthonormalized Gaussian,
    /// A starts as a copy of R, offsets and gate parameters start at zero, so
    /// the operator maps h to h exactly before any training.
    pub fn identity_init(rank: usize, dim: usize, gate_mode: GateMode, seed: u64) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(Error::InvalidArgument(format!(
                "rank must be in 1..={dim}, got {rank}"
            )));
        }
        let mut rng = seeded_rng(seed);
        let basis = orthonormalize(&Tensor::randn(vec![rank, dim], 1.0, &mut rng))?;
        let predictor = basis.clone();
        let offset = Tensor::zeros(vec![rank]);
        let (gate_w, gate_b) = match gate_mode {
            GateMode::Constant => (None, None),
            GateMode::Scalar => (Some(Tensor::zeros(vec![1, dim])), Some(Tensor::zeros(vec![1]))),
            GateMode::PerBasis => {
                (Some(Tensor::zeros(vec![rank, dim])), Some(Tensor::zeros(vec![rank])))
            }
        };
        Ok(InterventionParams { rank, dim, gate_mode, basis, predictor, offset, gate_w, gate_b })
    }

    fn check_input(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "representation has length {}, operator expects {}",
                h.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Largest deviation of the basis Gram matrix from the identity.
    pub fn basis_gram_deviation(&self) -> f64 {
        gram_identity_deviation(&self.basis)
    }

    /// Re-projects the basis rows onto the orthonormal manifold.
    pub fn reorthonormalize(&mut self) -> Result<()> {
        self.basis = orthonormalize(&self.basis)?;
        Ok(())
    }

    /// Total learnable scalar count.
    pub fn param_count(&self) -> usize {
        let gates = self.gate_w.as_ref().map_or(0, Tensor::numel)
            + self.gate_b.as_ref().map_or(0, Tensor::numel);
        self.basis.numel() + self.predictor.numel() + self.offset.numel() + gates
    }
}

/// h + Rᵀ(A·h + b − R·h).
pub fn reft_apply(params: &InterventionParams, h: &[f64]) -> Result<Vec<f64>> {
    params.check_input(h)?;
    let pred = matvec(&params.predictor, h)?;
    let proj = matvec(&params.basis, h)?;
    let mut coeffs = vec![0.0; params.rank];
    for k in 0..params.rank {
        coeffs[k] = pred[k] + params.offset.data()[k] - proj[k];
    }
    Ok(add_in_rowspace(h, &params.basis, &coeffs))
}

/// Per-basis gate values for one representation.
pub fn gate_weights(params: &InterventionParams, h: &[f64]) -> Result<GateWeights> {
    params.check_input(h)?;
    let w = match params.gate_mode {
        GateMode::Constant => vec![1.0; params.rank],
        GateMode::Scalar => {
            let u = params.gate_w.as_ref().expect("scalar gate params");
            let c = params.gate_b.as_ref().expect("scalar gate params");
            let shared = sigmoid(dot(u.row(0), h) + c.data()[0]);
            vec![shared; params.rank]
        }
        GateMode::PerBasis => {
            let u = params.gate_w.as_ref().expect("per-basis gate params");
            let c = params.gate_b.as_ref().expect("per-basis gate params");
            (0..params.rank).map(|k| sigmoid(dot(u.row(k), h) + c.data()[k])).collect()
        }
    };
    Ok(GateWeights { w })
}

/// h + Σ_k w_k(h)·r_k·(a_k·h + b_k − r_k·h), the basis-by-basis summation
/// form.
pub fn baft_apply(params: &InterventionParams, h: &[f64]) -> Result<Vec<f64>> {
    let gates = gate_weights(params, h)?;
    baft_apply_with_weights(params, h, &gates.w)
}

/// Summation form with caller-supplied gate values.
pub fn baft_apply_with_weights(
    params: &InterventionParams,
    h: &[f64],
    w: &[f64],
) -> Result<Vec<f64>> {
    params.check_input(h)?;
    if w.len() != params.rank {
        return Err(Error::ShapeMismatch(format!(
            "{} gate values for rank {}",
            w.len(),
            params.rank
        )));
    }
    let mut out = h.to_vec();
    for k in 0..params.rank {
        let coeff = w[k]
            * (dot(params.predictor.row(k), h) + params.offset.data()[k]
                - dot(params.basis.row(k), h));
        for (o, r) in out.iter_mut().zip(params.basis.row(k)) {
            *o += coeff * r;
        }
    }
    Ok(out)
}

/// Dense evaluation h + Rᵀ·diag(w)·(A·h + b − R·h), built from explicit
/// matrix products. Serves as the independent oracle for [`baft_apply`].
pub fn baft_matrix_form(params: &InterventionParams, h: &[f64]) -> Result<Vec<f64>> {
    let gates = gate_weights(params, h)?;
    params.check_input(h)?;
    let r = params.rank;
    let mut diag = Tensor::zeros(vec![r, r]);
    for k in 0..r {
        diag.data_mut()[k * r + k] = gates.w[k];
    }
    // M = Rᵀ·diag(w): d×r.
    let m = matmul(&params.basis.transpose(), &diag)?;
    let pred = matvec(&params.predictor, h)?;
    let proj = matvec(&params.basis, h)?;
    let z: Vec<f64> = (0..r).map(|k| pred[k] + params.offset.data()[k] - proj[k]).collect();
    let update = matvec(&m, &z)?;
    Ok(h.iter().zip(&update).map(|(a, b)| a + b).collect())
}

fn add_in_rowspace(h: &[f64], basis: &Tensor, coeffs: &[f64]) -> Vec<f64> {
    let mut out = h.to_vec();
    for (k, &c) in coeffs.iter().enumerate() {
        for (o, r) in out.iter_mut().zip(basis.row(k)) {
            *o += c * r;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Interventions for a model, keyed by layer index. BTreeMap keeps the
/// iteration (and hence update) order deterministic.
#[derive(Debug, Clone, Default)]
pub struct InterventionSet {
    pub by_layer: BTreeMap<usize, InterventionParams>,
}

impl InterventionSet {
    pub fn identity_init(
        layers: &[usize],
        rank: usize,
        dim: usize,
        gate_mode: GateMode,
        seed: u64,
    ) -> Result<Self> {
        let mut by_layer = BTreeMap::new();
        for (i, &layer) in layers.iter().enumerate() {
            by_layer.insert(
                layer,
                InterventionParams::identity_init(rank, dim, gate_mode, seed ^ (i as u64 + 1))?,
            );
        }
        Ok(InterventionSet { by_layer })
    }

    pub fn layers(&self) -> Vec<usize> {
        self.by_layer.keys().copied().collect()
    }

    pub fn max_basis_gram_deviation(&self) -> f64 {
        self.by_layer
            .values()
            .map(InterventionParams::basis_gram_deviation)
            .fold(0.0, f64::max)
    }

    pub fn param_count(&self) -> usize {
        self.by_layer.values().map(InterventionParams::param_count).sum()
    }
}

/// Tape handles for one layer's intervention parameters.
#[derive(Debug, Clone, Copy)]
pub struct StagedParams {
    pub basis: VarId,
    pub predictor: VarId,
    pub offset: VarId,
    pub gate_w: Option<VarId>,
    pub gate_b: Option<VarId>,
    pub gate_mode: GateMode,
    pub rank: usize,
}

/// Outcome of applying a staged intervention to a sequence of
/// representations.
pub struct AppliedIntervention {
    /// Rewritten representation matrix (n×d).
    pub output: VarId,
    /// Gate values at the intervened positions (k×r); constant gates report
    /// an all-ones tensor.
    pub gates: VarId,
    /// Pre-intervention representations at the intervened positions (k×d).
    pub inputs: VarId,
}

/// Places the parameter tensors on a tape. When `trainable` is set the
/// leaves accumulate gradients.
pub fn stage_on_tape(
    tape: &mut Tape,
    params: &InterventionParams,
    trainable: bool,
) -> StagedParams {
    let lift = |tape: &mut Tape, t: &Tensor| {
        let t = if trainable { t.clone().with_grad() } else { t.clone() };
        tape.leaf(t)
    };
    StagedParams {
        basis: lift(tape, &params.basis),
        predictor: lift(tape, &params.predictor),
        offset: lift(tape, &params.offset),
        gate_w: params.gate_w.as_ref().map(|t| lift(tape, t)),
        gate_b: params.gate_b.as_ref().map(|t| lift(tape, t)),
        gate_mode: params.gate_mode,
        rank: params.rank,
    }
}

/// Rewrites rows `positions` of the n×d representation matrix `x` in place of
/// the staged operator; other rows pass through bit-identically.
pub fn apply_on_tape(
    tape: &mut Tape,
    x: VarId,
    staged: &StagedParams,
    positions: &[usize],
) -> AppliedIntervention {
    let n = tape.value(x).rows();
    let r = staged.rank;

    let basis_t = tape.transpose(staged.basis);
    let predictor_t = tape.transpose(staged.predictor);
    let pred = tape.matmul(x, predictor_t);
    let pred = tape.add_row_broadcast(pred, staged.offset);
    let proj = tape.matmul(x, basis_t);
    let coeffs = tape.sub(pred, proj); // n×r

    let gates_full = match staged.gate_mode {
        GateMode::Constant => None,
        GateMode::Scalar => {
            let u_t = tape.transpose(staged.gate_w.expect("scalar gate"));
            let z = tape.matmul(x, u_t); // n×1
            let z = tape.add_row_broadcast(z, staged.gate_b.expect("scalar gate"));
            let g1 = tape.sigmoid(z);
            // Broadcast the shared gate across all r bases.
            let ones = tape.constant(Tensor::new(vec![1, r], vec![1.0; r]).expect("ones"));
            Some(tape.matmul(g1, ones))
        }
        GateMode::PerBasis => {
            let u_t = tape.transpose(staged.gate_w.expect("per-basis gate"));
            let z = tape.matmul(x, u_t); // n×r
            let z = tape.add_row_broadcast(z, staged.gate_b.expect("per-basis gate"));
            Some(tape.sigmoid(z))
        }
    };

    let weighted = match gates_full {
        Some(g) => tape.mul(g, coeffs),
        None => coeffs,
    };

    // Zero the update outside the intervened rows, then push the surviving
    // coefficients back through the basis.
    let mut mask = Tensor::zeros(vec![n, r]);
    for &p in positions {
        for k in 0..r {
            mask.data_mut()[p * r + k] = 1.0;
        }
    }
    let masked = tape.mul_const_tensor(weighted, mask);
    let update = tape.matmul(masked, staged.basis);
    let output = tape.add(x, update);

    let gates = match gates_full {
        Some(g) => tape.gather_rows(g, positions.to_vec()),
        None => tape.constant(
            Tensor::new(vec![positions.len(), r], vec![1.0; positions.len() * r])
                .expect("ones"),
        ),
    };
    let inputs = tape.gather_rows(x, positions.to_vec());

    AppliedIntervention { output, gates, inputs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_params(rank: usize, dim: usize, mode: GateMode, seed: u64) -> InterventionParams {
        let mut rng = seeded_rng(seed);
        let mut p = InterventionParams::identity_init(rank, dim, mode, seed).unwrap();
        p.predictor = Tensor::randn(vec![rank, dim], 0.8, &mut rng);
        p.offset = Tensor::randn(vec![rank], 0.8, &mut rng);
        if let Some(u) = &mut p.gate_w {
            *u = Tensor::randn(u.shape().to_vec(), 0.8, &mut rng);
        }
        if let Some(c) = &mut p.gate_b {
            *c = Tensor::randn(c.shape().to_vec(), 0.8, &mut rng);
        }
        p
    }

    #[test]
    fn linear_form_identity_case() {
        let p = InterventionParams::identity_init(3, 8, GateMode::Constant, 4).unwrap();
        let mut rng = seeded_rng(9);
        for _ in 0..10 {
            let h = Tensor::randn(vec![8], 1.0, &mut rng);
            let out = reft_apply(&p, h.data()).unwrap();
            assert_eq!(out, h.data(), "identity-initialized operator must be exact");
        }
    }

    #[test]
    fn linear_form_hand_example() {
        // r=1, d=2, R=[1,0], A=[0,0], b=(5), h=(0,0) → (5,0).
        let p = InterventionParams {
            rank: 1,
            dim: 2,
            gate_mode: GateMode::Constant,
            basis: Tensor::from_rows(&[vec![1.0, 0.0]]),
            predictor: Tensor::from_rows(&[vec![0.0, 0.0]]),
            offset: Tensor::vector(vec![5.0]),
            gate_w: None,
            gate_b: None,
        };
        assert_eq!(reft_apply(&p, &[0.0, 0.0]).unwrap(), vec![5.0, 0.0]);
    }

    #[test]
    fn linear_form_matches_dense_decomposition() {
        // (I + Rᵀ(A−R))h + Rᵀb computed with explicit dense matrices.
        let p = random_params(3, 8, GateMode::Constant, 17);
        let mut rng = seeded_rng(18);
        for _ in 0..20 {
            let h = Tensor::randn(vec![8], 1.0, &mut rng);
            let got = reft_apply(&p, h.data()).unwrap();

            let rt = p.basis.transpose();
            let a_minus_r = Tensor::new(
                vec![3, 8],
                p.predictor
                    .data()
                    .iter()
                    .zip(p.basis.data())
                    .map(|(a, r)| a - r)
                    .collect(),
            )
            .unwrap();
            let weight = matmul(&rt, &a_minus_r).unwrap(); // d×d H
            let hh = matvec(&weight, h.data()).unwrap();
            let rb = matvec(&rt, p.offset.data()).unwrap();
            for i in 0..8 {
                let expect = h.data()[i] + hh[i] + rb[i];
                assert!((got[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_weights_zero_params_give_half() {
        let p = InterventionParams::identity_init(4, 6, GateMode::PerBasis, 3).unwrap();
        let h = vec![0.3; 6];
        let g = gate_weights(&p, &h).unwrap();
        assert_eq!(g.w, vec![0.5; 4]);
    }

    #[test]
    fn gate_weights_saturate() {
        let mut p = InterventionParams::identity_init(2, 4, GateMode::PerBasis, 3).unwrap();
        p.gate_b = Some(Tensor::vector(vec![-50.0, -50.0]));
        let g = gate_weights(&p, &[0.0; 4]).unwrap();
        assert!(g.w.iter().all(|&w| w < 1e-20));
    }

    #[test]
    fn gate_weights_match_direct_sigmoid() {
        let p = random_params(3, 5, GateMode::PerBasis, 29);
        let mut rng = seeded_rng(30);
        let h = Tensor::randn(vec![5], 1.0, &mut rng);
        let g = gate_weights(&p, h.data()).unwrap();
        let u = p.gate_w.as_ref().unwrap();
        let c = p.gate_b.as_ref().unwrap();
        for k in 0..3 {
            let z: f64 = dot(u.row(k), h.data()) + c.data()[k];
            let expect = 1.0 / (1.0 + (-z).exp());
            assert!((g.w[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_gates_reduce_to_linear_form() {
        let p = random_params(4, 9, GateMode::Constant, 55);
        let mut rng = seeded_rng(56);
        for _ in 0..50 {
            let h = Tensor::randn(vec![9], 1.0, &mut rng);
            let a = baft_apply(&p, h.data()).unwrap();
            let b = reft_apply(&p, h.data()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn saturated_low_gates_leave_input() {
        let mut p = random_params(3, 6, GateMode::PerBasis, 70);
        p.gate_w = Some(Tensor::zeros(vec![3, 6]));
        p.gate_b = Some(Tensor::vector(vec![-1e6; 3]));
        let h = vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0];
        let out = baft_apply(&p, &h).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn summation_matches_matrix_form() {
        let p = random_params(2, 3, GateMode::PerBasis, 81);
        let mut rng = seeded_rng(82);
        for _ in 0..100 {
            let h = Tensor::randn(vec![3], 1.0, &mut rng);
            let a = baft_apply(&p, h.data()).unwrap();
            let b = baft_matrix_form(&p, h.data()).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matrix_form_single_active_basis_matches_rank_one() {
        // w = (1, 0): only basis row 0 contributes.
        let p = random_params(2, 5, GateMode::Constant, 91);
        let mut rng = seeded_rng(92);
        let h = Tensor::randn(vec![5], 1.0, &mut rng);
        let got = baft_apply_with_weights(&p, h.data(), &[1.0, 0.0]).unwrap();
        let coeff = dot(p.predictor.row(0), h.data()) + p.offset.data()[0]
            - dot(p.basis.row(0), h.data());
        for i in 0..5 {
            let expect = h.data()[i] + coeff * p.basis.row(0)[i];
            assert!((got[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn update_stays_in_rowspace() {
        let p = random_params(3, 8, GateMode::PerBasis, 101);
        let mut rng = seeded_rng(102);
        for _ in 0..20 {
            let h = Tensor::randn(vec![8], 1.0, &mut rng);
            let out = baft_apply(&p, h.data()).unwrap();
            let delta: Vec<f64> = out.iter().zip(h.data()).map(|(a, b)| a - b).collect();
            // (I − RᵀR)·delta must vanish.
            let proj = matvec(&p.basis, &delta).unwrap();
            let back = matvec(&p.basis.transpose(), &proj).unwrap();
            for (d, b) in delta.iter().zip(&back) {
                assert!((d - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_scaling_scales_update_linearly() {
        let p = random_params(4, 7, GateMode::PerBasis, 113);
        let mut rng = seeded_rng(114);
        let h = Tensor::randn(vec![7], 1.0, &mut rng);
        let base_w = gate_weights(&p, h.data()).unwrap().w;
        let full = baft_apply_with_weights(&p, h.data(), &base_w).unwrap();
        for &lambda in &[0.0, 0.25, 0.5, 1.0] {
            let scaled_w: Vec<f64> = base_w.iter().map(|w| lambda * w).collect();
            let out = baft_apply_with_weights(&p, h.data(), &scaled_w).unwrap();
            for i in 0..7 {
                let expect = h.data()[i] + lambda * (full[i] - h.data()[i]);
                assert!((out[i] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = InterventionParams::identity_init(2, 4, GateMode::PerBasis, 1).unwrap();
        assert!(reft_apply(&p, &[1.0, 2.0]).is_err());
        assert!(baft_apply(&p, &[1.0, 2.0]).is_err());
        assert!(gate_weights(&p, &[1.0, 2.0]).is_err());
        assert!(baft_matrix_form(&p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tape_application_matches_plain_apply() {
        for mode in [GateMode::Constant, GateMode::Scalar, GateMode::PerBasis] {
            let p = random_params(3, 6, mode, 131);
            let mut rng = seeded_rng(132);
            let x = Tensor::randn(vec![5, 6], 1.0, &mut rng);
            let positions = vec![1, 3, 4];

            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let staged = stage_on_tape(&mut tape, &p, false);
            let applied = apply_on_tape(&mut tape, xv, &staged, &positions);
            let out = tape.value(applied.output).clone();

            for row in 0..5 {
                let expect = if positions.contains(&row) {
                    baft_apply(&p, x.row(row)).unwrap()
                } else {
                    x.row(row).to_vec()
                };
                for (a, b) in out.row(row).iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12, "mode {mode:?} row {row}");
                }
            }

            // Untouched rows must be bit-identical.
            for row in 0..5 {
                if !positions.contains(&row) {
                    assert_eq!(out.row(row), x.row(row));
                }
            }

            // Captured gates agree with the plain gate computation.
            let gates = tape.value(applied.gates).clone();
            for (i, &pos) in positions.iter().enumerate() {
                let expect = gate_weights(&p, x.row(pos)).unwrap();
                for (a, b) in gates.row(i).iter().zip(&expect.w) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn random_gate_weights_are_probabilities() {
        let mut rng = seeded_rng(555);
        for seed in 0..20 {
            let p = random_params(3, 5, GateMode::PerBasis, 1000 + seed);
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g = gate_weights(&p, &h).unwrap();
            assert!(g.w.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }
}
