//! Numerical verification of the editing-locality trade-off for the linear
//! intervention operator.
//!
//! The claim under test: suppose an operator Φ(h) = h + Rᵀ(A·h + b − R·h)
//! moves an old representation h0 to a target t = Φ(h0), and is general in
//! the sense that every h in the stable ball B(h0, ε(h0)) lands within ε(t)
//! of t. Then any irrelevant representation whose own stable radius is below
//!
//!     (‖t − h0‖ − (ε(t) + ε(h0))) / (ε(t) + 2·ε(h0)) · ε(h0)
//!
//! and which sits at distance ε(h_ir) + ε(h0) from h0 gets pushed out of its
//! own stable ball: ‖Φ(h_ir) − h_ir‖ ≥ ε(h_ir).
//!
//! This module constructs operators satisfying the hypotheses, Monte-Carlo
//! samples the constraint sphere, and checks every inequality of the
//! derivation with explicit slack. The bound check is the for-all guarantee;
//! sampling corroborates it.

use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::{reft_apply, GateMode, InterventionParams};
use crate::numerics::tensor::matmul;
use crate::numerics::{matvec, orthonormalize, seeded_rng, spectral_norm, SeededRng, Tensor};

/// Largest irrelevant-ball radius for which the locality violation is
/// guaranteed: (dist − (ε_t + ε_0)) / (ε_t + 2·ε_0) · ε_0.
pub fn radius_bound(eps0: f64, epst: f64, dist: f64) -> Result<f64> {
    if eps0 <= 0.0 || epst <= 0.0 {
        return Err(Error::InvalidArgument("stable-ball radii must be positive".into()));
    }
    if dist < eps0 + epst {
        return Err(Error::InvalidArgument(format!(
            "stable balls overlap: distance {dist} < {eps0} + {epst}"
        )));
    }
    Ok((dist - (epst + eps0)) / (epst + 2.0 * eps0) * eps0)
}

/// A constructed operator together with the quantities the theorem talks
/// about.
#[derive(Debug, Clone)]
pub struct TheoremInstance {
    pub h0: Vec<f64>,
    pub target: Vec<f64>,
    pub eps0: f64,
    pub epst: f64,
    pub eps_ir: f64,
    pub params: InterventionParams,
}

impl TheoremInstance {
    pub fn dist(&self) -> f64 {
        l2_diff(&self.target, &self.h0)
    }

    /// H = Rᵀ(A − R), the linear part of the update.
    pub fn h_matrix(&self) -> Tensor {
        let diff = Tensor::new(
            self.params.predictor.shape().to_vec(),
            self.params
                .predictor
                .data()
                .iter()
                .zip(self.params.basis.data())
                .map(|(a, r)| a - r)
                .collect(),
        )
        .expect("shape");
        matmul(&self.params.basis.transpose(), &diff).expect("shape")
    }

    pub fn apply(&self, h: &[f64]) -> Vec<f64> {
        reft_apply(&self.params, h).expect("instance dimensions agree")
    }

    /// Lower bound on the displacement of any irrelevant input on the
    /// constraint sphere: dist − (ε_t + ε_0)·(dist + ε_0)/(2·ε_0 + ε_t).
    pub fn analytic_displacement_bound(&self) -> f64 {
        let d = self.dist();
        d - (self.epst + self.eps0) * (d + self.eps0) / (2.0 * self.eps0 + self.epst)
    }
}

/// Builds an operator satisfying the theorem's hypotheses:
/// * R is a seeded orthonormal basis;
/// * t = h0 + dist·u with u a unit vector in the row space of R, mixed from
///   `dir_coeffs`;
/// * A = R + δ·Δ with δ shrunk until σ_max(I + H) fits under ε_t/ε_0
///   (with margin, so sampled generality holds strictly);
/// * b solves Φ(h0) = t through the orthonormality of R.
///
/// The irrelevant-ball radius defaults to 0.8 of the violation bound.
pub fn construct_instance(
    d: usize,
    r: usize,
    h0: &[f64],
    dir_coeffs: &[f64],
    eps0: f64,
    epst: f64,
    dist: f64,
    seed: u64,
) -> Result<TheoremInstance> {
    if r == 0 || r > d {
        return Err(Error::InvalidArgument(format!("rank must be in 1..={d}, got {r}")));
    }
    if h0.len() != d {
        return Err(Error::ShapeMismatch(format!("h0 has length {}, expected {d}", h0.len())));
    }
    if dir_coeffs.len() != r {
        return Err(Error::ShapeMismatch(format!(
            "direction has {} coefficients, expected {r}",
            dir_coeffs.len()
        )));
    }
    let bound = radius_bound(eps0, epst, dist)?;
    if bound <= 0.0 {
        return Err(Error::InvalidArgument(
            "stable balls touch exactly; no irrelevant radius satisfies the hypotheses".into(),
        ));
    }
    let ratio = epst / eps0;
    if r < d && ratio < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "infeasible: σ_max(I + H) ≥ 1 for rank-deficient subspaces but ε_t/ε_0 = {ratio}"
        )));
    }

    let mut rng = seeded_rng(seed);
    let basis = orthonormalize(&Tensor::randn(vec![r, d], 1.0, &mut rng))?;

    // Unit direction in the row space.
    let mut u = vec![0.0; d];
    for (k, &c) in dir_coeffs.iter().enumerate() {
        for (ui, ri) in u.iter_mut().zip(basis.row(k)) {
            *ui += c * ri;
        }
    }
    let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    if un < 1e-12 {
        return Err(Error::InvalidArgument("direction coefficients are all zero".into()));
    }
    for v in &mut u {
        *v /= un;
    }
    let target: Vec<f64> = h0.iter().zip(&u).map(|(a, b)| a + dist * b).collect();

    // Scale the predictor perturbation until the operator norm fits with
    // margin. Falling back to δ = 0 gives σ_max(I + H) = 1 exactly.
    let perturbation = Tensor::randn(vec![r, d], 1.0, &mut rng);
    let sigma_target = 0.98 * ratio;
    let mut chosen = None;
    if sigma_target > 1.0 + 1e-9 {
        let mut delta = 0.25;
        for _ in 0..120 {
            let predictor = add_scaled(&basis, &perturbation, delta);
            let sigma = sigma_i_plus_h(&basis, &predictor)?;
            if sigma <= sigma_target {
                chosen = Some(predictor);
                break;
            }
            delta *= 0.5;
        }
    }
    let predictor = match chosen {
        Some(p) => p,
        None => basis.clone(),
    };

    // b = R·(t − h0 − H·h0); t − h0 and H·h0 both live in the row space, so
    // Rᵀ·b reproduces their difference exactly.
    let diff = Tensor::new(
        vec![r, d],
        predictor.data().iter().zip(basis.data()).map(|(a, b)| a - b).collect(),
    )?;
    let h_mat = matmul(&basis.transpose(), &diff)?;
    let hh0 = matvec(&h_mat, h0)?;
    let residual: Vec<f64> =
        (0..d).map(|i| target[i] - h0[i] - hh0[i]).collect();
    let offset = Tensor::vector(matvec(&basis, &residual)?);

    let params = InterventionParams {
        rank: r,
        dim: d,
        gate_mode: GateMode::Constant,
        basis,
        predictor,
        offset,
        gate_w: None,
        gate_b: None,
    };
    let instance = TheoremInstance {
        h0: h0.to_vec(),
        target,
        eps0,
        epst,
        eps_ir: 0.8 * bound,
        params,
    };

    // Re-check the construction's own invariants before handing it out.
    let phi_h0 = instance.apply(&instance.h0);
    if l2_diff(&phi_h0, &instance.target) > 1e-9 {
        return Err(Error::Numerical("construction failed: Φ(h0) missed the target".into()));
    }
    let delta_t: Vec<f64> =
        instance.target.iter().zip(&instance.h0).map(|(a, b)| a - b).collect();
    let proj = matvec(&instance.params.basis, &delta_t)?;
    let back = matvec(&instance.params.basis.transpose(), &proj)?;
    if delta_t.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() > 1e-9 {
        return Err(Error::Numerical("construction failed: t − h0 left the row space".into()));
    }
    if instance.dist() < eps0 + epst - 1e-12 {
        return Err(Error::Numerical("construction failed: stable balls overlap".into()));
    }
    Ok(instance)
}

fn add_scaled(base: &Tensor, delta: &Tensor, scale: f64) -> Tensor {
    Tensor::new(
        base.shape().to_vec(),
        base.data().iter().zip(delta.data()).map(|(b, d)| b + scale * d).collect(),
    )
    .expect("shape")
}

fn sigma_i_plus_h(basis: &Tensor, predictor: &Tensor) -> Result<f64> {
    let d = basis.cols();
    let diff = Tensor::new(
        basis.shape().to_vec(),
        predictor.data().iter().zip(basis.data()).map(|(a, b)| a - b).collect(),
    )?;
    let mut m = matmul(&basis.transpose(), &diff)?;
    for i in 0..d {
        m.data_mut()[i * d + i] += 1.0;
    }
    spectral_norm(&m)
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sample_on_sphere(center: &[f64], radius: f64, rng: &mut SeededRng) -> Vec<f64> {
    use rand::Rng as _;
    let mut v: Vec<f64> = (0..center.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return sample_on_sphere(center, radius, rng);
    }
    for x in &mut v {
        *x *= radius / n;
    }
    center.iter().zip(&v).map(|(c, x)| c + x).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralityReport {
    pub samples: usize,
    pub max_deviation: f64,
    pub epst: f64,
    pub sampled_pass: bool,
    pub sigma_i_plus_h: f64,
    /// σ_max(I + H)·ε_0 ≤ ε_t, the sufficient analytic condition.
    pub analytic_pass: bool,
}

/// Samples the stable ball of h0 (half in the interior, half on the
/// boundary sphere) and reports the worst deviation of Φ(h) from the target.
pub fn check_generality(
    instance: &TheoremInstance,
    n_samples: usize,
    seed: u64,
) -> Result<GeneralityReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    use rand::Rng as _;
    let mut rng = seeded_rng(seed);
    let d = instance.h0.len();
    let mut max_dev = 0.0f64;
    for i in 0..n_samples {
        let radius = if i % 2 == 0 {
            instance.eps0
        } else {
            instance.eps0 * rng.random_range(0.0..1.0f64).powf(1.0 / d as f64)
        };
        let h = sample_on_sphere(&instance.h0, radius, &mut rng);
        let out = instance.apply(&h);
        max_dev = max_dev.max(l2_diff(&out, &instance.target));
    }
    let sigma = sigma_i_plus_h(&instance.params.basis, &instance.params.predictor)?;
    Ok(GeneralityReport {
        samples: n_samples,
        max_deviation: max_dev,
        epst: instance.epst,
        sampled_pass: max_dev < instance.epst,
        sigma_i_plus_h: sigma,
        analytic_pass: sigma * instance.eps0 <= instance.epst,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationReport {
    pub samples: usize,
    pub min_displacement: f64,
    pub eps_ir: f64,
    /// Samples whose displacement fell below ε(h_ir); the theorem demands
    /// zero.
    pub counterexamples: usize,
    pub sigma_i_plus_h: f64,
    pub sigma_h: f64,
    pub radius_bound: f64,
    pub analytic_lower_bound: f64,
}

/// Samples irrelevant representations on the constraint sphere
/// ‖h_ir − h0‖ = ε(h_ir) + ε(h0) and checks that every one is displaced out
/// of its own stable ball.
pub fn verify_locality_violation(
    instance: &TheoremInstance,
    n_samples: usize,
    seed: u64,
) -> Result<ViolationReport> {
    let bound = radius_bound(instance.eps0, instance.epst, instance.dist())?;
    if instance.eps_ir <= 0.0 || instance.eps_ir >= bound {
        return Err(Error::InvalidArgument(format!(
            "irrelevant radius {} outside the theorem's hypothesis (bound {bound})",
            instance.eps_ir
        )));
    }
    let generality = check_generality(instance, 64, seed ^ 0x9e3779b97f4a7c15)?;
    if !generality.analytic_pass {
        return Err(Error::InvalidArgument(
            "generality condition does not hold; the theorem's hypotheses are unmet".into(),
        ));
    }

    let mut rng = seeded_rng(seed);
    let sphere = instance.eps_ir + instance.eps0;
    let mut min_disp = f64::INFINITY;
    let mut counterexamples = 0usize;
    for _ in 0..n_samples {
        let h_ir = sample_on_sphere(&instance.h0, sphere, &mut rng);
        let out = instance.apply(&h_ir);
        let disp = l2_diff(&out, &h_ir);
        min_disp = min_disp.min(disp);
        if disp < instance.eps_ir {
            counterexamples += 1;
        }
    }
    let h_mat = instance.h_matrix();
    Ok(ViolationReport {
        samples: n_samples,
        min_displacement: min_disp,
        eps_ir: instance.eps_ir,
        counterexamples,
        sigma_i_plus_h: generality.sigma_i_plus_h,
        sigma_h: spectral_norm(&h_mat)?,
        radius_bound: bound,
        analytic_lower_bound: instance.analytic_displacement_bound(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

fn check(name: &str, lhs: f64, rhs: f64, tol: f64) -> InequalityCheck {
    // Verifies lhs ≤ rhs with reported slack rhs − lhs.
    let slack = rhs - lhs;
    InequalityCheck { name: name.to_string(), lhs, rhs, slack, pass: slack >= -tol }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProofChainReport {
    pub checks: Vec<InequalityCheck>,
    pub all_pass: bool,
}

/// Checks each inequality of the derivation numerically:
/// 1. non-overlapping stable balls: ε_t + ε_0 ≤ ‖t − h0‖;
/// 2. operator-norm bound from generality: σ_max(I + H) ≤ ε_t/ε_0;
/// 3. norm triangle inequality: σ_max(H) ≤ ε_t/ε_0 + 1;
/// 4. reverse triangle inequality on sampled irrelevant inputs:
///    |‖t − h0‖ − ‖H(h_ir − h0)‖| ≤ ‖Φ(h_ir) − h_ir‖;
/// 5. at the boundary radius the guaranteed displacement meets the
///    irrelevant ball exactly: radius bound ≤ analytic displacement bound
///    (they coincide algebraically).
pub fn verify_proof_chain(
    instance: &TheoremInstance,
    n_samples: usize,
    seed: u64,
) -> Result<ProofChainReport> {
    let dist = instance.dist();
    let ratio = instance.epst / instance.eps0;
    let h_mat = instance.h_matrix();
    let sigma_ih = sigma_i_plus_h(&instance.params.basis, &instance.params.predictor)?;
    let sigma_h = spectral_norm(&h_mat)?;

    let mut checks = vec![
        check("stable_ball_separation", instance.epst + instance.eps0, dist, 1e-12),
        check("generality_operator_norm", sigma_ih, ratio, 1e-9),
        check("triangle_inequality_h_norm", sigma_h, ratio + 1.0, 1e-9),
    ];

    // Reverse-triangle lower bound, sampled on the constraint sphere.
    let mut rng = seeded_rng(seed);
    let sphere = instance.eps_ir + instance.eps0;
    let mut worst = f64::INFINITY;
    let mut worst_pair = (0.0, 0.0);
    for _ in 0..n_samples.max(1) {
        let h_ir = sample_on_sphere(&instance.h0, sphere, &mut rng);
        let out = instance.apply(&h_ir);
        let disp = l2_diff(&out, &h_ir);
        let moved: Vec<f64> = h_ir.iter().zip(&instance.h0).map(|(a, b)| a - b).collect();
        let hh = matvec(&h_mat, &moved)?;
        let lower = (dist - hh.iter().map(|v| v * v).sum::<f64>().sqrt()).abs();
        if disp - lower < worst {
            worst = disp - lower;
            worst_pair = (lower, disp);
        }
    }
    checks.push(check("reverse_triangle_lower_bound", worst_pair.0, worst_pair.1, 1e-9));

    let bound = radius_bound(instance.eps0, instance.epst, dist)?;
    checks.push(check(
        "boundary_displacement_identity",
        bound,
        instance.analytic_displacement_bound(),
        1e-12,
    ));

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(ProofChainReport { checks, all_pass })
}

/// Aggregate result of a randomized instance suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub samples_per_instance: usize,
    pub counterexample_count: usize,
    pub min_displacement_slack: f64,
    pub min_bound_slack: f64,
    pub proof_chain_failures: usize,
    pub generality_failures: usize,
}

/// Constructs `n_instances` randomized instances within the hypotheses and
/// runs the full battery on each.
pub fn run_suite(
    n_instances: usize,
    n_samples: usize,
    d: usize,
    r: usize,
    seed: u64,
) -> Result<SuiteReport> {
    use rand::Rng as _;
    let mut rng = seeded_rng(seed);
    let mut counterexamples = 0usize;
    let mut min_disp_slack = f64::INFINITY;
    let mut min_bound_slack = f64::INFINITY;
    let mut chain_failures = 0usize;
    let mut generality_failures = 0usize;

    for i in 0..n_instances {
        let eps0 = rng.random_range(0.05..0.25);
        let epst = eps0 * rng.random_range(1.05..3.0);
        let dist = (eps0 + epst) * rng.random_range(1.5..4.0);
        let h0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dir: Vec<f64> = (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut instance =
            construct_instance(d, r, &h0, &dir, eps0, epst, dist, seed ^ (i as u64 + 1))?;
        let bound = radius_bound(eps0, epst, dist)?;
        instance.eps_ir = bound * rng.random_range(0.3..0.95);

        let generality = check_generality(&instance, 128, seed ^ (0x5bd1e995 + i as u64))?;
        if !(generality.sampled_pass && generality.analytic_pass) {
            generality_failures += 1;
        }
        let violation =
            verify_locality_violation(&instance, n_samples, seed ^ (0xc2b2ae35 + i as u64))?;
        counterexamples += violation.counterexamples;
        min_disp_slack = min_disp_slack.min(violation.min_displacement - instance.eps_ir);
        min_bound_slack =
            min_bound_slack.min(violation.min_displacement - violation.analytic_lower_bound);
        let chain = verify_proof_chain(&instance, 100, seed ^ (0x27d4eb2f + i as u64))?;
        if !chain.all_pass {
            chain_failures += 1;
        }
    }

    Ok(SuiteReport {
        instances: n_instances,
        samples_per_instance: n_samples,
        counterexample_count: counterexamples,
        min_displacement_slack: min_disp_slack,
        min_bound_slack,
        proof_chain_failures: chain_failures,
        generality_failures,
    })
}
