//! White-noise-on-acceleration motion prior.
//!
//! Between two knots the pose is written in local coordinates around the
//! earlier knot, `T(t) = T(t_k)·exp(ξ_k(t)^)`, and the stacked local state
//! `γ = [ξ; ξ̇]` follows a linear time-invariant SDE driven by white noise on
//! the second derivative. Its closed-form transition and noise matrices give
//! a binary factor between consecutive knots.

use std::ops::Deref;

use nalgebra::DMatrix;
use nalgebra::DVector;

use crate::error::{arg_err, config_err, Result};
use crate::lie::{
    right_jacobian, right_jacobian_inv, right_jacobian_inv_times_derivative, Dim, Pose, Tangent,
};

/// Default magnitude bound for a twist accepted through [`Twist::new`].
pub const TWIST_SANITY_BOUND: f64 = 100.0;

/// Body-centric generalized velocity `[v; ω]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Twist(DVector<f64>);

impl Twist {
    pub fn new(v: DVector<f64>) -> Result<Self> {
        Self::with_bound(v, TWIST_SANITY_BOUND)
    }

    pub fn with_bound(v: DVector<f64>, bound: f64) -> Result<Self> {
        if Dim::from_dof(v.len()).is_none() {
            return Err(config_err(format!(
                "twist must have 3 or 6 entries, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(arg_err("twist has non-finite entries"));
        }
        if v.norm() >= bound {
            return Err(arg_err(format!(
                "twist magnitude {} exceeds bound {bound}",
                v.norm()
            )));
        }
        Ok(Twist(v))
    }

    pub fn zeros(dim: Dim) -> Self {
        Twist(DVector::zeros(dim.dof()))
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

impl Deref for Twist {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// One trajectory node: pose and twist at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct StateKnot {
    pub time: f64,
    pub pose: Pose,
    pub twist: Twist,
}

impl StateKnot {
    pub fn new(time: f64, pose: Pose, twist: Twist) -> Result<Self> {
        if twist.len() != pose.dim().dof() {
            return Err(config_err("twist and pose dimensions disagree"));
        }
        if !time.is_finite() {
            return Err(arg_err("knot time must be finite"));
        }
        Ok(StateKnot { time, pose, twist })
    }

    pub fn dim(&self) -> Dim {
        self.pose.dim()
    }

    /// Right-perturbs the knot by `[δξ; δϖ]`.
    pub fn perturbed(&self, delta: &DVector<f64>) -> StateKnot {
        let d = self.dim().dof();
        let xi = Tangent::new(delta.rows(0, d).into_owned()).expect("state perturbation size");
        StateKnot {
            time: self.time,
            pose: self.pose.retract(&xi),
            twist: Twist(&self.twist.0 + delta.rows(d, d)),
        }
    }

    /// `[log(self.pose⁻¹·other.pose); other.twist − self.twist]`, the inverse of [`Self::perturbed`].
    pub fn difference(&self, other: &StateKnot) -> DVector<f64> {
        let d = self.dim().dof();
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d)
            .copy_from(self.pose.between(&other.pose).log().as_vector());
        out.rows_mut(d, d)
            .copy_from(&(&other.twist.0 - &self.twist.0));
        out
    }
}

/// Power-spectral density `Qc` of the white acceleration noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    qc: DMatrix<f64>,
    qc_inv: DMatrix<f64>,
}

impl PriorParams {
    pub fn new(qc: DMatrix<f64>) -> Result<Self> {
        let (r, c) = qc.shape();
        if r != c || Dim::from_dof(r).is_none() {
            return Err(config_err(format!("Qc must be 3x3 or 6x6, got {r}x{c}")));
        }
        if (&qc - qc.transpose()).amax() > 1e-12 * qc.amax().max(1.0) {
            return Err(config_err("Qc must be symmetric"));
        }
        let min_eig = qc.clone().symmetric_eigen().eigenvalues.min();
        if !(min_eig > 0.0) {
            return Err(config_err("Qc must be positive definite"));
        }
        let qc_inv = qc
            .clone()
            .try_inverse()
            .ok_or_else(|| config_err("Qc is singular"))?;
        Ok(PriorParams { qc, qc_inv })
    }

    /// `Qc = q·I`.
    pub fn isotropic(dim: Dim, q: f64) -> Result<Self> {
        let d = dim.dof();
        Self::new(DMatrix::identity(d, d) * q)
    }

    pub fn diagonal(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    pub fn qc(&self) -> &DMatrix<f64> {
        &self.qc
    }

    pub fn dim(&self) -> Dim {
        Dim::from_dof(self.qc.nrows()).unwrap()
    }
}

/// Stacked local variable `γ = [ξ; ξ̇]` of one knot's neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub xi: Tangent,
    pub xi_dot: DVector<f64>,
}

impl LocalState {
    pub fn stacked(&self) -> DVector<f64> {
        let d = self.xi_dot.len();
        let mut g = DVector::zeros(2 * d);
        g.rows_mut(0, d).copy_from(self.xi.as_vector());
        g.rows_mut(d, d).copy_from(&self.xi_dot);
        g
    }
}

/// Expresses `knot` in the local coordinates of `reference`.
pub fn to_local(reference: &StateKnot, knot: &StateKnot) -> LocalState {
    let xi = reference.pose.between(&knot.pose).log();
    let xi_dot = right_jacobian_inv(&xi) * knot.twist.vector();
    LocalState { xi, xi_dot }
}

/// Maps a local state around `reference` back to a pose and body twist.
pub fn from_local(reference: &StateKnot, local: &LocalState, time: f64) -> StateKnot {
    let pose = reference.pose.retract(&local.xi);
    let twist = right_jacobian(&local.xi) * &local.xi_dot;
    StateKnot {
        time,
        pose,
        twist: Twist(twist),
    }
}

/// Transition matrix `Φ(t + dt, t) = [[I, dt·I], [0, I]]`.
pub fn transition(dim: Dim, dt: f64) -> Result<DMatrix<f64>> {
    if !(dt >= 0.0) {
        return Err(arg_err(format!(
            "transition interval must be non-negative, got {dt}"
        )));
    }
    let d = dim.dof();
    let mut phi = DMatrix::identity(2 * d, 2 * d);
    for i in 0..d {
        phi[(i, d + i)] = dt;
    }
    Ok(phi)
}

/// Process-noise covariance accumulated over `dt`.
pub fn process_noise(dt: f64, params: &PriorParams) -> Result<DMatrix<f64>> {
    check_interval(dt)?;
    let qc = params.qc();
    let d = qc.nrows();
    let mut q = DMatrix::zeros(2 * d, 2 * d);
    q.view_mut((0, 0), (d, d))
        .copy_from(&(qc * (dt.powi(3) / 3.0)));
    q.view_mut((0, d), (d, d))
        .copy_from(&(qc * (dt * dt / 2.0)));
    q.view_mut((d, 0), (d, d))
        .copy_from(&(qc * (dt * dt / 2.0)));
    q.view_mut((d, d), (d, d)).copy_from(&(qc * dt));
    Ok(q)
}

/// Closed-form inverse of [`process_noise`].
pub fn process_noise_inv(dt: f64, params: &PriorParams) -> Result<DMatrix<f64>> {
    check_interval(dt)?;
    let qc_inv = &params.qc_inv;
    let d = qc_inv.nrows();
    let mut w = DMatrix::zeros(2 * d, 2 * d);
    w.view_mut((0, 0), (d, d))
        .copy_from(&(qc_inv * (12.0 / dt.powi(3))));
    w.view_mut((0, d), (d, d))
        .copy_from(&(qc_inv * (-6.0 / (dt * dt))));
    w.view_mut((d, 0), (d, d))
        .copy_from(&(qc_inv * (-6.0 / (dt * dt))));
    w.view_mut((d, d), (d, d)).copy_from(&(qc_inv * (4.0 / dt)));
    Ok(w)
}

fn check_interval(dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(arg_err(format!(
            "prior interval must be positive, got {dt}"
        )));
    }
    Ok(())
}

fn check_pair(prev: &StateKnot, next: &StateKnot) -> Result<f64> {
    if prev.dim() != next.dim() {
        return Err(config_err("knots have different dimensions"));
    }
    let dt = next.time - prev.time;
    if !(dt > 0.0) {
        return Err(arg_err(format!(
            "knot times must be strictly increasing ({} then {})",
            prev.time, next.time
        )));
    }
    Ok(dt)
}

/// Motion-prior error between consecutive knots:
/// `[Δt·ϖ₁ − ξ; ϖ₁ − J_r⁻¹(ξ)·ϖ₂]` with `ξ = log(T₁⁻¹·T₂)`.
pub fn prior_error(prev: &StateKnot, next: &StateKnot) -> Result<DVector<f64>> {
    let dt = check_pair(prev, next)?;
    let xi = prev.pose.between(&next.pose).log();
    Ok(error_from_local(
        dt,
        &xi,
        prev.twist.vector(),
        next.twist.vector(),
    ))
}

fn error_from_local(dt: f64, xi: &Tangent, w1: &DVector<f64>, w2: &DVector<f64>) -> DVector<f64> {
    let d = w1.len();
    let mut e = DVector::zeros(2 * d);
    e.rows_mut(0, d).copy_from(&(w1 * dt - xi.as_vector()));
    e.rows_mut(d, d)
        .copy_from(&(w1 - right_jacobian_inv(xi) * w2));
    e
}

/// `½·eᵀ·Q(Δt)⁻¹·e` without forming Jacobians.
pub fn prior_cost(prev: &StateKnot, next: &StateKnot, params: &PriorParams) -> Result<f64> {
    let e = prior_error(prev, next)?;
    let dt = next.time - prev.time;
    let d = e.len() / 2;
    let (e1, e2) = (e.rows(0, d), e.rows(d, d));
    let w = &params.qc_inv;
    let (w1, w2) = (w * e1, w * e2);
    Ok(0.5
        * (12.0 / dt.powi(3) * e1.dot(&w1) - 12.0 / (dt * dt) * e1.dot(&w2)
            + 4.0 / dt * e2.dot(&w2)))
}

/// Linearized, weighted motion-prior factor.
#[derive(Debug, Clone)]
pub struct PriorFactor {
    pub error: DVector<f64>,
    /// Jacobian w.r.t. the earlier knot's perturbation `[δξ; δϖ]`.
    pub jac_prev: DMatrix<f64>,
    /// Jacobian w.r.t. the later knot's perturbation.
    pub jac_next: DMatrix<f64>,
    /// `Q(Δt)⁻¹`.
    pub information: DMatrix<f64>,
}

impl PriorFactor {
    /// `½·eᵀ·Q(Δt)⁻¹·e`.
    pub fn cost(&self) -> f64 {
        0.5 * self.error.dot(&(&self.information * &self.error))
    }

    /// `Lᵀ·e` where `L·Lᵀ = Q(Δt)⁻¹`.
    pub fn whitened_error(&self) -> Result<DVector<f64>> {
        let chol = self.information.clone().cholesky().ok_or_else(|| {
            crate::Error::Numerical("prior information is not positive definite".into())
        })?;
        Ok(chol.l().transpose() * &self.error)
    }
}

/// Error, analytic Jacobians and information of the prior between two knots.
pub fn prior_factor(
    prev: &StateKnot,
    next: &StateKnot,
    params: &PriorParams,
) -> Result<PriorFactor> {
    let dt = check_pair(prev, next)?;
    if params.dim() != prev.dim() {
        return Err(config_err(
            "prior parameters and knots disagree on dimension",
        ));
    }
    let d = prev.dim().dof();
    let xi = prev.pose.between(&next.pose).log();
    let w1 = prev.twist.vector();
    let w2 = next.twist.vector();
    let error = error_from_local(dt, &xi, w1, w2);

    let jinv = right_jacobian_inv(&xi);
    let jlinv = right_jacobian_inv(&-&xi);
    let dj = right_jacobian_inv_times_derivative(&xi, w2);
    let eye = DMatrix::<f64>::identity(d, d);

    let mut jac_prev = DMatrix::zeros(2 * d, 2 * d);
    jac_prev.view_mut((0, 0), (d, d)).copy_from(&jlinv);
    jac_prev.view_mut((0, d), (d, d)).copy_from(&(&eye * dt));
    jac_prev.view_mut((d, 0), (d, d)).copy_from(&(&dj * &jlinv));
    jac_prev.view_mut((d, d), (d, d)).copy_from(&eye);

    let mut jac_next = DMatrix::zeros(2 * d, 2 * d);
    jac_next.view_mut((0, 0), (d, d)).copy_from(&-&jinv);
    jac_next.view_mut((d, 0), (d, d)).copy_from(&-(&dj * &jinv));
    jac_next.view_mut((d, d), (d, d)).copy_from(&-&jinv);

    Ok(PriorFactor {
        error,
        jac_prev,
        jac_next,
        information: process_noise_inv(dt, params)?,
    })
}

/// Posterior-mean interpolation between two knots at time `tau`.
pub fn interpolate(
    prev: &StateKnot,
    next: &StateKnot,
    tau: f64,
    params: &PriorParams,
) -> Result<StateKnot> {
    let dt = check_pair(prev, next)?;
    if !(tau >= prev.time && tau <= next.time) {
        return Err(arg_err(format!(
            "interpolation time {tau} outside [{}, {}]",
            prev.time, next.time
        )));
    }
    if tau == prev.time {
        return Ok(prev.clone());
    }
    let dim = prev.dim();
    let d = dim.dof();
    let s = tau - prev.time;

    let g1 = LocalState {
        xi: Tangent::zeros(dim),
        xi_dot: prev.twist.vector().clone(),
    }
    .stacked();
    let g2 = to_local(prev, next).stacked();

    let psi = process_noise(s, params)?
        * transition(dim, next.time - tau)?.transpose()
        * process_noise_inv(dt, params)?;
    let lambda = transition(dim, s)? - &psi * transition(dim, dt)?;
    let g = lambda * g1 + psi * g2;

    let local = LocalState {
        xi: Tangent::new(g.rows(0, d).into_owned())?,
        xi_dot: g.rows(d, d).into_owned(),
    };
    Ok(from_local(prev, &local, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_knot(rng: &mut ChaCha8Rng, dim: Dim, time: f64) -> StateKnot {
        let d = dim.dof();
        let xi = Tangent::new(DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5))).unwrap();
        let twist = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        StateKnot::new(time, Pose::exp(&xi), Twist::new(twist).unwrap()).unwrap()
    }

    fn constant_velocity_pair(dim: Dim, dt: f64) -> (StateKnot, StateKnot) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prev = random_knot(&mut rng, dim, 1.0);
        let step = Tangent::new(prev.twist.vector() * dt).unwrap();
        let next = StateKnot::new(1.0 + dt, prev.pose.retract(&step), prev.twist.clone()).unwrap();
        (prev, next)
    }

    #[test]
    fn transition_basics() {
        let dim = Dim::Three;
        assert_eq!(transition(dim, 0.0).unwrap(), DMatrix::identity(12, 12));
        let prod = transition(dim, 2.0).unwrap() * transition(dim, 3.0).unwrap();
        assert_eq!(prod, transition(dim, 5.0).unwrap());
        let half = transition(Dim::Two, 0.5).unwrap();
        assert_eq!(
            half.view((0, 3), (3, 3)).into_owned(),
            DMatrix::identity(3, 3) * 0.5
        );
        assert!(transition(dim, -1.0).is_err());
    }

    #[test]
    fn process_noise_block_structure() {
        let p = PriorParams::isotropic(Dim::Two, 1.0).unwrap();
        let q = process_noise(1.0, &p).unwrap();
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((q.view((0, 0), (3, 3)) - &i / 3.0).amax() < 1e-15);
        assert!((q.view((0, 3), (3, 3)) - &i / 2.0).amax() < 1e-15);
        assert!((q.view((3, 3), (3, 3)) - &i).amax() < 1e-15);
        assert!(process_noise(0.0, &p).is_err());
    }

    #[test]
    fn process_noise_is_spd_and_inverse_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for dt in [1e-3, 1.0, 10.0] {
            let diag: Vec<f64> = (0..6).map(|_| rng.random_range(0.01..5.0)).collect();
            let p = PriorParams::diagonal(&diag).unwrap();
            let q = process_noise(dt, &p).unwrap();
            assert!(q.clone().cholesky().is_some());
            let eig = q.clone().symmetric_eigen().eigenvalues;
            assert!(eig.min() > 0.0);
            let prod = &q * process_noise_inv(dt, &p).unwrap();
            assert!((prod - DMatrix::identity(12, 12)).amax() < 1e-8);
        }
    }

    #[test]
    fn covariance_propagation_from_zero() {
        let p = PriorParams::isotropic(Dim::Two, 0.3).unwrap();
        let dt = 0.7;
        let phi = transition(Dim::Two, dt).unwrap();
        let propagated =
            &phi * DMatrix::<f64>::zeros(6, 6) * phi.transpose() + process_noise(dt, &p).unwrap();
        assert_eq!(propagated, process_noise(dt, &p).unwrap());
        // Two steps compose to one: Φ(b)Q(a)Φ(b)ᵀ + Q(b) = Q(a + b).
        let (a, b) = (0.4, 0.9);
        let phib = transition(Dim::Two, b).unwrap();
        let two = &phib * process_noise(a, &p).unwrap() * phib.transpose()
            + process_noise(b, &p).unwrap();
        assert!((two - process_noise(a + b, &p).unwrap()).amax() < 1e-12);
    }

    #[test]
    fn error_vanishes_for_constant_velocity() {
        for dim in [Dim::Two, Dim::Three] {
            let (prev, next) = constant_velocity_pair(dim, 0.8);
            assert!(prior_error(&prev, &next).unwrap().amax() < 1e-10);
            let p = PriorParams::isotropic(dim, 0.1).unwrap();
            let f = prior_factor(&prev, &next, &p).unwrap();
            assert!(f.whitened_error().unwrap().amax() < 1e-8);
        }
        let still =
            StateKnot::new(0.0, Pose::identity(Dim::Three), Twist::zeros(Dim::Three)).unwrap();
        let later = StateKnot {
            time: 2.0,
            ..still.clone()
        };
        assert_eq!(prior_error(&still, &later).unwrap().amax(), 0.0);
    }

    #[test]
    fn each_zero_condition_is_necessary() {
        let (prev, next) = constant_velocity_pair(Dim::Three, 0.5);
        // Same pose transport but a different end twist breaks only the second block.
        let mut bent = next.clone();
        bent.twist = Twist::new(next.twist.vector() * 1.1).unwrap();
        let e = prior_error(&prev, &bent).unwrap();
        assert!(e.rows(0, 6).amax() < 1e-10);
        assert!(e.rows(6, 6).amax() > 1e-3);
        // Shifted end pose with transported twist breaks the first block.
        let mut moved = next.clone();
        moved.pose = next
            .pose
            .retract(&Tangent::from_slice(&[0.1, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
        let e = prior_error(&prev, &moved).unwrap();
        assert!(e.rows(0, 6).amax() > 1e-3);
    }

    #[test]
    fn non_increasing_time_is_rejected() {
        let (prev, next) = constant_velocity_pair(Dim::Two, 0.5);
        assert!(prior_error(&next, &prev).is_err());
        assert!(prior_error(&prev, &prev).is_err());
    }

    // Central finite differences over every state block.
    #[test]
    fn prior_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for i in 0..100 {
            let dim = if i % 2 == 0 { Dim::Two } else { Dim::Three };
            let d = dim.dof();
            let prev = random_knot(&mut rng, dim, 0.0);
            let dt = rng.random_range(0.05..2.0);
            let next = random_knot(&mut rng, dim, dt);
            let p = PriorParams::isotropic(dim, 0.5).unwrap();
            let f = prior_factor(&prev, &next, &p).unwrap();
            for (which, analytic) in [(0, &f.jac_prev), (1, &f.jac_next)] {
                let mut numeric = DMatrix::zeros(2 * d, 2 * d);
                for k in 0..2 * d {
                    let mut delta = DVector::zeros(2 * d);
                    delta[k] = h;
                    let (ep, em) = if which == 0 {
                        (
                            prior_error(&prev.perturbed(&delta), &next).unwrap(),
                            prior_error(&prev.perturbed(&-&delta), &next).unwrap(),
                        )
                    } else {
                        (
                            prior_error(&prev, &next.perturbed(&delta)).unwrap(),
                            prior_error(&prev, &next.perturbed(&-&delta)).unwrap(),
                        )
                    };
                    numeric.set_column(k, &((ep - em) / (2.0 * h)));
                }
                let rel = (&numeric - analytic).norm() / analytic.norm();
                assert!(rel < 1e-4, "{dim} block {which}: relative error {rel:e}");
            }
        }
    }

    #[test]
    fn factor_cost_is_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let prev = random_knot(&mut rng, Dim::Three, 0.0);
        let next = random_knot(&mut rng, Dim::Three, 0.3);
        let p = PriorParams::isotropic(Dim::Three, 2.0).unwrap();
        let f = prior_factor(&prev, &next, &p).unwrap();
        let q = process_noise(0.3, &p).unwrap();
        let direct = 0.5 * (f.error.transpose() * q.try_inverse().unwrap() * &f.error)[(0, 0)];
        assert!((f.cost() - direct).abs() < 1e-9 * direct.abs().max(1.0));
        assert!((&f.information - f.information.transpose()).amax() < 1e-9);
        let white = f.whitened_error().unwrap();
        assert!((0.5 * white.norm_squared() - f.cost()).abs() < 1e-9 * f.cost().max(1.0));
    }

    #[test]
    fn interpolation_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for dim in [Dim::Two, Dim::Three] {
            let prev = random_knot(&mut rng, dim, 2.0);
            let next = random_knot(&mut rng, dim, 2.6);
            let p = PriorParams::isotropic(dim, 0.1).unwrap();
            assert_eq!(interpolate(&prev, &next, 2.0, &p).unwrap(), prev);
            let end = interpolate(&prev, &next, 2.6, &p).unwrap();
            assert!((end.pose.matrix() - next.pose.matrix()).amax() < 1e-9);
            assert!((end.twist.vector() - next.twist.vector()).amax() < 1e-9);
            assert!(interpolate(&prev, &next, 2.7, &p).is_err());
            assert!(interpolate(&prev, &next, 1.9, &p).is_err());
        }
    }

    #[test]
    fn interpolation_follows_constant_velocity() {
        for dim in [Dim::Two, Dim::Three] {
            let dt = 0.9;
            let (prev, next) = constant_velocity_pair(dim, dt);
            let p = PriorParams::isotropic(dim, 0.1).unwrap();
            let mid = interpolate(&prev, &next, prev.time + dt / 2.0, &p).unwrap();
            let expected = prev
                .pose
                .retract(&Tangent::new(prev.twist.vector() * (dt / 2.0)).unwrap());
            assert!((mid.pose.matrix() - expected.matrix()).amax() < 1e-9);
            assert!((mid.twist.vector() - prev.twist.vector()).amax() < 1e-9);
        }
    }

    #[test]
    fn local_state_at_own_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let k = random_knot(&mut rng, Dim::Three, 0.0);
        let local = to_local(&k, &k);
        assert!(local.xi.as_vector().amax() < 1e-12);
        assert!((&local.xi_dot - k.twist.vector()).amax() < 1e-12);
    }

    #[test]
    fn qc_validation() {
        assert!(PriorParams::diagonal(&[1.0, 1.0, -1.0]).is_err());
        assert!(PriorParams::new(DMatrix::from_row_slice(
            3,
            3,
            &[1., 0.5, 0., 0., 1., 0., 0., 0., 1.]
        ))
        .is_err());
        assert!(Twist::new(DVector::from_element(3, 200.0)).is_err());
        assert!(Twist::new(DVector::from_element(3, f64::NAN)).is_err());
    }
}
