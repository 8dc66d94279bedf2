//! Risk-sensitive differential dynamic programming.
//!
//! The inner problem minimizes the entropic risk `R_θ(J) = (1/θ) log E[exp(θJ)]`
//! of the trajectory cost under Gaussian process noise `w_t ~ N(0, W_t)`.
//! Around a nominal trajectory the dynamics are linearized and the value
//! function is kept quadratic,
//!
//! ```text
//! V_t(δx) = ½ δxᵀ S_t δx + s_tᵀ δx + s̄_t
//! ```
//!
//! Taking the entropic risk of a quadratic through Gaussian noise inflates
//! the value: with `C = I − θ W^{½} S W^{½}` and `P = W^{½} C⁻¹ W^{½}`,
//!
//! ```text
//! S̃ = S + θ S P S               (= (I + θ S (W⁻¹ − θS)⁻¹) S)
//! s̃ = s + θ S P s
//! c̃ = s̄ − log det(C) / (2θ) + (θ/2) sᵀ P s
//! ```
//!
//! which is finite only while `C` stays positive definite. `P` never forms
//! `W⁻¹`, so covariances with zero entries are handled. At `θ = 0` the
//! inflation vanishes, `c̃ = s̄ + ½ tr(W S)`, and the recursion is the plain
//! iLQG/LQR Riccati recursion.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cost::{CostExpansion, QuadCost};
use crate::dynamics::{Linearization, Plant};
use crate::error::{check_dim, DrocError, Result};

/// Quadratic value function `½δxᵀSδx + sᵀδx + s̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticValue {
    pub s_mat: DMatrix<f64>,
    pub s_vec: DVector<f64>,
    pub s_scalar: f64,
}

impl QuadraticValue {
    /// Terminal value `l_f` expanded around `x_final`.
    pub fn terminal(cost: &QuadCost, x_final: &DVector<f64>) -> Result<Self> {
        Ok(QuadraticValue {
            s_mat: cost.qf.clone(),
            s_vec: &cost.qf * x_final,
            s_scalar: cost.terminal_cost(x_final)?,
        })
    }

    pub fn evaluate(&self, dx: &DVector<f64>) -> f64 {
        0.5 * dx.dot(&(&self.s_mat * dx)) + self.s_vec.dot(dx) + self.s_scalar
    }
}

/// State and control sequences; `states.len() == controls.len() + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn cost(&self, cost: &QuadCost) -> Result<f64> {
        cost.total_cost(
            &self.states[..self.controls.len()],
            &self.controls,
            self.final_state(),
        )
    }
}

/// Affine feedback `u_t = u_nom_t + k_t + K_t (x_t − x_nom_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub feedforward: Vec<DVector<f64>>,
    pub gains: Vec<DMatrix<f64>>,
    pub x_nom: Vec<DVector<f64>>,
    pub u_nom: Vec<DVector<f64>>,
}

impl AffinePolicy {
    pub fn horizon(&self) -> usize {
        self.u_nom.len()
    }

    /// Zero feedforward and feedback around a nominal trajectory.
    pub fn open_loop(nominal: &Trajectory) -> Self {
        let n = nominal.horizon();
        let nx = nominal.states[0].len();
        let nu = nominal.controls.first().map_or(0, |u| u.len());
        AffinePolicy {
            feedforward: vec![DVector::zeros(nu); n],
            gains: vec![DMatrix::zeros(nu, nx); n],
            x_nom: nominal.states.clone(),
            u_nom: nominal.controls.clone(),
        }
    }

    /// Control at step `t` with the feedforward scaled by `alpha`.
    pub fn control(&self, t: usize, x: &DVector<f64>, alpha: f64) -> DVector<f64> {
        &self.u_nom[t] + &self.feedforward[t] * alpha + &self.gains[t] * (x - &self.x_nom[t])
    }
}

/// Risk sensitivity and the per-step diagonal noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskParams {
    pub theta: f64,
    /// Diagonal of `W_t` for each step.
    pub noise_var: Vec<DVector<f64>>,
}

impl RiskParams {
    pub fn new(theta: f64, noise_var: Vec<DVector<f64>>) -> Result<Self> {
        if !(theta >= 0.0 && theta.is_finite()) {
            return Err(DrocError::InvalidConfig(format!(
                "risk sensitivity must be finite and >= 0, got {theta}"
            )));
        }
        if noise_var
            .iter()
            .any(|w| w.iter().any(|&v| !(v >= 0.0 && v.is_finite())))
        {
            return Err(DrocError::InvalidConfig(
                "noise variances must be finite and >= 0".into(),
            ));
        }
        Ok(RiskParams { theta, noise_var })
    }

    pub fn risk_neutral(noise_var: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(0.0, noise_var)
    }

    /// Same covariances at a different risk sensitivity.
    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(theta, self.noise_var.clone())
    }
}

/// Per-step Q-function blocks `H = Q_uu`, `G = Q_ux`, `g = Q_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardAux {
    pub h: DMatrix<f64>,
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    /// Levenberg shift that was needed to factor `H`.
    pub regularization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Relative objective change that counts as converged.
    pub tol: f64,
    pub max_iters: usize,
    pub reg_min: f64,
    pub reg_max: f64,
    /// Number of backtracking halvings tried after the full step.
    pub line_search_halvings: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-6,
            max_iters: 100,
            reg_min: 1e-6,
            reg_max: 1e2,
            line_search_halvings: 10,
        }
    }
}

/// Output of one backward sweep.
#[derive(Debug, Clone)]
pub struct BackwardPass {
    pub policy: AffinePolicy,
    /// Value function at the first step.
    pub value: QuadraticValue,
    pub aux: Vec<BackwardAux>,
    /// `S_t` for t = 0..=n (index n is the terminal value).
    pub value_mats: Vec<DMatrix<f64>>,
    /// Largest `|S − Sᵀ|` seen before symmetrization.
    pub max_asymmetry: f64,
}

struct Inflated {
    s_mat: DMatrix<f64>,
    s_vec: DVector<f64>,
    constant: f64,
}

/// Entropic risk of `V(z + w)`, `w ~ N(0, diag(var))`, as a quadratic in `z`.
fn inflate(next: QuadraticValue, var: &DVector<f64>, theta: f64, step: usize) -> Result<Inflated> {
    let nx = next.s_vec.len();
    if theta == 0.0 {
        let trace: f64 = (0..nx).map(|i| var[i] * next.s_mat[(i, i)]).sum();
        return Ok(Inflated {
            s_mat: next.s_mat,
            s_vec: next.s_vec,
            constant: next.s_scalar + 0.5 * trace,
        });
    }
    let sd = var.map(f64::sqrt);
    // C = I − θ D S D
    let mut c = DMatrix::identity(nx, nx);
    for i in 0..nx {
        for j in 0..nx {
            c[(i, j)] -= theta * sd[i] * next.s_mat[(i, j)] * sd[j];
        }
    }
    let chol = match c.clone().cholesky() {
        Some(ch) => ch,
        None => {
            return Err(DrocError::RiskInfeasible {
                step,
                min_eig: c.symmetric_eigenvalues().min(),
            })
        }
    };
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d: &f64| d.ln()).sum::<f64>();
    // θ S P S = θ (DS)ᵀ C⁻¹ (DS), with P = D C⁻¹ D
    let mut ds = DMatrix::zeros(nx, nx + 1);
    for i in 0..nx {
        for j in 0..nx {
            ds[(i, j)] = sd[i] * next.s_mat[(i, j)];
        }
        ds[(i, nx)] = sd[i] * next.s_vec[i];
    }
    let solved = chol.solve(&ds);
    let cross = ds.tr_mul(&solved);
    let QuadraticValue {
        mut s_mat,
        mut s_vec,
        s_scalar,
    } = next;
    for i in 0..nx {
        for j in 0..nx {
            s_mat[(i, j)] += theta * cross[(i, j)];
        }
        s_vec[i] += theta * cross[(i, nx)];
    }
    let constant = s_scalar - log_det / (2.0 * theta) + 0.5 * theta * cross[(nx, nx)];
    Ok(Inflated {
        s_mat,
        s_vec,
        constant,
    })
}

fn symmetrize(m: &mut DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    asym
}

fn check_sequences(
    nominal: &Trajectory,
    lin: &[Linearization],
    exp: &[CostExpansion],
    rp: &RiskParams,
) -> Result<()> {
    let n = nominal.horizon();
    check_dim("nominal states", n + 1, nominal.states.len())?;
    check_dim("linearization sequence", n, lin.len())?;
    check_dim("cost expansion sequence", n, exp.len())?;
    check_dim("noise covariance sequence", n, rp.noise_var.len())?;
    let nx = nominal.states[0].len();
    for w in &rp.noise_var {
        check_dim("noise covariance", nx, w.len())?;
    }
    Ok(())
}

fn sweep(
    nominal: &Trajectory,
    lin: &[Linearization],
    exp: &[CostExpansion],
    terminal: QuadraticValue,
    rp: &RiskParams,
    reg_min: f64,
    reg_max: f64,
) -> Result<BackwardPass> {
    check_sequences(nominal, lin, exp, rp)?;
    let n = nominal.horizon();
    let nu = exp.first().map_or(0, |e| e.r_vec.len());

    let mut feedforward = vec![DVector::zeros(nu); n];
    let mut gains: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut aux = Vec::with_capacity(n);
    let mut value_mats = vec![terminal.s_mat.clone(); n + 1];
    let mut value = terminal;
    let mut max_asymmetry = 0.0f64;

    for t in (0..n).rev() {
        let Linearization { a, b } = &lin[t];
        let e = &exp[t];
        let inf = inflate(value, &rp.noise_var[t], rp.theta, t)?;

        let sa = &inf.s_mat * a;
        let qx = &e.q_vec + a.tr_mul(&inf.s_vec);
        let g_vec = &e.r_vec + b.tr_mul(&inf.s_vec);
        let qxx = &e.q_mat + a.tr_mul(&sa);
        let g_mat = b.tr_mul(&sa);
        let mut h = &e.r_mat + b.tr_mul(&(&inf.s_mat * b));
        symmetrize(&mut h);

        let mut regularization = 0.0;
        let chol = loop {
            let shifted = &h + DMatrix::identity(nu, nu) * regularization;
            if let Some(ch) = shifted.cholesky() {
                break ch;
            }
            regularization = if regularization == 0.0 {
                reg_min
            } else {
                regularization * 2.0
            };
            if regularization > reg_max {
                return Err(DrocError::SingularH {
                    step: t,
                    max_reg: reg_max,
                });
            }
        };
        let k = -chol.solve(&g_vec);
        let gain = -chol.solve(&g_mat);

        // V_t from Q evaluated at δu = k + K δx, with the unshifted H.
        let hk = &h * &k;
        let hgain = &h * &gain;
        let mut s_mat = &qxx + gain.tr_mul(&hgain) + gain.tr_mul(&g_mat) + g_mat.tr_mul(&gain);
        max_asymmetry = max_asymmetry.max(symmetrize(&mut s_mat));
        let s_vec = &qx + gain.tr_mul(&hk) + gain.tr_mul(&g_vec) + g_mat.tr_mul(&k);
        let s_scalar = e.value + inf.constant + 0.5 * k.dot(&hk) + k.dot(&g_vec);
        if !(s_scalar.is_finite() && s_mat.iter().all(|v| v.is_finite())) {
            return Err(DrocError::NumericalFault("backward pass"));
        }

        value_mats[t] = s_mat.clone();
        value = QuadraticValue {
            s_mat,
            s_vec,
            s_scalar,
        };
        feedforward[t] = k;
        gains.push(gain);
        aux.push(BackwardAux {
            h,
            g_mat,
            g_vec,
            regularization,
        });
    }
    gains.reverse();
    aux.reverse();

    Ok(BackwardPass {
        policy: AffinePolicy {
            feedforward,
            gains,
            x_nom: nominal.states.clone(),
            u_nom: nominal.controls.clone(),
        },
        value,
        aux,
        value_mats,
        max_asymmetry,
    })
}

/// Risk-sensitive backward recursion around `nominal`.
///
/// Returns the affine policy `k_t = −H_t⁻¹ g_t`, `K_t = −H_t⁻¹ G_t` and the
/// value function at the first step. Fails with [`DrocError::RiskInfeasible`]
/// when `I − θ W^{½} S_{t+1} W^{½}` (equivalently `W⁻¹ − θS_{t+1}`) is not
/// positive definite, and with [`DrocError::SingularH`] when `H_t` cannot be
/// made positive definite within the regularization bounds.
pub fn backward_pass(
    nominal: &Trajectory,
    lin: &[Linearization],
    exp: &[CostExpansion],
    terminal: QuadraticValue,
    rp: &RiskParams,
    cfg: &SolverConfig,
) -> Result<BackwardPass> {
    sweep(nominal, lin, exp, terminal, rp, cfg.reg_min, cfg.reg_max)
}

/// Entropic risk of the linearized closed loop `δu = K δx` around `nominal`.
pub fn evaluate_gains(
    nominal: &Trajectory,
    lin: &[Linearization],
    exp: &[CostExpansion],
    terminal: QuadraticValue,
    rp: &RiskParams,
    gains: &[DMatrix<f64>],
) -> Result<f64> {
    check_dim("gain sequence", nominal.horizon(), gains.len())?;
    check_sequences(nominal, lin, exp, rp)?;
    let mut value = terminal;
    for t in (0..nominal.horizon()).rev() {
        let Linearization { a, b } = &lin[t];
        let e = &exp[t];
        let gain = &gains[t];
        let inf = inflate(value, &rp.noise_var[t], rp.theta, t)?;
        // closed loop δx' = (A + BK) δx, stage cost in δx through δu = K δx
        let mut acl = a.clone();
        acl.gemm(1.0, b, gain, 1.0);
        let mut s_acl = DMatrix::zeros(acl.nrows(), acl.ncols());
        s_acl.gemm(1.0, &inf.s_mat, &acl, 0.0);
        let mut r_gain = DMatrix::zeros(gain.nrows(), gain.ncols());
        r_gain.gemm(1.0, &e.r_mat, gain, 0.0);
        let mut s_mat = e.q_mat.clone();
        s_mat.gemm_tr(1.0, &acl, &s_acl, 1.0);
        s_mat.gemm_tr(1.0, gain, &r_gain, 1.0);
        symmetrize(&mut s_mat);
        let mut s_vec = e.q_vec.clone();
        s_vec.gemv_tr(1.0, gain, &e.r_vec, 1.0);
        s_vec.gemv_tr(1.0, &acl, &inf.s_vec, 1.0);
        let s_scalar = e.value + inf.constant;
        if !(s_scalar.is_finite() && s_mat.iter().all(|v| v.is_finite())) {
            return Err(DrocError::NumericalFault("gain evaluation"));
        }
        value = QuadraticValue {
            s_mat,
            s_vec,
            s_scalar,
        };
    }
    Ok(value.s_scalar)
}

/// Applies `policy` through the plant from `x0` with the given noise.
pub fn forward_rollout<P: Plant + ?Sized>(
    model: &P,
    policy: &AffinePolicy,
    x0: &DVector<f64>,
    noise: &[DVector<f64>],
) -> Result<Trajectory> {
    check_dim("rollout noise length", policy.horizon(), noise.len())?;
    rollout_scaled(model, policy, x0, noise, 1.0)
}

fn rollout_scaled<P: Plant + ?Sized>(
    model: &P,
    policy: &AffinePolicy,
    x0: &DVector<f64>,
    noise: &[DVector<f64>],
    alpha: f64,
) -> Result<Trajectory> {
    let n = policy.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(x0.clone());
    for t in 0..n {
        let u = policy.control(t, &states[t], alpha);
        if !u.iter().all(|v| v.is_finite()) {
            return Err(DrocError::NumericalFault("rollout control"));
        }
        let next = model.step(&states[t], &u, &noise[t])?;
        controls.push(u);
        states.push(next);
    }
    Ok(Trajectory { states, controls })
}

/// Open-loop rollout of a control sequence without noise.
pub fn simulate_open_loop<P: Plant + ?Sized>(
    model: &P,
    x0: &DVector<f64>,
    controls: &[DVector<f64>],
) -> Result<Trajectory> {
    let zero = DVector::zeros(model.state_dim());
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (t, u) in controls.iter().enumerate() {
        let next = model.step(&states[t], u, &zero)?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
    })
}

fn linearize_along<P: Plant + ?Sized>(
    model: &P,
    cost: &QuadCost,
    traj: &Trajectory,
) -> Result<(Vec<Linearization>, Vec<CostExpansion>)> {
    let n = traj.horizon();
    let mut lin = Vec::with_capacity(n);
    let mut exp = Vec::with_capacity(n);
    for t in 0..n {
        lin.push(model.linearize(&traj.states[t], &traj.controls[t])?);
        exp.push(cost.expand(&traj.states[t], &traj.controls[t])?);
    }
    Ok((lin, exp))
}

/// Result of the inner risk-sensitive minimization.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub policy: AffinePolicy,
    /// `R_θ(J)` from the final backward pass (value `s̄` at the first step).
    pub risk_value: f64,
    /// Closed-loop entropic risk of the accepted nominal, per accepted iteration
    /// (index 0 is the initial guess).
    pub objective_history: Vec<f64>,
    /// Accepted DDP updates.
    pub iterations: usize,
    pub converged: bool,
    pub max_asymmetry: f64,
}

impl InnerSolution {
    pub fn nominal(&self) -> Trajectory {
        Trajectory {
            states: self.policy.x_nom.clone(),
            controls: self.policy.u_nom.clone(),
        }
    }
}

/// Iterates linearize → backward pass → line-searched rollout.
///
/// The line-search merit is the entropic risk of the linearized closed loop
/// around each candidate nominal, using the gains of the current backward
/// pass; a candidate is accepted on strict decrease. Hitting `max_iters`
/// returns the best iterate with `converged == false`.
pub fn solve_inner<P: Plant + ?Sized>(
    model: &P,
    cost: &QuadCost,
    rp: &RiskParams,
    x0: &DVector<f64>,
    u_init: &[DVector<f64>],
    cfg: &SolverConfig,
) -> Result<InnerSolution> {
    check_dim("initial state", model.state_dim(), x0.len())?;
    check_dim("noise covariance sequence", u_init.len(), rp.noise_var.len())?;
    if u_init.iter().any(|u| !model.control_admissible(u)) {
        return Err(DrocError::InvalidConfig(
            "initial control sequence is outside the admissible set".into(),
        ));
    }
    let mut nominal = simulate_open_loop(model, x0, u_init)?;
    let (mut lin, mut exp) = linearize_along(model, cost, &nominal)?;
    let terminal = |traj: &Trajectory| QuadraticValue::terminal(cost, traj.final_state());

    let mut bp = backward_pass(&nominal, &lin, &exp, terminal(&nominal)?, rp, cfg)?;
    let mut objective = evaluate_gains(
        &nominal,
        &lin,
        &exp,
        terminal(&nominal)?,
        rp,
        &bp.policy.gains,
    )?;
    let mut history = vec![objective];
    let mut max_asymmetry = bp.max_asymmetry;
    let zero_noise = vec![DVector::zeros(model.state_dim()); nominal.horizon()];

    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iters {
        let mut accepted = None;
        for halving in 0..=cfg.line_search_halvings {
            let alpha = 0.5f64.powi(halving as i32);
            let cand = match rollout_scaled(model, &bp.policy, x0, &zero_noise, alpha) {
                Ok(c) => c,
                Err(DrocError::NumericalFault(_)) => continue,
                Err(e) => return Err(e),
            };
            if cand.controls.iter().any(|u| !model.control_admissible(u)) {
                continue;
            }
            let (cl, ce) = match linearize_along(model, cost, &cand) {
                Ok(v) => v,
                Err(DrocError::SingularLinearization { .. } | DrocError::NumericalFault(_)) => {
                    continue
                }
                Err(e) => return Err(e),
            };
            let merit =
                match evaluate_gains(&cand, &cl, &ce, terminal(&cand)?, rp, &bp.policy.gains) {
                    Ok(m) => m,
                    Err(DrocError::RiskInfeasible { .. } | DrocError::NumericalFault(_)) => {
                        continue
                    }
                    Err(e) => return Err(e),
                };
            if merit < objective {
                accepted = Some((cand, cl, ce, merit));
                break;
            }
        }
        let Some((cand, cl, ce, merit)) = accepted else {
            converged = true;
            break;
        };
        let rel_change = (objective - merit) / objective.abs().max(1e-12);
        nominal = cand;
        lin = cl;
        exp = ce;
        objective = merit;
        history.push(objective);
        iterations += 1;
        bp = backward_pass(&nominal, &lin, &exp, terminal(&nominal)?, rp, cfg)?;
        max_asymmetry = max_asymmetry.max(bp.max_asymmetry);
        if rel_change < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(InnerSolution {
        risk_value: bp.value.s_scalar,
        policy: bp.policy,
        objective_history: history,
        iterations,
        converged,
        max_asymmetry,
    })
}

/// Sample entropic risk `(1/θ) log mean exp(θ J)` via a shifted log-sum-exp.
/// At `θ = 0` this is the sample mean, its continuous extension.
pub fn entropic_risk_mc(samples: &[f64], theta: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let n = samples.len() as f64;
    if theta == 0.0 {
        return samples.iter().sum::<f64>() / n;
    }
    let max = samples
        .iter()
        .map(|&j| theta * j)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = samples.iter().map(|&j| (theta * j - max).exp()).sum();
    (max + (sum / n).ln()) / theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearPlant;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn double_integrator() -> (LinearPlant, QuadCost) {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.005, 0.1]);
        let plant = LinearPlant::new(a, b, 0.1).unwrap();
        let cost = QuadCost::diagonal(&[1.0, 1.0], &[1.0], &[1.0, 1.0]).unwrap();
        (plant, cost)
    }

    /// Textbook backward Riccati iteration for x' = Ax + Bu.
    fn riccati_gains(a: &DMatrix<f64>, b: &DMatrix<f64>, cost: &QuadCost, n: usize) -> Vec<DMatrix<f64>> {
        let mut p = cost.qf.clone();
        let mut gains = Vec::new();
        for _ in 0..n {
            let btp = b.transpose() * &p;
            let k = (&cost.r + &btp * b).try_inverse().unwrap() * (&btp * a);
            p = &cost.q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
            gains.push(-k);
        }
        gains.reverse();
        gains
    }

    fn solve_lq(theta: f64, var: f64) -> InnerSolution {
        let (plant, cost) = double_integrator();
        let rp = RiskParams::new(theta, vec![v(&[var, var]); 3]).unwrap();
        solve_inner(
            &plant,
            &cost,
            &rp,
            &v(&[1.0, -0.5]),
            &vec![v(&[0.0]); 3],
            &SolverConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn risk_neutral_gains_match_riccati() {
        let (plant, cost) = double_integrator();
        let sol = solve_lq(0.0, 0.01);
        let want = riccati_gains(&plant.a, &plant.b, &cost, 3);
        for (k, w) in sol.policy.gains.iter().zip(&want) {
            assert!((k - w).amax() <= 1e-10);
        }
        assert_eq!(sol.iterations, 1);
        assert!(sol.converged);
    }

    #[test]
    fn gains_are_continuous_at_zero_risk() {
        let base = solve_lq(0.0, 0.05);
        let mut prev = f64::INFINITY;
        for theta in [1e-4, 1e-6, 1e-8] {
            let sol = solve_lq(theta, 0.05);
            let diff = sol
                .policy
                .gains
                .iter()
                .zip(&base.policy.gains)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max);
            assert!(diff <= prev);
            prev = diff;
        }
        assert!(prev <= 1e-5);
    }

    #[test]
    fn noise_free_risk_matches_neutral() {
        let base = solve_lq(0.0, 0.0);
        let sol = solve_lq(3.0, 0.0);
        for (a, b) in sol.policy.gains.iter().zip(&base.policy.gains) {
            assert!((a - b).amax() <= 1e-12);
        }
        assert_abs_diff_eq!(sol.risk_value, base.risk_value, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_theta_is_reported() {
        let (plant, cost) = double_integrator();
        let rp = RiskParams::new(1e6, vec![v(&[1.0, 1.0]); 3]).unwrap();
        let err = solve_inner(
            &plant,
            &cost,
            &rp,
            &v(&[1.0, 0.0]),
            &vec![v(&[0.0]); 3],
            &SolverConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DrocError::RiskInfeasible { .. }));
    }

    #[test]
    fn zero_policy_rollout_stays_at_origin() {
        let (plant, _) = double_integrator();
        let nominal = Trajectory {
            states: vec![v(&[0.0, 0.0]); 4],
            controls: vec![v(&[0.0]); 3],
        };
        let policy = AffinePolicy::open_loop(&nominal);
        let traj = forward_rollout(&plant, &policy, &v(&[0.0, 0.0]), &vec![v(&[0.0, 0.0]); 3]).unwrap();
        assert!(traj.states.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn feedforward_rollout_matches_hand_simulation() {
        let (plant, _) = double_integrator();
        let nominal = Trajectory {
            states: vec![v(&[0.0, 0.0]); 3],
            controls: vec![v(&[0.0]); 2],
        };
        let mut policy = AffinePolicy::open_loop(&nominal);
        policy.feedforward = vec![v(&[1.0]), v(&[-2.0])];
        let traj = forward_rollout(&plant, &policy, &v(&[1.0, 0.0]), &vec![v(&[0.0, 0.0]); 2]).unwrap();
        // x1 = [1 + 0.005, 0.1], x2 = [1.005 + 0.01 - 0.01, 0.1 - 0.2]
        assert_abs_diff_eq!(traj.states[1], v(&[1.005, 0.1]), epsilon = 1e-15);
        assert_abs_diff_eq!(traj.states[2], v(&[1.005, -0.1]), epsilon = 1e-15);
    }

    #[test]
    fn rollout_length_is_checked() {
        let (plant, _) = double_integrator();
        let nominal = Trajectory {
            states: vec![v(&[0.0, 0.0]); 3],
            controls: vec![v(&[0.0]); 2],
        };
        let policy = AffinePolicy::open_loop(&nominal);
        assert!(forward_rollout(&plant, &policy, &v(&[0.0, 0.0]), &[]).is_err());
    }

    #[test]
    fn entropic_risk_examples() {
        assert_abs_diff_eq!(entropic_risk_mc(&[3.0; 5], 0.7), 3.0, epsilon = 1e-12);
        let want = ((1.0 + 2f64.exp()) / 2.0).ln();
        assert_abs_diff_eq!(entropic_risk_mc(&[0.0, 2.0], 1.0), want, epsilon = 1e-12);
        assert_abs_diff_eq!(want, 1.4338, epsilon = 1e-4);
        // stable for huge exponents
        assert!(entropic_risk_mc(&[1e4, 0.0], 10.0).is_finite());
        assert_abs_diff_eq!(entropic_risk_mc(&[1.0, 3.0], 0.0), 2.0);
        assert_abs_diff_eq!(entropic_risk_mc(&[1.0, 3.0], 1e-9), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn car_solve_descends() {
        use crate::cost::CostConfig;
        use crate::dynamics::Bicycle;
        let car = Bicycle::default();
        let cost = QuadCost::from_config(&CostConfig::default()).unwrap();
        let x0 = v(&[5.0, 5.0, -0.75 * std::f64::consts::PI, 0.0]);
        for theta in [0.0, 0.05] {
            let rp = RiskParams::new(theta, vec![v(&[1e-3, 1e-3, 1e-4, 1e-3]); 10]).unwrap();
            let sol =
                solve_inner(&car, &cost, &rp, &x0, &vec![v(&[0.0, 0.0]); 10], &SolverConfig::default())
                    .unwrap();
            assert!(sol.iterations > 0);
            for pair in sol.objective_history.windows(2) {
                assert!(pair[1] < pair[0]);
            }
            let end = sol.policy.x_nom.last().unwrap();
            assert!(end[0].hypot(end[1]) < x0[0].hypot(x0[1]));
        }
    }

    proptest! {
        #[test]
        fn entropic_risk_is_nondecreasing_in_theta(
            samples in proptest::collection::vec(-10.0..10.0f64, 1..40),
            t1 in 0.0..3.0f64,
            dt in 0.0..3.0f64,
        ) {
            let lo = entropic_risk_mc(&samples, t1);
            let hi = entropic_risk_mc(&samples, t1 + dt);
            prop_assert!(hi >= lo - 1e-9 * (1.0 + lo.abs()));
        }
    }
}
