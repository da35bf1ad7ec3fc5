//! Local controller of one control area: measurement-driven dual ascent,
//! regularized primal solve over box capacities, optional proportional and
//! derivative action, and low-pass filtering of VDER set-points.

use nalgebra::DVector;

use crate::config::{ControllerOverrides, PidScope};
use crate::feeder::{MeasurementDims, SensitivityModel};
use crate::hierarchy::Area;
use crate::{Error, Result};

/// One value per dual family, in stacking order `λ, μ, η, ψ, γ, ν, ζ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerDual {
    pub lambda: f64,
    pub mu: f64,
    pub eta: f64,
    pub psi: f64,
    pub gamma: f64,
    pub nu: f64,
    pub zeta: f64,
}

impl PerDual {
    pub const fn splat(v: f64) -> Self {
        PerDual { lambda: v, mu: v, eta: v, psi: v, gamma: v, nu: v, zeta: v }
    }

    pub fn values(&self) -> [f64; 7] {
        [self.lambda, self.mu, self.eta, self.psi, self.gamma, self.nu, self.zeta]
    }

    /// Expands to the stacked dual layout for `dims`.
    pub fn expand(&self, dims: MeasurementDims) -> DVector<f64> {
        let mut out = Vec::with_capacity(dual_len(dims));
        out.extend([self.lambda, self.mu, self.eta, self.psi]);
        out.extend(std::iter::repeat(self.gamma).take(dims.nv));
        out.extend(std::iter::repeat(self.nu).take(dims.nv));
        out.extend(std::iter::repeat(self.zeta).take(dims.ni));
        DVector::from_vec(out)
    }
}

pub fn dual_len(dims: MeasurementDims) -> usize {
    4 + 2 * dims.nv + dims.ni
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcConfig {
    /// Common gain multiplier `α_i`.
    pub alpha: f64,
    pub r_primal: f64,
    /// Common dual regularization `r̃_i^d`.
    pub r_dual: f64,
    pub e_p_w: f64,
    pub e_q_var: f64,
    pub v_max_pu: f64,
    pub v_min_pu: f64,
    /// Gain scalings `a`.
    pub a: PerDual,
    /// Regularization scalings `c`.
    pub c: PerDual,
    pub kp: PerDual,
    pub kd: PerDual,
    pub pid_scope: PidScope,
    /// VDER low-pass time constant; zero disables the filter.
    pub lpf_tau_s: f64,
    pub sample_period_s: f64,
}

impl Default for LcConfig {
    fn default() -> Self {
        LcConfig {
            alpha: 0.002,
            r_primal: 1e-4,
            r_dual: 1e-3,
            e_p_w: 100.0,
            e_q_var: 100.0,
            v_max_pu: 1.05,
            v_min_pu: 0.95,
            a: PerDual { lambda: 1e3, mu: 1e3, eta: 1e3, psi: 1e3, gamma: 1e12, nu: 1e12, zeta: 1e7 },
            c: PerDual { lambda: 1e-3, mu: 1e-3, eta: 1e-3, psi: 1e-3, gamma: 1e-12, nu: 1e-12, zeta: 1e-7 },
            kp: PerDual::splat(0.0),
            kd: PerDual::splat(0.0),
            pid_scope: PidScope::All,
            lpf_tau_s: 0.0,
            sample_period_s: 0.1,
        }
    }
}

impl LcConfig {
    pub fn apply(&mut self, o: &ControllerOverrides) {
        fn set(dst: &mut f64, v: Option<f64>) {
            if let Some(v) = v {
                *dst = v;
            }
        }
        set(&mut self.alpha, o.alpha);
        set(&mut self.r_primal, o.r_primal);
        set(&mut self.r_dual, o.r_dual);
        set(&mut self.e_p_w, o.e_p_w);
        set(&mut self.e_q_var, o.e_q_var);
        set(&mut self.v_max_pu, o.v_max_pu);
        set(&mut self.v_min_pu, o.v_min_pu);
        set(&mut self.lpf_tau_s, o.lpf_tau_s);
        let groups = [
            (&mut self.a, [o.a_lambda, o.a_mu, o.a_eta, o.a_psi, o.a_gamma, o.a_nu, o.a_zeta]),
            (&mut self.c, [o.c_lambda, o.c_mu, o.c_eta, o.c_psi, o.c_gamma, o.c_nu, o.c_zeta]),
            (&mut self.kp, [o.kp_lambda, o.kp_mu, o.kp_eta, o.kp_psi, o.kp_gamma, o.kp_nu, o.kp_zeta]),
            (&mut self.kd, [o.kd_lambda, o.kd_mu, o.kd_eta, o.kd_psi, o.kd_gamma, o.kd_nu, o.kd_zeta]),
        ];
        for (dst, vals) in groups {
            let fields = [
                &mut dst.lambda,
                &mut dst.mu,
                &mut dst.eta,
                &mut dst.psi,
                &mut dst.gamma,
                &mut dst.nu,
                &mut dst.zeta,
            ];
            for (f, v) in fields.into_iter().zip(vals) {
                set(f, v);
            }
        }
        if let Some(s) = o.pid_scope {
            self.pid_scope = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("controller `{name}` must be finite and nonnegative, got {v}")))
            }
        };
        nonneg("alpha", self.alpha)?;
        nonneg("r_primal", self.r_primal)?;
        nonneg("r_dual", self.r_dual)?;
        nonneg("lpf_tau_s", self.lpf_tau_s)?;
        for (group, vals) in [("a", self.a), ("c", self.c), ("kp", self.kp), ("kd", self.kd)] {
            for v in vals.values() {
                nonneg(group, v)?;
            }
        }
        if !(self.e_p_w > 0.0 && self.e_q_var > 0.0) {
            return Err(Error::config("tracking tolerances e_p_w and e_q_var must be positive"));
        }
        if !(self.v_min_pu < self.v_max_pu) {
            return Err(Error::config("v_min_pu must be below v_max_pu"));
        }
        if !(self.sample_period_s > 0.0) {
            return Err(Error::config("sample period must be positive"));
        }
        Ok(())
    }

    /// Stacked gains `α_i·a`.
    pub fn gains(&self, dims: MeasurementDims) -> DVector<f64> {
        self.a.expand(dims) * self.alpha
    }

    /// Stacked dual regularization `r̃_i^d·c`.
    pub fn dual_regularization(&self, dims: MeasurementDims) -> DVector<f64> {
        self.c.expand(dims) * self.r_dual
    }
}

/// Operating limits on an area's monitored channels, in measurement units.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaLimits {
    /// Upper voltage limit per monitored node (V).
    pub v_max_v: DVector<f64>,
    pub v_min_v: DVector<f64>,
    /// Current limit per monitored line phase (A).
    pub i_max_a: DVector<f64>,
}

/// Constant part `b_i` of the constraint map:
/// `−col(E_p, E_p, E_q, E_q, v̄, −v̲, ī)`.
pub fn constraint_offset(config: &LcConfig, limits: &AreaLimits) -> DVector<f64> {
    let mut b = vec![-config.e_p_w, -config.e_p_w, -config.e_q_var, -config.e_q_var];
    b.extend(limits.v_max_v.iter().map(|v| -v));
    b.extend(limits.v_min_v.iter().copied());
    b.extend(limits.i_max_a.iter().map(|i| -i));
    DVector::from_vec(b)
}

/// Set-point part of the constraint map, `col(−s p_set, s p_set, −s q_set, s q_set, 0, …)`.
pub fn setpoint_term(tracking: bool, p_set: f64, q_set: f64, dims: MeasurementDims) -> DVector<f64> {
    let s = if tracking { 1.0 } else { 0.0 };
    let mut out = DVector::zeros(dual_len(dims));
    out[0] = -s * p_set;
    out[1] = s * p_set;
    out[2] = -s * q_set;
    out[3] = s * q_set;
    out
}

/// `C_i y` for `y = col(p0, q0, v, i)`.
pub fn apply_c(tracking: bool, y: &DVector<f64>, dims: MeasurementDims) -> DVector<f64> {
    let s = if tracking { 1.0 } else { 0.0 };
    let (m, nv, ni) = (dims.m, dims.nv, dims.ni);
    let p: f64 = y.rows(0, m).sum();
    let q: f64 = y.rows(m, m).sum();
    let v = y.rows(2 * m, nv);
    let i = y.rows(2 * m + nv, ni);
    let mut out = Vec::with_capacity(dual_len(dims));
    out.extend([s * p, -s * p, s * q, -s * q]);
    out.extend(v.iter().copied());
    out.extend(v.iter().map(|x| -x));
    out.extend(i.iter().copied());
    DVector::from_vec(out)
}

/// `C_iᵀ d`, the measurement-space weights of a dual vector.
pub fn apply_ct(tracking: bool, d: &DVector<f64>, dims: MeasurementDims) -> DVector<f64> {
    let s = if tracking { 1.0 } else { 0.0 };
    let (m, nv, ni) = (dims.m, dims.nv, dims.ni);
    let mut out = DVector::zeros(dims.len());
    for k in 0..m {
        out[k] = s * (d[0] - d[1]);
        out[m + k] = s * (d[2] - d[3]);
    }
    for k in 0..nv {
        out[2 * m + k] = d[4 + k] - d[4 + nv + k];
    }
    for k in 0..ni {
        out[2 * m + nv + k] = d[4 + 2 * nv + k];
    }
    out
}

/// Stacked constraint signal `C_i y + b_i + set-point term`; positive
/// entries are violations.
pub fn constraint_signal(
    tracking: bool,
    y: &DVector<f64>,
    p_set: f64,
    q_set: f64,
    b: &DVector<f64>,
    dims: MeasurementDims,
) -> DVector<f64> {
    apply_c(tracking, y, dims) + b + setpoint_term(tracking, p_set, q_set, dims)
}

/// Projected dual ascent `d⁺ = P≥0(d + α∘(g − r∘d))`. Returns `(d⁺, e)` with
/// `e = g − r∘d` the error stack driving the step.
pub fn dual_update(
    d: &DVector<f64>,
    signal: &DVector<f64>,
    gains: &DVector<f64>,
    regularization: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = d.len();
    if signal.len() != n || gains.len() != n || regularization.len() != n {
        return Err(Error::Dimension(format!(
            "dual update: state {n}, signal {}, gains {}, regularization {}",
            signal.len(),
            gains.len(),
            regularization.len()
        )));
    }
    let e = signal - regularization.component_mul(d);
    let next = (d + gains.component_mul(&e)).map(|v| v.max(0.0));
    Ok((next, e))
}

/// Box-constrained separable quadratic `Σ c2·x² + c1·x + (r_p/2)x² + ℓ·x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalProblem {
    pub c2: DVector<f64>,
    pub c1: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub r_primal: f64,
}

impl PrimalProblem {
    pub fn from_area(area: &Area, r_primal: f64) -> Self {
        let n = area.x_len();
        PrimalProblem {
            c2: DVector::from_iterator(n, area.ders.iter().flat_map(|d| d.cost.c2)),
            c1: DVector::from_iterator(n, area.ders.iter().flat_map(|d| d.cost.c1)),
            lo: area.capacity_lo(),
            hi: area.capacity_hi(),
            r_primal,
        }
    }

    pub fn len(&self) -> usize {
        self.c2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c2.is_empty()
    }

    pub fn objective(&self, x: &DVector<f64>, ell: &DVector<f64>) -> f64 {
        (0..self.len())
            .map(|c| {
                (self.c2[c] + 0.5 * self.r_primal) * x[c] * x[c] + (self.c1[c] + ell[c]) * x[c]
            })
            .sum()
    }
}

/// Exact minimizer `x_c = clamp(−(c1_c + ℓ_c)/(2 c2_c + r_p))`.
pub fn primal_update(problem: &PrimalProblem, ell: &DVector<f64>) -> Result<DVector<f64>> {
    if ell.len() != problem.len() {
        return Err(Error::Dimension(format!(
            "primal update: {} coordinates, linear term {}",
            problem.len(),
            ell.len()
        )));
    }
    let mut x = DVector::zeros(problem.len());
    for c in 0..problem.len() {
        let curvature = 2.0 * problem.c2[c] + problem.r_primal;
        if !(curvature > 0.0) {
            return Err(Error::Numerical(format!("nonpositive curvature on coordinate {c}")));
        }
        let v = -(problem.c1[c] + ell[c]) / curvature;
        x[c] = v.max(problem.lo[c]).min(problem.hi[c]);
    }
    Ok(x)
}

/// Dual-weighted linear term `ℓ = K_iᵀ C_iᵀ d`.
pub fn linear_term(model: &SensitivityModel, tracking: bool, d: &DVector<f64>) -> DVector<f64> {
    model.k.tr_mul(&apply_ct(tracking, d, model.dims))
}

/// Raw signed measurement stack `col(1ᵀp0, −1ᵀp0, 1ᵀq0, −1ᵀq0, v, −v, i)`.
pub fn raw_stack(y: &DVector<f64>, dims: MeasurementDims) -> DVector<f64> {
    apply_c(true, y, dims)
}

/// `d̃ = d⁺ + κ_p e + κ_d (y − y⁻)`, deliberately not projected.
pub fn pid_augment(
    d_plus: &DVector<f64>,
    kp: &DVector<f64>,
    kd: &DVector<f64>,
    e: &DVector<f64>,
    y_raw: &DVector<f64>,
    y_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = d_plus.len();
    if [kp.len(), kd.len(), e.len(), y_raw.len(), y_prev.len()].iter().any(|&l| l != n) {
        return Err(Error::Dimension("PID augmentation: stack length mismatch".into()));
    }
    Ok(d_plus + kp.component_mul(e) + kd.component_mul(&(y_raw - y_prev)))
}

/// One step of `x_f ← x_f + T_s/(T_f + T_s)·(u − x_f)`.
pub fn lpf_step(state: f64, input: f64, tau_s: f64, sample_period_s: f64) -> f64 {
    state + sample_period_s / (tau_s + sample_period_s) * (input - state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LcState {
    pub duals: DVector<f64>,
    /// Primal solution of the last step (W, var).
    pub x: DVector<f64>,
    /// Previous raw measurement stack, for derivative action.
    pub y_prev: Option<DVector<f64>>,
    /// Filtered VDER set-points, stored at their `x` coordinates.
    pub lpf: DVector<f64>,
    pub faults: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Updated,
    /// Non-finite measurements; the state was held.
    Faulted,
}

#[derive(Debug, Clone)]
pub struct LocalController {
    pub id: String,
    pub config: LcConfig,
    pub limits: AreaLimits,
    pub model: SensitivityModel,
    pub tracking: bool,
    pub problem: PrimalProblem,
    /// Per `x` coordinate: belongs to a VDER.
    pub vder_mask: Vec<bool>,
    pub state: LcState,
    gains: DVector<f64>,
    regularization: DVector<f64>,
    kp: DVector<f64>,
    kd: DVector<f64>,
    offset: DVector<f64>,
}

impl LocalController {
    pub fn new(area: &Area, model: SensitivityModel, config: LcConfig, limits: AreaLimits) -> Result<Self> {
        config.validate()?;
        let dims = model.dims;
        if model.k.ncols() != area.x_len() {
            return Err(Error::Dimension(format!(
                "area `{}`: sensitivity model has {} columns, area has {} set-points",
                area.id,
                model.k.ncols(),
                area.x_len()
            )));
        }
        if limits.v_max_v.len() != dims.nv || limits.v_min_v.len() != dims.nv || limits.i_max_a.len() != dims.ni {
            return Err(Error::Dimension(format!("area `{}`: limit vectors do not match measurements", area.id)));
        }
        let n = area.x_len();
        let nd = dual_len(dims);
        Ok(LocalController {
            id: area.id.clone(),
            gains: config.gains(dims),
            regularization: config.dual_regularization(dims),
            kp: config.kp.expand(dims),
            kd: config.kd.expand(dims),
            offset: constraint_offset(&config, &limits),
            problem: PrimalProblem::from_area(area, config.r_primal),
            vder_mask: area.ders.iter().flat_map(|d| [d.is_virtual(); 2]).collect(),
            tracking: area.tracking,
            config,
            limits,
            model,
            state: LcState {
                duals: DVector::zeros(nd),
                x: DVector::zeros(n),
                y_prev: None,
                lpf: DVector::zeros(n),
                faults: 0,
            },
        })
    }

    pub fn dims(&self) -> MeasurementDims {
        self.model.dims
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// Steps 2–5 for measurement stack `y = col(p0, q0, v, i)` and the
    /// received interface set-point.
    pub fn step(&mut self, y: &DVector<f64>, p_set: f64, q_set: f64) -> Result<StepOutcome> {
        let dims = self.dims();
        if y.len() != dims.len() {
            return Err(Error::Dimension(format!(
                "area `{}`: expected {} measurements, got {}",
                self.id,
                dims.len(),
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) || !p_set.is_finite() || !q_set.is_finite() {
            self.state.faults += 1;
            return Ok(StepOutcome::Faulted);
        }
        let signal = constraint_signal(self.tracking, y, p_set, q_set, &self.offset, dims);
        let (d_plus, e) = dual_update(&self.state.duals, &signal, &self.gains, &self.regularization)?;

        let y_raw = raw_stack(y, dims);
        let y_prev = self.state.y_prev.clone().unwrap_or_else(|| y_raw.clone());
        let d_tilde = pid_augment(&d_plus, &self.kp, &self.kd, &e, &y_raw, &y_prev)?;

        let ell_plain = linear_term(&self.model, self.tracking, &d_plus);
        let ell_pid = linear_term(&self.model, self.tracking, &d_tilde);
        let ell = match self.config.pid_scope {
            PidScope::All => ell_pid,
            PidScope::Vder => DVector::from_fn(ell_plain.len(), |c, _| {
                if self.vder_mask[c] {
                    ell_pid[c]
                } else {
                    ell_plain[c]
                }
            }),
        };
        let x = primal_update(&self.problem, &ell)?;

        for c in 0..x.len() {
            if self.vder_mask[c] {
                self.state.lpf[c] = if self.config.lpf_tau_s > 0.0 {
                    lpf_step(self.state.lpf[c], x[c], self.config.lpf_tau_s, self.config.sample_period_s)
                } else {
                    x[c]
                };
            }
        }
        self.state.duals = d_plus;
        self.state.x = x;
        self.state.y_prev = Some(y_raw);
        Ok(StepOutcome::Updated)
    }

    /// Set-points sent onwards: physical DER commands as solved, VDER
    /// entries after the low-pass filter.
    pub fn transmitted(&self) -> DVector<f64> {
        DVector::from_fn(self.state.x.len(), |c, _| {
            if self.vder_mask[c] {
                self.state.lpf[c]
            } else {
                self.state.x[c]
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn dims(nv: usize, ni: usize) -> MeasurementDims {
        MeasurementDims { m: 1, nv, ni }
    }

    fn scalar_problem(c2: f64, r: f64, lo: f64, hi: f64) -> PrimalProblem {
        PrimalProblem {
            c2: DVector::from_element(1, c2),
            c1: DVector::zeros(1),
            lo: DVector::from_element(1, lo),
            hi: DVector::from_element(1, hi),
            r_primal: r,
        }
    }

    /// Projected gradient with step `1/L` run until the iterate stops moving.
    fn projected_gradient(p: &PrimalProblem, ell: &DVector<f64>) -> DVector<f64> {
        let lip: f64 = p.c2.iter().map(|c| 2.0 * c + p.r_primal).fold(0.0, f64::max);
        let mut x: DVector<f64> = DVector::zeros(p.len());
        for _ in 0..100_000 {
            let grad = DVector::from_fn(p.len(), |c, _| {
                (2.0 * p.c2[c] + p.r_primal) * x[c] + p.c1[c] + ell[c]
            });
            let next = DVector::from_fn(p.len(), |c, _| (x[c] - grad[c] / lip).max(p.lo[c]).min(p.hi[c]));
            let moved = (&next - &x).amax();
            x = next;
            if moved < 1e-12 {
                break;
            }
        }
        x
    }

    #[test]
    fn feasible_zero_duals_stay_zero() {
        let d = DVector::zeros(7);
        let signal = DVector::from_vec(vec![-50.0, -50.0, -10.0, -10.0, -3.0, -4.0, -20.0]);
        let cfg = LcConfig::default();
        let (next, _) = dual_update(&d, &signal, &cfg.gains(dims(1, 1)), &cfg.dual_regularization(dims(1, 1))).unwrap();
        assert_eq!(next, DVector::zeros(7));
    }

    #[test]
    fn projection_clamps_at_zero() {
        let d = DVector::from_element(1, 1.0);
        let (next, _) = dual_update(&d, &DVector::from_element(1, -0.75), &DVector::from_element(1, 2.0), &DVector::zeros(1)).unwrap();
        assert_eq!(next[0], 0.0);
    }

    #[test]
    fn lambda_step_with_default_gains() {
        let cfg = LcConfig::default();
        let dm = dims(0, 0);
        let limits = AreaLimits { v_max_v: DVector::zeros(0), v_min_v: DVector::zeros(0), i_max_a: DVector::zeros(0) };
        let b = constraint_offset(&cfg, &limits);
        let y = DVector::from_vec(vec![60_000.0, 0.0]);
        let signal = constraint_signal(true, &y, 50_000.0, 0.0, &b, dm);
        let d = DVector::from_vec(vec![5.0, 0.0, 0.0, 0.0]);
        let r = DVector::zeros(4);
        let (next, _) = dual_update(&d, &signal, &cfg.gains(dm), &r).unwrap();
        assert!((cfg.gains(dm)[0] - 2.0).abs() < 1e-15);
        assert!((next[0] - (5.0 + 2.0 * 9900.0)).abs() < 1e-9);
        assert_eq!(next[1], 0.0);
    }

    #[test]
    fn tracking_switch_removes_set_point_signal() {
        let dm = dims(1, 1);
        let y = DVector::from_vec(vec![1e5, 2e4, 230.0, 80.0]);
        let c = apply_c(false, &y, dm);
        assert_eq!(&c.as_slice()[..4], &[0.0; 4]);
        assert_eq!(&c.as_slice()[4..], &[230.0, -230.0, 80.0]);
        let sp = setpoint_term(false, 3e4, 1e3, dm);
        assert_eq!(sp, DVector::zeros(7));
    }

    #[test]
    fn c_transpose_is_adjoint() {
        let dm = MeasurementDims { m: 3, nv: 2, ni: 4 };
        let y = DVector::from_fn(dm.len(), |r, _| (r as f64 * 1.7).sin());
        let d = DVector::from_fn(dual_len(dm), |r, _| (r as f64 * 0.9).cos());
        for s in [true, false] {
            let lhs = d.dot(&apply_c(s, &y, dm));
            let rhs = apply_ct(s, &d, dm).dot(&y);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn primal_examples() {
        let p = scalar_problem(20.0, 1e-4, -1e6, 1e6);
        assert_eq!(primal_update(&p, &DVector::zeros(1)).unwrap()[0], 0.0);
        let x = primal_update(&p, &DVector::from_element(1, -400.0)).unwrap()[0];
        assert!((x - 400.0 / 40.0001).abs() < 1e-12);
        assert!((x - projected_gradient(&p, &DVector::from_element(1, -400.0))[0]).abs() < 1e-9);
        let x = primal_update(&p, &DVector::from_element(1, -1e9)).unwrap()[0];
        assert_eq!(x, 1e6);
        let bad = scalar_problem(0.0, 0.0, -1.0, 1.0);
        assert!(primal_update(&bad, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn pid_disabled_and_derivative() {
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let z = DVector::zeros(4);
        let e = DVector::from_element(4, 5.0);
        let y = DVector::from_vec(vec![10.0, -10.0, 0.0, 0.0]);
        assert_eq!(pid_augment(&d, &z, &z, &e, &y, &y).unwrap(), d);
        let kd = DVector::from_vec(vec![0.3, 0.0, 0.0, 0.0]);
        let y_prev = DVector::from_vec(vec![10.0 - 1000.0, -10.0 + 1000.0, 0.0, 0.0]);
        let out = pid_augment(&d, &z, &kd, &e, &y, &y_prev).unwrap();
        assert!((out[0] - (1.0 + 300.0)).abs() < 1e-12);
        assert_eq!(&out.as_slice()[1..], &d.as_slice()[1..]);
        let kp = DVector::from_element(4, 0.5);
        let neg = pid_augment(&DVector::zeros(4), &kp, &z, &DVector::from_element(4, -2.0), &y, &y).unwrap();
        assert!(neg.iter().all(|v| *v == -1.0));
    }

    #[test]
    fn lpf_responses() {
        assert_eq!(lpf_step(3.0, 7.0, 0.0, 0.1), 7.0);
        let (tau, ts) = (2.0, 0.1);
        let mut x = 0.0;
        let mut prev = 0.0;
        let mut t63 = None;
        for k in 1..=400 {
            x = lpf_step(x, 1.0, tau, ts);
            assert!(x > prev && x < 1.0);
            prev = x;
            if t63.is_none() && x >= 1.0 - (-1.0f64).exp() {
                t63 = Some(k as f64 * ts);
            }
        }
        assert!((t63.unwrap() - tau).abs() <= 0.15 * tau);
        let mut x = 0.0;
        let mut peak = 0.0f64;
        for k in 0..2000 {
            let u = if k % 2 == 0 { 1.0 } else { -1.0 };
            x = lpf_step(x, u, 5.0, 0.1);
            if k > 1000 {
                peak = peak.max(x.abs());
            }
        }
        assert!(peak < 0.1);
    }

    fn toy_controller(config: LcConfig) -> LocalController {
        use crate::hierarchy::{CapacityBox, DerKind, DerSpec, QuadraticCost};
        let area = Area {
            id: "A".into(),
            parent: None,
            children: vec![],
            interface_bus: 0,
            monitored_buses: vec![1],
            monitored_lines: vec![0],
            tracking: true,
            ders: vec![DerSpec {
                id: "D".into(),
                kind: DerKind::Physical { site: 0, tau_s: 0.2 },
                bus: 1,
                phases: vec![0],
                cost: QuadraticCost::new([20.0, 20.0], [0.0, 0.0]),
                capacity: CapacityBox { lo: [-1e6; 2], hi: [1e6; 2] },
            }],
        };
        let k = DMatrix::from_row_slice(4, 2, &[-1.0, 0.0, 0.0, -1.0, 0.002, 0.003, -0.1, -0.05]);
        let model = SensitivityModel { k, offset: DVector::zeros(4), dims: dims(1, 1) };
        let limits = AreaLimits {
            v_max_v: DVector::from_element(1, 240.0),
            v_min_v: DVector::from_element(1, 220.0),
            i_max_a: DVector::from_element(1, 100.0),
        };
        LocalController::new(&area, model, config, limits).unwrap()
    }

    #[test]
    fn interior_point_is_a_fixed_point() {
        let mut cfg = LcConfig::default();
        cfg.r_dual = 0.0;
        cfg.r_primal = 0.0;
        let mut lc = toy_controller(cfg);
        let y = DVector::from_vec(vec![1000.0, 0.0, 230.0, 50.0]);
        for _ in 0..5 {
            lc.step(&y, 1000.0, 0.0).unwrap();
        }
        assert_eq!(lc.state.duals, DVector::zeros(7));
        assert_eq!(lc.state.x, DVector::zeros(2));
    }

    #[test]
    fn request_drives_lambda_and_injection_positive() {
        let mut lc = toy_controller(LcConfig::default());
        let y = DVector::from_vec(vec![50_000.0, 0.0, 230.0, 50.0]);
        lc.step(&y, 30_000.0, 0.0).unwrap();
        assert!(lc.state.duals[0] > 0.0);
        assert!(lc.state.x[0] > 0.0);
    }

    #[test]
    fn regularization_sets_equilibrium_dual() {
        // λ* = violation / r_λ for a frozen violation signal.
        for r in [1e-3, 1e-2, 1e-1] {
            let mut d = DVector::zeros(1);
            for _ in 0..20_000 {
                d = dual_update(&d, &DVector::from_element(1, 5.0), &DVector::from_element(1, 1.0), &DVector::from_element(1, r))
                    .unwrap()
                    .0;
            }
            assert!((d[0] - 5.0 / r).abs() < 1e-6 * (5.0 / r));
        }
    }

    #[test]
    fn nan_measurement_holds_state() {
        let mut lc = toy_controller(LcConfig::default());
        lc.step(&DVector::from_vec(vec![50_000.0, 0.0, 230.0, 50.0]), 30_000.0, 0.0).unwrap();
        let before = lc.state.clone();
        let out = lc.step(&DVector::from_vec(vec![f64::NAN, 0.0, 230.0, 50.0]), 30_000.0, 0.0).unwrap();
        assert_eq!(out, StepOutcome::Faulted);
        assert_eq!(lc.state.duals, before.duals);
        assert_eq!(lc.state.x, before.x);
        assert_eq!(lc.state.faults, 1);
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = LcConfig::default();
        let o = ControllerOverrides { alpha: Some(0.003), a_lambda: Some(5e3), kd_zeta: Some(2.0), ..Default::default() };
        cfg.apply(&o);
        assert_eq!(cfg.alpha, 0.003);
        assert_eq!(cfg.a.lambda, 5e3);
        assert_eq!(cfg.a.mu, 1e3);
        assert_eq!(cfg.kd.zeta, 2.0);
        let mut bad = LcConfig::default();
        bad.v_min_pu = 1.1;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn primal_matches_projected_gradient(
            coords in prop::collection::vec((0.5f64..50.0, -100.0f64..100.0, -5e3f64..0.0, 0.0f64..5e3, -2e5f64..2e5), 1..6),
            r in 0.0f64..1e-2,
        ) {
            let n = coords.len();
            let p = PrimalProblem {
                c2: DVector::from_iterator(n, coords.iter().map(|c| c.0)),
                c1: DVector::from_iterator(n, coords.iter().map(|c| c.1)),
                lo: DVector::from_iterator(n, coords.iter().map(|c| c.2)),
                hi: DVector::from_iterator(n, coords.iter().map(|c| c.3)),
                r_primal: r,
            };
            let ell = DVector::from_iterator(n, coords.iter().map(|c| c.4));
            let x = primal_update(&p, &ell).unwrap();
            let oracle = projected_gradient(&p, &ell);
            for c in 0..n {
                prop_assert!(p.lo[c] <= x[c] && x[c] <= p.hi[c]);
                prop_assert!((x[c] - oracle[c]).abs() <= 1e-8 * x[c].abs().max(1.0));
            }
        }

        #[test]
        fn duals_stay_nonnegative(
            d in prop::collection::vec(0.0f64..1e6, 7),
            g in prop::collection::vec(-1e6f64..1e6, 7),
            a in prop::collection::vec(0.0f64..1e3, 7),
        ) {
            let (next, _) = dual_update(
                &DVector::from_vec(d),
                &DVector::from_vec(g),
                &DVector::from_vec(a),
                &DVector::from_element(7, 1e-3),
            ).unwrap();
            prop_assert!(next.iter().all(|v| *v >= 0.0));
        }
    }
}
