//! Closed-loop certificate for the multi-area controller on a static linear
//! plant `y = K x + k`.
//!
//! After eliminating measurements and set-points, the stacked duals evolve as
//! `d⁺ = P≥0(d − α(G(d) − h))` with `G(d) = R d − (C K + D Aᵀ) x(d)` and
//! `x(d)` the per-area regularized primal solution. The certificate bounds
//! the strong monotonicity and Lipschitz constants of `G` through the area
//! matrices `C_i`, `D_i`, the sensitivity blocks `K_ij` and the regularization.
//!
//! Two forms are computed. `Nominal` is the compact closed form: `‖R_i‖` on
//! the diagonal and `L = (‖R‖ + ‖CK + DAᵀ‖‖K_d‖‖C‖) / min(m + r)`.
//! `Derived` uses the bounds the monotonicity argument actually supports:
//! `λ_min(R_i)` on the diagonal, no `‖D_i‖` factor on the local mismatch
//! term, `‖K_j‖` in the parent coupling term, the coupling placed at
//! `(i, P(i))`, and `L = ‖R‖ + ‖CK + DAᵀ‖‖K_d‖‖C‖ / min(m + r)`. The two
//! agree when `R_i` is a multiple of the identity, local models are exact
//! and areas are decoupled.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::controller::{constraint_offset, dual_len, primal_update, setpoint_term, AreaLimits, LcConfig, PrimalProblem};
use crate::feeder::MeasurementDims;
use crate::hierarchy::{selection_maps, ControlAreaTree};
use crate::sim::System;
use crate::{Error, Result};

/// Largest singular value; zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.singular_values().max()
}

/// Constraint map of one area, `C_i y + b_i + D_i x_P(i) ≤ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cdb {
    pub c: DMatrix<f64>,
    /// Columns follow the parent's stacked `x`; zero columns for the root.
    pub d: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// `C_i = blkdiag([s1ᵀ; −s1ᵀ], [s1ᵀ; −s1ᵀ], [I; −I], I)` over `y = col(p0, q0, v, i)`.
pub fn constraint_matrix(tracking: bool, dims: MeasurementDims) -> DMatrix<f64> {
    let s = if tracking { 1.0 } else { 0.0 };
    let (m, nv, ni) = (dims.m, dims.nv, dims.ni);
    let mut c = DMatrix::zeros(dual_len(dims), dims.len());
    for k in 0..m {
        c[(0, k)] = s;
        c[(1, k)] = -s;
        c[(2, m + k)] = s;
        c[(3, m + k)] = -s;
    }
    for k in 0..nv {
        c[(4 + k, 2 * m + k)] = 1.0;
        c[(4 + nv + k, 2 * m + k)] = -1.0;
    }
    for k in 0..ni {
        c[(4 + 2 * nv + k, 2 * m + nv + k)] = 1.0;
    }
    c
}

/// `(C_i, D_i, b_i)` for area `area`. Signs of `D_i` follow the injection
/// convention of the controller: a parent's VDER set-point lowers the
/// child's import target, so it enters the `λ` row with `+s`.
pub fn build_cdb(
    tree: &ControlAreaTree,
    area: usize,
    dims: MeasurementDims,
    config: &LcConfig,
    limits: &AreaLimits,
) -> Result<Cdb> {
    let a = tree
        .areas
        .get(area)
        .ok_or_else(|| Error::config(format!("unknown area #{area}")))?;
    let s = if a.tracking { 1.0 } else { 0.0 };
    let c = constraint_matrix(a.tracking, dims);
    let d = match a.parent {
        Some(p) => {
            let (tp, tq) = selection_maps(tree, p, area)?;
            let mut d = DMatrix::zeros(dual_len(dims), tp.len());
            for col in 0..tp.len() {
                d[(0, col)] = s * tp[col];
                d[(1, col)] = -s * tp[col];
                d[(2, col)] = s * tq[col];
                d[(3, col)] = -s * tq[col];
            }
            d
        }
        None => DMatrix::zeros(dual_len(dims), 0),
    };
    Ok(Cdb { c, d, b: constraint_offset(config, limits) })
}

/// How a parent's VDER columns enter the static plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VderChannel {
    /// Ideal power transfer at the child's interface bus.
    Injection,
    /// No direct effect; the child's DERs realize it. Matches the simulator's
    /// linear plant.
    ChildResponse,
}

impl fmt::Display for VderChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VderChannel::Injection => "VDER set-points act as injections at the child interface bus",
            VderChannel::ChildResponse => "VDER set-points act only through the child area's DERs",
        })
    }
}

/// `K_ij` blocks and offsets `k_i` of the interconnected static model.
pub fn build_global_k(system: &System, channel: VderChannel) -> (Vec<Vec<DMatrix<f64>>>, Vec<DVector<f64>>) {
    let full: Vec<DMatrix<f64>> = match channel {
        VderChannel::Injection => system.global.iter().map(|g| g.k.clone()).collect(),
        VderChannel::ChildResponse => system.plant_sensitivities(),
    };
    let blocks = full
        .iter()
        .map(|k| {
            (0..system.tree.len())
                .map(|j| k.columns(system.col_offset[j], system.tree.areas[j].x_len()).into_owned())
                .collect()
        })
        .collect();
    let offsets = system.global.iter().map(|g| g.offset.clone()).collect();
    (blocks, offsets)
}

/// Everything the certificate and the linear closed loop need.
#[derive(Debug, Clone)]
pub struct CertificateInputs {
    pub ids: Vec<String>,
    pub parent: Vec<Option<usize>>,
    pub cdb: Vec<Cdb>,
    /// Constant interface set-point term (baseline import, and the reference
    /// at the root).
    pub setpoint: Vec<DVector<f64>>,
    /// Local models `K_i` used by each controller.
    pub k_local: Vec<DMatrix<f64>>,
    /// `K_ij`.
    pub k: Vec<Vec<DMatrix<f64>>>,
    pub k_offset: Vec<DVector<f64>>,
    /// Per area and `x` coordinate: belongs to a VDER.
    pub vder_mask: Vec<Vec<bool>>,
    pub problems: Vec<PrimalProblem>,
    /// Strong convexity `m_i` of the area cost.
    pub m: Vec<f64>,
    pub r_primal: Vec<f64>,
    /// Diagonal of `R_i^d`.
    pub r_dual: Vec<DVector<f64>>,
    /// Diagonal of `α_i`.
    pub gains: Vec<DVector<f64>>,
    pub channel: VderChannel,
}

impl CertificateInputs {
    /// Inputs for `system` with the interface reference `(Δp, Δq)` at the root.
    pub fn from_system(system: &System, channel: VderChannel, reference: (f64, f64)) -> Result<Self> {
        let tree = &system.tree;
        let (k, k_offset) = build_global_k(system, channel);
        let mut cdb = Vec::new();
        let mut setpoint = Vec::new();
        for (i, a) in tree.areas.iter().enumerate() {
            let dims = system.specs[i].dims();
            cdb.push(build_cdb(tree, i, dims, &system.configs[i], &system.limits[i])?);
            let (bp, bq) = system.baseline[i];
            let (p, q) = if a.parent.is_none() { (bp - reference.0, bq - reference.1) } else { (bp, bq) };
            setpoint.push(setpoint_term(a.tracking, p, q, dims));
        }
        let inputs = CertificateInputs {
            ids: tree.areas.iter().map(|a| a.id.clone()).collect(),
            parent: tree.areas.iter().map(|a| a.parent).collect(),
            cdb,
            setpoint,
            k_local: system.local.iter().map(|l| l.k.clone()).collect(),
            k,
            k_offset,
            vder_mask: tree
                .areas
                .iter()
                .map(|a| a.ders.iter().flat_map(|d| [d.is_virtual(); 2]).collect())
                .collect(),
            problems: tree
                .areas
                .iter()
                .zip(&system.configs)
                .map(|(a, c)| PrimalProblem::from_area(a, c.r_primal))
                .collect(),
            m: tree.areas.iter().map(|a| a.strong_convexity()).collect(),
            r_primal: system.configs.iter().map(|c| c.r_primal).collect(),
            r_dual: system
                .configs
                .iter()
                .zip(&system.specs)
                .map(|(c, s)| c.dual_regularization(s.dims()))
                .collect(),
            gains: system
                .configs
                .iter()
                .zip(&system.specs)
                .map(|(c, s)| c.gains(s.dims()))
                .collect(),
            channel,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.parent.len(),
            self.cdb.len(),
            self.setpoint.len(),
            self.k_local.len(),
            self.k.len(),
            self.k_offset.len(),
            self.vder_mask.len(),
            self.problems.len(),
            self.m.len(),
            self.r_primal.len(),
            self.r_dual.len(),
            self.gains.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!("certificate inputs: per-area lists {lens:?} for {n} areas")));
        }
        for i in 0..n {
            let id = &self.ids[i];
            let bad = |what: String| Err(Error::Dimension(format!("certificate inputs, area `{id}`: {what}")));
            let cdb = &self.cdb[i];
            let (nd, ny) = (cdb.c.nrows(), cdb.c.ncols());
            let nx = self.k_local[i].ncols();
            if cdb.b.len() != nd || cdb.d.nrows() != nd || self.setpoint[i].len() != nd {
                return bad("b, D or set-point rows differ from C".into());
            }
            if self.r_dual[i].len() != nd || self.gains[i].len() != nd {
                return bad("regularization or gains do not match the dual length".into());
            }
            let parent_cols = self.parent[i].map_or(0, |p| self.k_local[p].ncols());
            if cdb.d.ncols() != parent_cols {
                return bad(format!("D has {} columns, parent has {parent_cols} set-points", cdb.d.ncols()));
            }
            if self.k_local[i].nrows() != ny || self.k_offset[i].len() != ny {
                return bad("local model rows differ from C columns".into());
            }
            if self.problems[i].len() != nx || self.vder_mask[i].len() != nx {
                return bad("primal problem does not match the local model".into());
            }
            if self.k[i].len() != n {
                return bad("K row has the wrong number of blocks".into());
            }
            for j in 0..n {
                if self.k[i][j].shape() != (ny, self.k_local[j].ncols()) {
                    return bad(format!("K block for `{}` has shape {:?}", self.ids[j], self.k[i][j].shape()));
                }
            }
            if self.r_dual[i].iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                return bad("dual regularization must be finite and nonnegative".into());
            }
            if !(self.m[i] > 0.0) || !(self.r_primal[i] >= 0.0) {
                return bad("needs m > 0 and r_p ≥ 0".into());
            }
        }
        Ok(())
    }

    /// First index of each area's block in the stacked duals.
    pub fn dual_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut at = 0;
        for c in &self.cdb {
            out.push(at);
            at += c.c.nrows();
        }
        out
    }

    pub fn dual_total(&self) -> usize {
        self.cdb.iter().map(|c| c.c.nrows()).sum()
    }

    fn x_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut at = 0;
        for k in &self.k_local {
            out.push(at);
            at += k.ncols();
        }
        out
    }

    /// Dense `C K + D Aᵀ` over the stacked duals and set-points.
    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        let (dofs, xofs) = (self.dual_offsets(), self.x_offsets());
        let nx: usize = self.k_local.iter().map(|k| k.ncols()).sum();
        let mut out = DMatrix::zeros(self.dual_total(), nx);
        for i in 0..self.len() {
            let c = &self.cdb[i].c;
            for j in 0..self.len() {
                let block = c * &self.k[i][j];
                out.view_mut((dofs[i], xofs[j]), block.shape()).copy_from(&block);
            }
            if let Some(p) = self.parent[i] {
                let d = &self.cdb[i].d;
                let mut v = out.view_mut((dofs[i], xofs[p]), d.shape());
                v += d;
            }
        }
        out
    }

    /// Same inputs with every `R_i^d` scaled by `t`.
    pub fn with_dual_regularization_scaled(&self, t: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.r_dual {
            *r *= t;
        }
        out
    }

    /// Same inputs with every gain set to `alpha`.
    pub fn with_uniform_gain(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        for g in &mut out.gains {
            g.fill(alpha);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CertificateForm {
    Nominal,
    Derived,
}

/// `M`, `L` and the resulting test for one form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub form: CertificateForm,
    pub m: Vec<Vec<f64>>,
    pub l: f64,
    pub lambda_min: f64,
    /// `max|λ| / min|λ|` of `M + Mᵀ`.
    pub condition: f64,
    pub pass: bool,
    /// Largest uniform gain with `α < λ_min / L²`; only on pass.
    pub alpha_bar: Option<f64>,
    /// `λ_max(α)² / λ_min(α)` of the configured gains.
    pub gain_ratio: f64,
    /// `λ_min(M + Mᵀ) / L²`.
    pub gain_limit: f64,
    pub gains_admissible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaDiagnostics {
    pub id: String,
    pub dual_len: usize,
    pub m_plus_rp: f64,
    pub norm_r: f64,
    pub min_r: f64,
    pub norm_c: f64,
    pub norm_d: f64,
    pub norm_k_local: f64,
    /// `‖K_ii − K_i‖₂`.
    pub mismatch: f64,
    /// `‖K_ij‖₂` for every `j`, VDER columns included.
    pub coupling: Vec<f64>,
    /// `‖K_ij‖₂` with the VDER columns of area `j` dropped.
    pub coupling_physical: Vec<f64>,
}

/// The verdict: positivity from the nominal `M`, gains against
/// `λ_min(M + Mᵀ) / L²` with the derived Lipschitz bound (the nominal `L`
/// divides `‖R‖` by `min(m + r_p)` and undershoots the Lipschitz constant of
/// `G` once `‖R‖` exceeds it).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub vder_channel: VderChannel,
    pub vder_channel_note: String,
    pub pass: bool,
    pub lambda_min: f64,
    pub lipschitz: f64,
    pub gain_limit: f64,
    /// Largest admissible uniform gain; only on pass.
    pub alpha_bar: Option<f64>,
    pub gain_ratio: f64,
    pub gains_admissible: bool,
    pub nominal: Certificate,
    pub derived: Certificate,
    pub areas: Vec<AreaDiagnostics>,
}


struct Norms {
    c: Vec<f64>,
    d: Vec<f64>,
    k: Vec<f64>,
    mismatch: Vec<f64>,
    cross: Vec<Vec<f64>>,
    r_max: Vec<f64>,
    r_min: Vec<f64>,
    mr: Vec<f64>,
}

fn norms(inputs: &CertificateInputs) -> Norms {
    let n = inputs.len();
    let max = |v: &DVector<f64>| v.iter().copied().fold(0.0, f64::max);
    let min = |v: &DVector<f64>| v.iter().copied().fold(f64::INFINITY, f64::min);
    Norms {
        c: inputs.cdb.iter().map(|c| spectral_norm(&c.c)).collect(),
        d: inputs.cdb.iter().map(|c| spectral_norm(&c.d)).collect(),
        k: inputs.k_local.iter().map(spectral_norm).collect(),
        mismatch: (0..n).map(|i| spectral_norm(&(&inputs.k[i][i] - &inputs.k_local[i]))).collect(),
        cross: (0..n).map(|i| (0..n).map(|j| spectral_norm(&inputs.k[i][j])).collect()).collect(),
        r_max: inputs.r_dual.iter().map(max).collect(),
        r_min: inputs.r_dual.iter().map(|r| if r.is_empty() { 0.0 } else { min(r) }).collect(),
        mr: (0..n).map(|i| inputs.m[i] + inputs.r_primal[i]).collect(),
    }
}

fn finish(form: CertificateForm, m: DMatrix<f64>, l: f64, gains: &[DVector<f64>]) -> Result<Certificate> {
    let sym = &m + m.transpose();
    let eig = SymmetricEigen::new(sym).eigenvalues;
    if eig.iter().any(|v| !v.is_finite()) || !l.is_finite() {
        return Err(Error::Numerical("certificate: non-finite eigenvalues or Lipschitz bound".into()));
    }
    let lambda_min = eig.min();
    let abs_max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let abs_min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let pass = lambda_min > 0.0;
    let gain_limit = lambda_min / (l * l);
    let (gmax, gmin) = gains
        .iter()
        .flat_map(|g| g.iter().copied())
        .fold((0.0f64, f64::INFINITY), |(hi, lo), v| (hi.max(v), lo.min(v)));
    let gain_ratio = if gmin > 0.0 { gmax * gmax / gmin } else { f64::INFINITY };
    Ok(Certificate {
        form,
        m: m.row_iter().map(|r| r.iter().copied().collect()).collect(),
        l,
        lambda_min,
        condition: abs_max / abs_min,
        pass,
        alpha_bar: pass.then_some(gain_limit),
        gain_ratio,
        gain_limit,
        gains_admissible: pass && gain_ratio < gain_limit,
    })
}

fn lipschitz_parts(inputs: &CertificateInputs, nm: &Norms) -> (f64, f64, f64) {
    let r = nm.r_max.iter().copied().fold(0.0, f64::max);
    let x = spectral_norm(&inputs.coupling_matrix())
        * nm.k.iter().copied().fold(0.0, f64::max)
        * nm.c.iter().copied().fold(0.0, f64::max);
    let mr = nm.mr.iter().copied().fold(f64::INFINITY, f64::min);
    (r, x, mr)
}

/// Compact closed-form `M` and `L`.
pub fn nominal_certificate(inputs: &CertificateInputs) -> Result<Certificate> {
    inputs.validate()?;
    let n = inputs.len();
    let nm = norms(inputs);
    // A_ij = 1 iff j is a child of i.
    let adj = |i: usize, j: usize| if inputs.parent[j] == Some(i) { 1.0 } else { 0.0 };
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            nm.r_max[i] - nm.mismatch[i] / nm.mr[i] * (nm.d[i] * nm.c[i] * nm.c[i] * nm.k[i])
        } else {
            -nm.cross[i][j] / nm.mr[j] * (nm.c[i] * nm.c[j] * nm.k[j]) - adj(i, j) * nm.d[i] * nm.c[j] / nm.mr[j]
        }
    });
    let (r, x, mr) = lipschitz_parts(inputs, &nm);
    finish(CertificateForm::Nominal, m, (r + x) / mr, &inputs.gains)
}

/// `M` and `L` from the term-by-term monotonicity bounds.
pub fn derived_certificate(inputs: &CertificateInputs) -> Result<Certificate> {
    inputs.validate()?;
    let n = inputs.len();
    let nm = norms(inputs);
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            nm.r_min[i] - nm.c[i] * nm.c[i] * nm.mismatch[i] * nm.k[i] / nm.mr[i]
        } else {
            let parent = if inputs.parent[i] == Some(j) { nm.d[i] * nm.c[j] * nm.k[j] / nm.mr[j] } else { 0.0 };
            -nm.c[i] * nm.c[j] * nm.cross[i][j] * nm.k[j] / nm.mr[j] - parent
        }
    });
    let (r, x, mr) = lipschitz_parts(inputs, &nm);
    finish(CertificateForm::Derived, m, r + x / mr, &inputs.gains)
}

pub fn build_certificate(inputs: &CertificateInputs) -> Result<CertificateReport> {
    let nominal = nominal_certificate(inputs)?;
    let derived = derived_certificate(inputs)?;
    let nm = norms(inputs);
    let n = inputs.len();
    let areas = (0..n)
        .map(|i| AreaDiagnostics {
            id: inputs.ids[i].clone(),
            dual_len: inputs.cdb[i].c.nrows(),
            m_plus_rp: nm.mr[i],
            norm_r: nm.r_max[i],
            min_r: nm.r_min[i],
            norm_c: nm.c[i],
            norm_d: nm.d[i],
            norm_k_local: nm.k[i],
            mismatch: nm.mismatch[i],
            coupling: nm.cross[i].clone(),
            coupling_physical: (0..n)
                .map(|j| {
                    let mut k = inputs.k[i][j].clone();
                    for (c, v) in inputs.vder_mask[j].iter().enumerate() {
                        if *v {
                            k.column_mut(c).fill(0.0);
                        }
                    }
                    spectral_norm(&k)
                })
                .collect(),
        })
        .collect();
    let gain_limit = nominal.lambda_min / (derived.l * derived.l);
    Ok(CertificateReport {
        vder_channel: inputs.channel,
        vder_channel_note: inputs.channel.to_string(),
        pass: nominal.pass,
        lambda_min: nominal.lambda_min,
        lipschitz: derived.l,
        gain_limit,
        alpha_bar: nominal.pass.then_some(gain_limit),
        gain_ratio: nominal.gain_ratio,
        gains_admissible: nominal.pass && nominal.gain_ratio < gain_limit,
        nominal,
        derived,
        areas,
    })
}

fn fmt_certificate(f: &mut fmt::Formatter<'_>, c: &Certificate) -> fmt::Result {
    writeln!(f, "  M =")?;
    for row in &c.m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>12.4e}")).collect();
        writeln!(f, "    [{}]", cells.join(" "))?;
    }
    writeln!(f, "  L                    = {:.6e}", c.l)?;
    writeln!(f, "  lambda_min(M + M^T)  = {:.6e}", c.lambda_min)?;
    writeln!(f, "  condition(M + M^T)   = {:.3e}", c.condition)?;
    writeln!(f, "  M + M^T positive     = {}", if c.pass { "yes" } else { "no" })?;
    match c.alpha_bar {
        Some(a) => writeln!(f, "  uniform gain bound   = {a:.6e}")?,
        None => writeln!(f, "  uniform gain bound   = none")?,
    }
    writeln!(
        f,
        "  configured gains     = lambda_max^2/lambda_min {:.6e} vs limit {:.6e}: {}",
        c.gain_ratio,
        c.gain_limit,
        if c.gains_admissible { "admissible" } else { "not admissible" }
    )
}

impl fmt::Display for CertificateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Closed-loop stability certificate")?;
        writeln!(f, "VDER model: {}", self.vder_channel_note)?;
        writeln!(f, "Result: {}", if self.pass { "PASS" } else { "FAIL" })?;
        writeln!(f, "  lambda_min(M + M^T)  = {:.6e} (nominal M)", self.lambda_min)?;
        writeln!(f, "  Lipschitz bound L    = {:.6e} (derived)", self.lipschitz)?;
        match self.alpha_bar {
            Some(a) => writeln!(f, "  uniform gain bound   = {a:.6e}")?,
            None => writeln!(f, "  uniform gain bound   = none")?,
        }
        writeln!(
            f,
            "  configured gains     = lambda_max^2/lambda_min {:.6e} vs limit {:.6e}: {}",
            self.gain_ratio,
            self.gain_limit,
            if self.gains_admissible { "admissible" } else { "not admissible" }
        )?;
        writeln!(f)?;
        writeln!(f, "Nominal form:")?;
        fmt_certificate(f, &self.nominal)?;
        writeln!(f)?;
        writeln!(f, "Derived form (lambda_min(R_i), parent coupling at (i, P(i))):")?;
        fmt_certificate(f, &self.derived)?;
        writeln!(f)?;
        writeln!(f, "Per-area diagnostics:")?;
        for a in &self.areas {
            writeln!(
                f,
                "  {}: duals {}, m+r_p {:.4e}, |R| {:.3e} (min {:.3e}), |C| {:.4}, |D| {:.4}, |K_i| {:.4e}, |K_ii-K_i| {:.4e}",
                a.id, a.dual_len, a.m_plus_rp, a.norm_r, a.min_r, a.norm_c, a.norm_d, a.norm_k_local, a.mismatch
            )?;
            for (j, other) in self.areas.iter().enumerate() {
                if other.id != a.id {
                    writeln!(
                        f,
                        "    |K_{{{},{}}}| = {:.4e} (physical columns only {:.4e})",
                        a.id, other.id, a.coupling[j], a.coupling_physical[j]
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// The dual iteration `d⁺ = P≥0(d − α(G(d) − h))` on the static model.
#[derive(Debug, Clone)]
pub struct LinearClosedLoop<'a> {
    pub inputs: &'a CertificateInputs,
    dual_offsets: Vec<usize>,
    coupling: DMatrix<f64>,
    h: DVector<f64>,
}

impl<'a> LinearClosedLoop<'a> {
    pub fn new(inputs: &'a CertificateInputs) -> Result<Self> {
        inputs.validate()?;
        let dual_offsets = inputs.dual_offsets();
        let mut h = DVector::zeros(inputs.dual_total());
        for i in 0..inputs.len() {
            let hi = &inputs.cdb[i].c * &inputs.k_offset[i] + &inputs.cdb[i].b + &inputs.setpoint[i];
            h.rows_mut(dual_offsets[i], hi.len()).copy_from(&hi);
        }
        Ok(LinearClosedLoop { inputs, dual_offsets, coupling: inputs.coupling_matrix(), h })
    }

    fn block<'v>(&self, v: &'v DVector<f64>, i: usize) -> nalgebra::DVectorView<'v, f64> {
        v.rows(self.dual_offsets[i], self.inputs.cdb[i].c.nrows())
    }

    fn stacked(&self, per_area: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(per_area.iter().map(|v| v.len()).sum(), per_area.iter().flat_map(|v| v.iter().copied()))
    }

    /// Constant term `h = C k + b + set-point term`.
    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    /// Stacked gains `α`.
    pub fn gains(&self) -> DVector<f64> {
        self.stacked(&self.inputs.gains)
    }

    /// `x(d)`: each area's primal solution for its own duals and local model.
    pub fn primal(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        let mut xs = Vec::with_capacity(self.inputs.len());
        for i in 0..self.inputs.len() {
            let w = self.inputs.cdb[i].c.tr_mul(&self.block(d, i));
            let ell = self.inputs.k_local[i].tr_mul(&w);
            xs.push(primal_update(&self.inputs.problems[i], &ell)?);
        }
        Ok(self.stacked(&xs))
    }

    /// `G(d) = R d − (C K + D Aᵀ) x(d)`.
    pub fn g(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        if d.len() != self.h.len() {
            return Err(Error::Dimension(format!("duals: expected {}, got {}", self.h.len(), d.len())));
        }
        let r = self.stacked(&self.inputs.r_dual);
        Ok(r.component_mul(d) - &self.coupling * self.primal(d)?)
    }

    pub fn step(&self, d: &DVector<f64>) -> Result<DVector<f64>> {
        let a = self.gains();
        let s = &self.h - self.g(d)?;
        Ok((d + a.component_mul(&s)).map(|v| v.max(0.0)))
    }

    /// `‖d − P≥0(d − α(G(d) − h))‖₂`.
    pub fn residual(&self, d: &DVector<f64>) -> Result<f64> {
        Ok((d - self.step(d)?).norm())
    }

    /// Residual in constraint units, `‖α⁻¹(d − d⁺)‖₂ / max(‖h‖₂, 1)`.
    /// Coordinates with zero gain never move and are skipped.
    pub fn scaled_residual(&self, d: &DVector<f64>) -> Result<f64> {
        let a = self.gains();
        let diff = d - self.step(d)?;
        let scaled = diff.zip_map(&a, |v, g| if g > 0.0 { v / g } else { 0.0 });
        Ok(scaled.norm() / self.h.norm().max(1.0))
    }

    /// Iterates from `d0` until the scaled residual is below `tol` or
    /// `max_ticks` have passed. Returns the final duals and tick count.
    pub fn run(&self, d0: &DVector<f64>, max_ticks: usize, tol: f64) -> Result<(DVector<f64>, usize)> {
        let mut d = d0.clone();
        for tick in 0..max_ticks {
            if self.scaled_residual(&d)? < tol {
                return Ok((d, tick));
            }
            d = self.step(&d)?;
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("linear closed loop diverged at tick {tick}")));
            }
        }
        Ok((d, max_ticks))
    }

    /// Splits stacked duals into per-area blocks.
    pub fn split(&self, d: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.inputs.len()).map(|i| self.block(d, i).into_owned()).collect()
    }

    /// Stacks per-area duals.
    pub fn join(&self, per_area: &[DVector<f64>]) -> Result<DVector<f64>> {
        if per_area.len() != self.inputs.len()
            || per_area.iter().zip(&self.inputs.cdb).any(|(d, c)| d.len() != c.c.nrows())
        {
            return Err(Error::Dimension("per-area duals do not match the areas".into()));
        }
        Ok(self.stacked(per_area))
    }
}

/// Scaled fixed-point residual of per-area duals on the static model.
pub fn equilibrium_residual(inputs: &CertificateInputs, duals: &[DVector<f64>]) -> Result<f64> {
    let lc = LinearClosedLoop::new(inputs)?;
    let d = lc.join(duals)?;
    lc.scaled_residual(&d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Origin, ScenarioBundle, ScenarioFile};
    use crate::synthetic::{generate, SyntheticSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preset_system(name: &str) -> System {
        System::build(&ScenarioBundle::load(name, &[]).unwrap()).unwrap()
    }

    /// Small random three-phase feeder from the synthetic generator.
    fn small_system(seed: u64) -> System {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = match rng.gen_range(0..3) {
            0 => vec![None, Some(0)],
            1 => vec![None, Some(0), Some(0)],
            _ => vec![None, Some(0), Some(1)],
        };
        let ders = rng.gen_range(1..=2);
        let spec = SyntheticSpec {
            seed,
            parents,
            buses_per_area: ders + rng.gen_range(1..=2),
            ders_per_area: ders,
            load_range_w: (20.0e3, 80.0e3),
            ..SyntheticSpec::default()
        };
        let s = generate(&spec).unwrap();
        let scenario: ScenarioFile = toml::from_str("feeder = \"f\"\npartition = \"p\"\nduration_s = 1.0\n").unwrap();
        System::build(&ScenarioBundle {
            scenario,
            feeder: s.feeder,
            partition: s.partition,
            sensitivities: None,
            origin: Origin::Preset,
            scenario_path: "random".into(),
            overrides: vec![],
        })
        .unwrap()
    }

    fn dims(m: usize, nv: usize, ni: usize) -> MeasurementDims {
        MeasurementDims { m, nv, ni }
    }

    fn with_uniform_r(inputs: &CertificateInputs, r: f64) -> CertificateInputs {
        let mut out = inputs.clone();
        for v in &mut out.r_dual {
            v.fill(r);
        }
        out
    }

    #[test]
    fn constraint_matrix_matches_apply_c() {
        let dm = dims(3, 4, 2);
        let y = DVector::from_fn(dm.len(), |k, _| (k as f64 * 0.37).sin() * 100.0);
        for tracking in [true, false] {
            let c = constraint_matrix(tracking, dm);
            let direct = crate::controller::apply_c(tracking, &y, dm);
            assert!((&c * &y - direct).norm() < 1e-9);
            let d = DVector::from_fn(c.nrows(), |k, _| k as f64);
            assert!((c.tr_mul(&d) - crate::controller::apply_ct(tracking, &d, dm)).norm() < 1e-9);
        }
    }

    #[test]
    fn scalar_area_has_the_signed_pattern() {
        let c = constraint_matrix(true, dims(1, 1, 1));
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(7, 4, &[
             1.0,  0.0,  0.0, 0.0,
            -1.0,  0.0,  0.0, 0.0,
             0.0,  1.0,  0.0, 0.0,
             0.0, -1.0,  0.0, 0.0,
             0.0,  0.0,  1.0, 0.0,
             0.0,  0.0, -1.0, 0.0,
             0.0,  0.0,  0.0, 1.0,
        ]);
        assert_eq!(c, expected);
    }

    #[test]
    fn offset_follows_limits() {
        let limits = AreaLimits {
            v_max_v: DVector::from_vec(vec![1.05]),
            v_min_v: DVector::from_vec(vec![0.95]),
            i_max_a: DVector::from_vec(vec![135.0]),
        };
        let b = constraint_offset(&LcConfig::default(), &limits);
        assert_eq!(b.as_slice(), &[-100.0, -100.0, -100.0, -100.0, -1.05, 0.95, -135.0]);
    }

    #[test]
    fn tracking_off_zeroes_tracking_rows_and_d() {
        let sys = preset_system("5bus-step-2ca");
        let mut tree = sys.tree.clone();
        tree.areas[1].tracking = false;
        let cdb = build_cdb(&tree, 1, sys.specs[1].dims(), &sys.configs[1], &sys.limits[1]).unwrap();
        assert!(cdb.c.rows(0, 4).iter().all(|v| *v == 0.0));
        assert!(cdb.d.iter().all(|v| *v == 0.0));
        assert_eq!(cdb.d.ncols(), tree.areas[0].x_len());

        let on = build_cdb(&sys.tree, 1, sys.specs[1].dims(), &sys.configs[1], &sys.limits[1]).unwrap();
        assert!((spectral_norm(&on.d) - 2f64.sqrt()).abs() < 1e-12);
        let root = build_cdb(&sys.tree, 0, sys.specs[0].dims(), &sys.configs[0], &sys.limits[0]).unwrap();
        assert_eq!(root.d.ncols(), 0);
    }

    #[test]
    fn single_area_global_block_equals_local_model() {
        let sys = preset_system("5bus-step-1ca");
        let (k, _) = build_global_k(&sys, VderChannel::Injection);
        let rel = spectral_norm(&(&k[0][0] - &sys.local[0].k)) / spectral_norm(&sys.local[0].k);
        assert!(rel < 1e-6);
    }

    #[test]
    fn child_measurements_barely_see_parent_ders() {
        let sys = preset_system("5bus-step-2ca");
        let report = build_certificate(&CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap()).unwrap();
        let ca2 = &report.areas[1];
        assert!(ca2.coupling[0] < ca2.coupling[1]);
        assert!(ca2.coupling_physical[0] < 1e-3 * ca2.coupling[1]);
        // The parent's head flow sees every child DER one for one.
        let ca1 = &report.areas[0];
        assert!(ca1.coupling[1] > 0.5 * ca1.coupling[0]);
    }

    #[test]
    fn child_response_channel_zeroes_vder_columns() {
        let sys = preset_system("5bus-step-2ca");
        let (k, _) = build_global_k(&sys, VderChannel::ChildResponse);
        let vder = sys.tree.areas[0].vder_index(1).unwrap();
        for i in 0..2 {
            assert!(k[i][0].column(2 * vder).iter().all(|v| *v == 0.0));
            assert!(k[i][0].column(2 * vder + 1).iter().all(|v| *v == 0.0));
        }
        assert!(k[0][0].column(0).norm() > 0.0);
    }

    #[test]
    fn single_area_exact_model_reduces_to_regularization() {
        let sys = preset_system("5bus-step-1ca");
        let inputs = CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap();
        let c = nominal_certificate(&inputs).unwrap();
        let r = inputs.r_dual[0].max();
        assert!((c.m[0][0] - r).abs() < 1e-18);
        assert!(c.pass);
        let zero = with_uniform_r(&inputs, 0.0);
        assert!(!nominal_certificate(&zero).unwrap().pass);
    }

    #[test]
    fn decoupled_areas_give_diagonal_m() {
        let sys = small_system(3);
        let mut inputs = CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap();
        let n = inputs.len();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    inputs.k[i][j].fill(0.0);
                }
            }
            inputs.cdb[i].d.fill(0.0);
            inputs.r_dual[i].fill(0.1 * (i + 1) as f64);
        }
        for c in [nominal_certificate(&inputs).unwrap(), derived_certificate(&inputs).unwrap()] {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        assert_eq!(c.m[i][j], 0.0);
                    }
                }
            }
            assert!((c.lambda_min - 2.0 * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn five_bus_two_area_regression() {
        let sys = preset_system("5bus-step-2ca");
        let report = build_certificate(&CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap()).unwrap();
        assert!(!report.pass);
        assert!((report.nominal.lambda_min - (-0.2573667)).abs() < 1e-6, "{}", report.nominal.lambda_min);
        assert!(report.nominal.alpha_bar.is_none());
        assert!(!report.gains_admissible);
        let text = report.to_string();
        assert!(text.contains("Result: FAIL"));
        assert!(text.contains("injections at the child interface bus"));
    }

    #[test]
    fn scaling_regularization_only_moves_the_diagonal() {
        let sys = small_system(11);
        let base = CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap();
        let c1 = nominal_certificate(&base).unwrap();
        let mut last = c1.lambda_min;
        for t in [2.0, 10.0, 1e3, 1e6] {
            let ct = nominal_certificate(&base.with_dual_regularization_scaled(t)).unwrap();
            for i in 0..base.len() {
                for j in 0..base.len() {
                    if i == j {
                        let r = base.r_dual[i].max();
                        assert!((ct.m[i][i] - c1.m[i][i] - (t - 1.0) * r).abs() < 1e-9 * (1.0 + ct.m[i][i].abs()));
                    } else {
                        assert_eq!(ct.m[i][j], c1.m[i][j]);
                    }
                }
            }
            assert!(ct.lambda_min >= last - 1e-12);
            last = ct.lambda_min;
        }
    }

    #[test]
    fn residual_is_positive_at_zero_with_a_violation() {
        let sys = preset_system("5bus-step-2ca");
        let inputs = CertificateInputs::from_system(&sys, VderChannel::ChildResponse, (200.0e3, 0.0)).unwrap();
        let zero: Vec<DVector<f64>> = inputs.cdb.iter().map(|c| DVector::zeros(c.c.nrows())).collect();
        assert!(equilibrium_residual(&inputs, &zero).unwrap() > 1e-3);
    }

    #[test]
    fn static_loop_converges_and_residual_is_lipschitz_around_it() {
        let sys = preset_system("5bus-step-2ca");
        let inputs = CertificateInputs::from_system(&sys, VderChannel::ChildResponse, (200.0e3, 0.0)).unwrap();
        let lc = LinearClosedLoop::new(&inputs).unwrap();
        let (d, ticks) = lc.run(&DVector::zeros(lc.h().len()), 10_000, 1e-9).unwrap();
        assert!(ticks < 10_000);
        let r0 = lc.residual(&d).unwrap();
        let l = derived_certificate(&inputs).unwrap().l;
        let amax = lc.gains().max();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scale in [1e-9, 1e-6, 1e-3, 1.0] {
            let delta = DVector::from_fn(d.len(), |_, _| rng.gen_range(-1.0..1.0) * scale);
            let r = lc.residual(&(&d + &delta)).unwrap();
            assert!(r <= r0 + (2.0 + amax * l) * delta.norm() * (1.0 + 1e-9));
        }
    }

    /// Smallest uniform `R = r I` (over decades) passing `which`.
    fn passing_r(inputs: &CertificateInputs, which: fn(&CertificateInputs) -> Result<Certificate>) -> Option<(f64, Certificate)> {
        (-4..=6).map(|e| 10f64.powi(e)).find_map(|r| {
            let c = which(&with_uniform_r(inputs, r)).unwrap();
            c.pass.then_some((r, c))
        })
    }

    #[test]
    fn passing_certificates_converge_on_random_feeders() {
        for seed in 0..24 {
            let sys = small_system(100 + seed);
            let inputs = CertificateInputs::from_system(&sys, VderChannel::Injection, (50.0e3, 10.0e3)).unwrap();
            let (r, _) = passing_r(&inputs, nominal_certificate).expect("regularization large enough passes");
            let report = build_certificate(&with_uniform_r(&inputs, r)).unwrap();
            let (rd, derived) = passing_r(&inputs, derived_certificate).expect("regularization large enough passes");
            let cases = [(r, report.alpha_bar.unwrap(), "report"), (rd, derived.alpha_bar.unwrap(), "derived")];
            for (r, bar, what) in cases {
                let tuned = with_uniform_r(&inputs, r).with_uniform_gain(0.9 * bar);
                assert!(build_certificate(&tuned).unwrap().gains_admissible || what == "derived");
                assert!(derived_certificate(&tuned).unwrap().gains_admissible || what == "report");
                let lc = LinearClosedLoop::new(&tuned).unwrap();
                let (d, ticks) = lc.run(&DVector::zeros(lc.h().len()), 10_000, 1e-6).unwrap();
                assert!(
                    ticks < 10_000,
                    "seed {seed}, {what}: residual {:e} after 10^4 ticks",
                    lc.scaled_residual(&d).unwrap()
                );
            }
        }
    }

    #[test]
    fn nominal_lipschitz_constant_undershoots_g() {
        // A common shift of λ and μ leaves x unchanged, so G moves by R Δd.
        let sys = preset_system("5bus-step-1ca");
        let inputs = with_uniform_r(&CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap(), 1.0);
        let lc = LinearClosedLoop::new(&inputs).unwrap();
        let d = DVector::zeros(lc.h().len());
        let mut shifted = d.clone();
        shifted[0] = 1.0;
        shifted[1] = 1.0;
        let dg = (lc.g(&shifted).unwrap() - lc.g(&d).unwrap()).norm();
        let dd = (&shifted - &d).norm();
        assert!((dg - dd).abs() < 1e-12);
        assert!(nominal_certificate(&inputs).unwrap().l < 1.0);
        assert!(derived_certificate(&inputs).unwrap().l >= 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn g_is_strongly_monotone_and_lipschitz(
            seed in 0u64..1000,
            log_r in -6.0f64..1.0,
            uniform in any::<bool>(),
            log_scale in -4.0f64..2.0,
            dseed in any::<u64>(),
        ) {
            let sys = small_system(seed);
            let mut inputs = CertificateInputs::from_system(&sys, VderChannel::Injection, (0.0, 0.0)).unwrap();
            if uniform {
                inputs = with_uniform_r(&inputs, 10f64.powf(log_r));
            } else {
                inputs = inputs.with_dual_regularization_scaled(10f64.powf(log_r + 3.0));
            }
            let cert = derived_certificate(&inputs).unwrap();
            let lc = LinearClosedLoop::new(&inputs).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(dseed);
            let scale = 10f64.powf(log_scale);
            let n = lc.h().len();
            let d1 = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0) * scale);
            let d2 = DVector::from_fn(n, |_, _| rng.gen_range(0.0..1.0) * scale);
            let (g1, g2) = (lc.g(&d1).unwrap(), lc.g(&d2).unwrap());
            let dd = &d1 - &d2;
            let dg = &g1 - &g2;
            let delta = dd.dot(&dg);
            let bound = 0.5 * cert.lambda_min * dd.norm_squared();
            let tol = 1e-9 * (dd.norm() * dg.norm() + bound.abs());
            prop_assert!(delta >= bound - tol, "delta {delta:e} < bound {bound:e}");
            prop_assert!(dg.norm() <= cert.l * dd.norm() * (1.0 + 1e-9));
        }
    }
}
