use nalgebra::{DMatrix, DVector, LU, Dyn};
use num_complex::Complex64;

use super::FeederModel;
use crate::{Error, Result, POWER_BASE_VA};

/// Voltage-update tolerance of the fixed-point solve (pu).
const VOLTAGE_TOL_PU: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;

/// Assembles the complex nodal admittance matrix over all `(bus, phase)`
/// nodes, ordered bus by bus and by phase within a bus.
pub fn build_admittance(model: &FeederModel) -> Result<DMatrix<Complex64>> {
    model.validate()?;
    let (node_of, n) = node_numbering(model);
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for l in &model.lines {
        let yl = line_admittance(l)?;
        let f: Vec<usize> = l.phases.iter().map(|&p| node_of[l.from][p].unwrap()).collect();
        let t: Vec<usize> = l.phases.iter().map(|&p| node_of[l.to][p].unwrap()).collect();
        for i in 0..l.phases.len() {
            for j in 0..l.phases.len() {
                let v = yl[(i, j)];
                y[(f[i], f[j])] += v;
                y[(t[i], t[j])] += v;
                y[(f[i], t[j])] -= v;
                y[(t[i], f[j])] -= v;
            }
        }
    }
    Ok(y)
}

fn node_numbering(model: &FeederModel) -> (Vec<[Option<usize>; 3]>, usize) {
    let mut node_of = vec![[None; 3]; model.buses.len()];
    let mut n = 0;
    for (b, bus) in model.buses.iter().enumerate() {
        for &p in &bus.phases {
            node_of[b][p] = Some(n);
            n += 1;
        }
    }
    (node_of, n)
}

fn line_admittance(l: &super::Line) -> Result<DMatrix<Complex64>> {
    let scale = l.z_ohm.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(Error::Singular(format!("line `{}` has zero impedance", l.id)));
    }
    let lu = l.z_ohm.clone().lu();
    let det = lu.determinant().norm();
    // Relative determinant check catches numerically singular matrices too.
    if !(det > 1e-12 * scale.powi(l.phases.len() as i32)) {
        return Err(Error::Singular(format!("line `{}` impedance matrix is singular", l.id)));
    }
    lu.try_inverse()
        .ok_or_else(|| Error::Singular(format!("line `{}` impedance matrix is singular", l.id)))
}

/// Compiled network: admittance, factorized non-slack block, and the
/// no-load voltage profile used by the Z-bus fixed-point iteration.
#[derive(Debug, Clone)]
pub struct Network {
    /// `(bus, phase)` of each node.
    pub nodes: Vec<(usize, usize)>,
    node_of: Vec<[Option<usize>; 3]>,
    pub base_v: Vec<f64>,
    pub y: DMatrix<Complex64>,
    slack_nodes: Vec<usize>,
    load_nodes: Vec<usize>,
    slack_v: DVector<Complex64>,
    y_ll: LU<Complex64, Dyn, Dyn>,
    /// No-load voltages of the non-slack nodes.
    w: DVector<Complex64>,
    line_y: Vec<DMatrix<Complex64>>,
    line_nodes: Vec<(Vec<usize>, Vec<usize>)>,
    /// Line feeding each bus and whether it is oriented towards the bus.
    feeding: Vec<Option<usize>>,
    flat_start: DVector<Complex64>,
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Voltages of every node (V).
    pub voltages: DVector<Complex64>,
    pub iterations: usize,
    /// Max nodal power mismatch over non-slack nodes (pu of 1 MVA).
    pub residual_pu: f64,
}

/// A solved state together with the injections that produced it.
#[derive(Debug, Clone)]
pub struct OperatingPoint {
    pub injections: DVector<Complex64>,
    pub solution: PowerFlowSolution,
}

impl Network {
    pub fn new(model: &FeederModel) -> Result<Self> {
        let y = build_admittance(model)?;
        let (node_of, n) = node_numbering(model);
        let mut nodes = Vec::with_capacity(n);
        let mut base_v = Vec::with_capacity(n);
        for (b, bus) in model.buses.iter().enumerate() {
            for &p in &bus.phases {
                nodes.push((b, p));
                base_v.push(bus.base_voltage_v);
            }
        }
        let slack_nodes: Vec<usize> = model.buses[model.slack.bus]
            .phases
            .iter()
            .map(|&p| node_of[model.slack.bus][p].unwrap())
            .collect();
        let load_nodes: Vec<usize> = (0..n).filter(|i| !slack_nodes.contains(i)).collect();
        let slack_v = DVector::from_vec(model.slack.voltages_v.clone());

        let y_ll_m = y.select_rows(&load_nodes).select_columns(&load_nodes);
        let y_ls = y.select_rows(&load_nodes).select_columns(&slack_nodes);
        let y_ll = y_ll_m.lu();
        let rhs = -(&y_ls * &slack_v);
        let w = y_ll
            .solve(&rhs)
            .filter(|w| w.iter().all(|v| v.re.is_finite() && v.im.is_finite()))
            .ok_or_else(|| Error::Singular("non-slack admittance block is singular".into()))?;

        let mut line_y = Vec::with_capacity(model.lines.len());
        let mut line_nodes = Vec::with_capacity(model.lines.len());
        for l in &model.lines {
            line_y.push(line_admittance(l)?);
            line_nodes.push((
                l.phases.iter().map(|&p| node_of[l.from][p].unwrap()).collect(),
                l.phases.iter().map(|&p| node_of[l.to][p].unwrap()).collect(),
            ));
        }

        let mut flat = DVector::from_element(n, Complex64::new(0.0, 0.0));
        for (k, &i) in slack_nodes.iter().enumerate() {
            flat[i] = slack_v[k];
        }
        for (k, &i) in load_nodes.iter().enumerate() {
            flat[i] = w[k];
        }

        Ok(Network {
            nodes,
            node_of,
            base_v,
            y,
            slack_nodes,
            load_nodes,
            slack_v,
            y_ll,
            w,
            line_y,
            line_nodes,
            feeding: model.feeding_lines()?,
            flat_start: flat,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, bus: usize, phase: usize) -> Option<usize> {
        self.node_of.get(bus).and_then(|n| n[phase])
    }

    pub fn slack_nodes(&self) -> &[usize] {
        &self.slack_nodes
    }

    pub fn feeding_line(&self, bus: usize) -> Option<usize> {
        self.feeding[bus]
    }

    pub fn line_admittance(&self, line: usize) -> &DMatrix<Complex64> {
        &self.line_y[line]
    }

    pub fn line_nodes(&self, line: usize) -> (&[usize], &[usize]) {
        let (f, t) = &self.line_nodes[line];
        (f, t)
    }

    pub fn zero_injections(&self) -> DVector<Complex64> {
        DVector::from_element(self.node_count(), Complex64::new(0.0, 0.0))
    }

    /// Adds `s_total` (generation positive) at `bus`, split equally over `phases`.
    pub fn add_bus_injection(
        &self,
        injections: &mut DVector<Complex64>,
        bus: usize,
        phases: &[usize],
        s_total: Complex64,
    ) {
        let share = s_total / phases.len() as f64;
        for &p in phases {
            if let Some(i) = self.node(bus, p) {
                injections[i] += share;
            }
        }
    }

    /// Nodal injections of the model's loads (consumption enters negative).
    pub fn load_injections(&self, model: &FeederModel) -> DVector<Complex64> {
        let mut inj = self.zero_injections();
        for ld in &model.loads {
            if let Some(i) = self.node(ld.bus, ld.phase) {
                inj[i] -= ld.s_va;
            }
        }
        inj
    }

    /// Z-bus fixed point `V <- w + Y_LL^-1 conj(S / V)`.
    pub fn solve(
        &self,
        injections: &DVector<Complex64>,
        warm_start: Option<&DVector<Complex64>>,
    ) -> Result<PowerFlowSolution> {
        if injections.len() != self.node_count() {
            return Err(Error::Dimension(format!(
                "{} injections for {} nodes",
                injections.len(),
                self.node_count()
            )));
        }
        let start = warm_start.unwrap_or(&self.flat_start);
        let mut v_l: DVector<Complex64> = DVector::from_iterator(
            self.load_nodes.len(),
            self.load_nodes.iter().map(|&i| start[i]),
        );
        let s_l: DVector<Complex64> = DVector::from_iterator(
            self.load_nodes.len(),
            self.load_nodes.iter().map(|&i| injections[i]),
        );
        let mut max_update = f64::INFINITY;
        for it in 1..=MAX_ITERATIONS {
            let currents = s_l.zip_map(&v_l, |s, v| (s / v).conj());
            let dv = self
                .y_ll
                .solve(&currents)
                .ok_or_else(|| Error::Singular("non-slack admittance block is singular".into()))?;
            let next = &self.w + dv;
            max_update = 0.0;
            for (k, &node) in self.load_nodes.iter().enumerate() {
                let d = (next[k] - v_l[k]).norm() / self.base_v[node];
                max_update = if d.is_nan() { f64::NAN } else { max_update.max(d) };
            }
            v_l = next;
            if max_update.is_nan() {
                break;
            }
            if max_update < VOLTAGE_TOL_PU {
                let voltages = self.assemble(&v_l);
                let residual_pu = self.mismatch_pu(&voltages, injections);
                return Ok(PowerFlowSolution {
                    voltages,
                    iterations: it,
                    residual_pu,
                });
            }
        }
        Err(Error::Diverged {
            iterations: MAX_ITERATIONS,
            max_update_pu: max_update,
        })
    }

    pub fn operating_point(&self, injections: DVector<Complex64>) -> Result<OperatingPoint> {
        let solution = self.solve(&injections, None)?;
        Ok(OperatingPoint {
            injections,
            solution,
        })
    }

    fn assemble(&self, v_l: &DVector<Complex64>) -> DVector<Complex64> {
        let mut v = self.zero_injections();
        for (k, &i) in self.slack_nodes.iter().enumerate() {
            v[i] = self.slack_v[k];
        }
        for (k, &i) in self.load_nodes.iter().enumerate() {
            v[i] = v_l[k];
        }
        v
    }

    /// Complex power flowing from every node into the network, `V conj(Y V)`.
    pub fn nodal_power(&self, voltages: &DVector<Complex64>) -> DVector<Complex64> {
        let i = &self.y * voltages;
        voltages.zip_map(&i, |v, i| v * i.conj())
    }

    fn mismatch_pu(&self, voltages: &DVector<Complex64>, injections: &DVector<Complex64>) -> f64 {
        let s = self.nodal_power(voltages);
        self.load_nodes
            .iter()
            .map(|&i| (s[i] - injections[i]).norm() / POWER_BASE_VA)
            .fold(0.0, f64::max)
    }

    /// Series losses summed over all lines (VA).
    pub fn losses(&self, voltages: &DVector<Complex64>) -> Complex64 {
        let mut total = Complex64::new(0.0, 0.0);
        for (li, (f, t)) in self.line_nodes.iter().enumerate() {
            let dv = DVector::from_iterator(f.len(), f.iter().zip(t).map(|(&a, &b)| voltages[a] - voltages[b]));
            let i = &self.line_y[li] * &dv;
            for k in 0..f.len() {
                total += dv[k] * i[k].conj();
            }
        }
        total
    }

    /// Power delivered by the source at the slack nodes (VA per slack phase).
    pub fn source_power(
        &self,
        voltages: &DVector<Complex64>,
        injections: &DVector<Complex64>,
    ) -> Vec<Complex64> {
        let y_rows = self.y.select_rows(&self.slack_nodes);
        let i = y_rows * voltages;
        self.slack_nodes
            .iter()
            .enumerate()
            .map(|(k, &n)| voltages[n] * i[k].conj() - injections[n])
            .collect()
    }

    /// Phase currents on a line, positive from its `from` bus to its `to` bus.
    pub fn line_currents(&self, line: usize, voltages: &DVector<Complex64>) -> DVector<Complex64> {
        let (f, t) = &self.line_nodes[line];
        let dv = DVector::from_iterator(f.len(), f.iter().zip(t).map(|(&a, &b)| voltages[a] - voltages[b]));
        &self.line_y[line] * dv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::testing::two_bus;
    use crate::feeder::FeederModel;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_node_admittance_is_inverse_impedance() {
        let m = FeederModel::from_file(&two_bus(0.3, 0.4, 0.0, 0.0)).unwrap();
        let y = build_admittance(&m).unwrap();
        let yz = c(1.0, 0.0) / c(0.3, 0.4);
        assert!((y[(0, 0)] - yz).norm() < 1e-12);
        assert!((y[(1, 1)] - yz).norm() < 1e-12);
        assert!((y[(0, 1)] + yz).norm() < 1e-12);
        assert!((y[(1, 0)] + yz).norm() < 1e-12);
    }

    #[test]
    fn zero_impedance_line_is_an_error_not_nan() {
        let m = FeederModel::from_file(&two_bus(0.0, 0.0, 1000.0, 0.0)).unwrap();
        assert!(matches!(Network::new(&m), Err(Error::Singular(_))));
    }

    #[test]
    fn no_load_gives_slack_voltage_everywhere() {
        let m = FeederModel::from_file(&two_bus(0.3, 0.4, 0.0, 0.0)).unwrap();
        let net = Network::new(&m).unwrap();
        let sol = net.solve(&net.load_injections(&m), None).unwrap();
        for v in sol.voltages.iter() {
            assert!((v - c(1000.0, 0.0)).norm() < 1e-9);
        }
    }

    /// Closed form for a constant-power load behind `z = r + jx` fed at `E`:
    /// |V|^4 + (2(rP + xQ) - E^2)|V|^2 + |z|^2 |S|^2 = 0 (high-voltage root).
    fn two_bus_oracle(e: f64, r: f64, x: f64, p: f64, q: f64) -> f64 {
        let b = 2.0 * (r * p + x * q) - e * e;
        let cc = (r * r + x * x) * (p * p + q * q);
        let u = (-b + (b * b - 4.0 * cc).sqrt()) / 2.0;
        u.sqrt()
    }

    #[test]
    fn two_bus_matches_quadratic_oracle() {
        let (r, x, p, q) = (0.5, 0.8, 60_000.0, 25_000.0);
        let m = FeederModel::from_file(&two_bus(r, x, p, q)).unwrap();
        let net = Network::new(&m).unwrap();
        let sol = net.solve(&net.load_injections(&m), None).unwrap();
        let expected = two_bus_oracle(1000.0, r, x, p, q);
        let got = sol.voltages[1].norm();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert!(sol.residual_pu < 1e-6);
    }

    #[test]
    fn infeasible_loading_diverges() {
        let m = FeederModel::from_file(&two_bus(5.0, 5.0, 5.0e6, 0.0)).unwrap();
        let net = Network::new(&m).unwrap();
        assert!(matches!(
            net.solve(&net.load_injections(&m), None),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn power_balance_source_equals_load_plus_losses() {
        let m = FeederModel::from_file(&two_bus(0.5, 0.8, 60_000.0, 25_000.0)).unwrap();
        let net = Network::new(&m).unwrap();
        let inj = net.load_injections(&m);
        let sol = net.solve(&inj, None).unwrap();
        let src: Complex64 = net.source_power(&sol.voltages, &inj).iter().sum();
        let losses = net.losses(&sol.voltages);
        let load = c(60_000.0, 25_000.0);
        assert!((src - load - losses).norm() / POWER_BASE_VA < 1e-6);
    }
}
