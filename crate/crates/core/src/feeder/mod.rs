//! Physical multiphase feeder: model, admittance, power flow (the plant),
//! measurements and numerical sensitivity models.

mod linearize;
mod measure;
mod network;

pub use linearize::{linearize, AreaSensitivityDump, InjectionPoint, SensitivityDump, SensitivityModel};
pub use measure::{measure, InterfaceKind, MeasurementDims, MeasurementSpec, MeasurementVector};
pub use network::{build_admittance, Network, OperatingPoint, PowerFlowSolution};

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::config::{parse_phases, FeederFile};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: String,
    /// Sorted phase indices (0 = a, 1 = b, 2 = c).
    pub phases: Vec<usize>,
    /// Phase-to-neutral base voltage (V).
    pub base_voltage_v: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Line {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub phases: Vec<usize>,
    /// Series impedance matrix (ohm), rows/columns ordered as `phases`.
    pub z_ohm: DMatrix<Complex64>,
    pub ampacity_a: f64,
}

/// Constant-power wye load on one phase; `s_va` is consumption.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Load {
    pub bus: usize,
    pub phase: usize,
    pub s_va: Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slack {
    pub bus: usize,
    /// Source voltage (V) per slack-bus phase, in bus phase order.
    pub voltages_v: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerSite {
    pub id: String,
    pub bus: usize,
    pub phases: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeederModel {
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub loads: Vec<Load>,
    pub slack: Slack,
    pub ders: Vec<DerSite>,
}

impl FeederModel {
    pub fn from_file(file: &FeederFile) -> Result<Self> {
        let mut bus_index = HashMap::new();
        let mut buses = Vec::with_capacity(file.buses.len());
        for b in &file.buses {
            if bus_index.insert(b.id.clone(), buses.len()).is_some() {
                return Err(Error::config(format!("duplicate bus `{}`", b.id)));
            }
            buses.push(Bus {
                id: b.id.clone(),
                phases: parse_phases(&b.phases)?,
                base_voltage_v: b.base_voltage_v,
            });
        }
        let lookup = |id: &str| -> Result<usize> {
            bus_index
                .get(id)
                .copied()
                .ok_or_else(|| Error::config(format!("unknown bus `{id}`")))
        };

        let mut lines = Vec::with_capacity(file.lines.len());
        for l in &file.lines {
            let from = lookup(&l.from)?;
            let to = lookup(&l.to)?;
            let phases = match &l.phases {
                Some(p) => parse_phases(p)?,
                None => buses[to].phases.clone(),
            };
            let n = phases.len();
            let z_ohm = match (&l.r_ohm, &l.x_ohm, l.z_self_ohm) {
                (Some(r), Some(x), None) => {
                    if r.len() != n || x.len() != n || r.iter().chain(x).any(|row| row.len() != n) {
                        return Err(Error::config(format!(
                            "line `{}`: impedance matrices must be {n}x{n}",
                            l.id
                        )));
                    }
                    DMatrix::from_fn(n, n, |i, j| Complex64::new(r[i][j], x[i][j]))
                }
                (None, None, Some(zs)) => {
                    let zm = l.z_mutual_ohm.unwrap_or([0.0, 0.0]);
                    DMatrix::from_fn(n, n, |i, j| {
                        if i == j {
                            Complex64::new(zs[0], zs[1])
                        } else {
                            Complex64::new(zm[0], zm[1])
                        }
                    })
                }
                _ => {
                    return Err(Error::config(format!(
                        "line `{}`: give either r_ohm and x_ohm, or z_self_ohm",
                        l.id
                    )))
                }
            };
            lines.push(Line {
                id: l.id.clone(),
                from,
                to,
                phases,
                z_ohm,
                ampacity_a: l.ampacity_a,
            });
        }

        let mut loads = Vec::new();
        for ld in &file.loads {
            let bus = lookup(&ld.bus)?;
            let phases = match &ld.phases {
                Some(p) => parse_phases(p)?,
                None => buses[bus].phases.clone(),
            };
            let q = match (ld.q_var, ld.pf) {
                (Some(q), _) => q,
                (None, Some(pf)) => {
                    if !(pf > 0.0 && pf <= 1.0) {
                        return Err(Error::config(format!("load at `{}`: pf must be in (0, 1]", ld.bus)));
                    }
                    ld.p_w * (1.0 / (pf * pf) - 1.0).sqrt()
                }
                (None, None) => 0.0,
            };
            let share = Complex64::new(ld.p_w, q) / phases.len() as f64;
            for &ph in &phases {
                loads.push(Load {
                    bus,
                    phase: ph,
                    s_va: share,
                });
            }
        }

        let slack_bus = lookup(&file.slack.bus)?;
        let sb = &buses[slack_bus];
        let voltages_v = match (&file.slack.voltages_v, file.slack.voltage_pu) {
            (Some(v), None) => v
                .iter()
                .map(|[mag, ang]| Complex64::from_polar(*mag, ang.to_radians()))
                .collect(),
            (None, mag) => {
                let mag = mag.unwrap_or(1.0) * sb.base_voltage_v;
                sb.phases
                    .iter()
                    .map(|&p| Complex64::from_polar(mag, -(p as f64) * 120f64.to_radians()))
                    .collect()
            }
            (Some(_), Some(_)) => {
                return Err(Error::config("slack: give voltage_pu or voltages_v, not both"))
            }
        };

        let mut ders = Vec::new();
        for d in &file.ders {
            let bus = lookup(&d.bus)?;
            let phases = match &d.phases {
                Some(p) => parse_phases(p)?,
                None => buses[bus].phases.clone(),
            };
            ders.push(DerSite {
                id: d.id.clone(),
                bus,
                phases,
            });
        }

        let model = FeederModel {
            name: file.name.clone(),
            buses,
            lines,
            loads,
            slack: Slack {
                bus: slack_bus,
                voltages_v,
            },
            ders,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn bus_index(&self, id: &str) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or_else(|| Error::config(format!("unknown bus `{id}`")))
    }

    pub fn line_index(&self, id: &str) -> Result<usize> {
        self.lines
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::config(format!("unknown line `{id}`")))
    }

    pub fn der_index(&self, id: &str) -> Result<usize> {
        self.ders
            .iter()
            .position(|d| d.id == id)
            .ok_or_else(|| Error::config(format!("unknown DER `{id}`")))
    }

    /// Checks the structural invariants: radial and connected topology rooted
    /// at the slack, consistent phasing, positive ampacities, nonnegative
    /// resistances, and phases of loads/DERs present at their buses.
    pub fn validate(&self) -> Result<()> {
        let nb = self.buses.len();
        let mut ids = HashSet::new();
        for l in &self.lines {
            if !ids.insert(l.id.as_str()) {
                return Err(Error::config(format!("duplicate line id `{}`", l.id)));
            }
        }
        let mut ids = HashSet::new();
        for d in &self.ders {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::config(format!("duplicate DER id `{}`", d.id)));
            }
        }

        let mut seen_pairs: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for l in &self.lines {
            if l.from >= nb || l.to >= nb || l.from == l.to {
                return Err(Error::config(format!("line `{}` has invalid endpoints", l.id)));
            }
            for &p in &l.phases {
                if !self.buses[l.from].phases.contains(&p) || !self.buses[l.to].phases.contains(&p) {
                    return Err(Error::config(format!(
                        "line `{}` phase {} missing at an endpoint bus",
                        l.id,
                        crate::config::phase_name(p)
                    )));
                }
            }
            if l.z_ohm.nrows() != l.phases.len() || l.z_ohm.ncols() != l.phases.len() {
                return Err(Error::config(format!("line `{}` impedance has wrong size", l.id)));
            }
            if l.z_ohm.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::config(format!("line `{}` impedance is not finite", l.id)));
            }
            if (0..l.phases.len()).any(|i| l.z_ohm[(i, i)].re < 0.0) {
                return Err(Error::config(format!("line `{}` has negative resistance", l.id)));
            }
            if !(l.ampacity_a > 0.0) {
                return Err(Error::config(format!("line `{}` ampacity must be positive", l.id)));
            }
            let key = (l.from.min(l.to), l.from.max(l.to));
            let used = seen_pairs.entry(key).or_default();
            if l.phases.iter().any(|p| used.contains(p)) {
                return Err(Error::config(format!(
                    "duplicate line between `{}` and `{}`",
                    self.buses[key.0].id, self.buses[key.1].id
                )));
            }
            used.extend(&l.phases);
        }

        for b in &self.buses {
            if !(b.base_voltage_v > 0.0) {
                return Err(Error::config(format!("bus `{}` base voltage must be positive", b.id)));
            }
        }
        if self.slack.bus >= nb {
            return Err(Error::config("slack bus out of range"));
        }
        if self.slack.voltages_v.len() != self.buses[self.slack.bus].phases.len() {
            return Err(Error::config("slack voltages must match the slack bus phases"));
        }

        // Radial, connected, and each bus fed on all of its phases.
        let feeding = self.feeding_lines()?;
        for (b, bus) in self.buses.iter().enumerate() {
            if b == self.slack.bus {
                continue;
            }
            let l = &self.lines[feeding[b].expect("connected")];
            if bus.phases.iter().any(|p| !l.phases.contains(p)) {
                return Err(Error::config(format!(
                    "bus `{}` has phases not supplied by line `{}`",
                    bus.id, l.id
                )));
            }
        }

        for ld in &self.loads {
            if ld.bus >= nb || !self.buses[ld.bus].phases.contains(&ld.phase) {
                return Err(Error::config("load phase missing at its bus"));
            }
        }
        for d in &self.ders {
            if d.bus >= nb || d.phases.is_empty() || d.phases.iter().any(|p| !self.buses[d.bus].phases.contains(p)) {
                return Err(Error::config(format!("DER `{}` phase missing at its bus", d.id)));
            }
        }
        Ok(())
    }

    /// For each bus, the line that feeds it from the slack side (`None` for
    /// the slack). Fails when the feeder is disconnected or meshed.
    pub fn feeding_lines(&self) -> Result<Vec<Option<usize>>> {
        let nb = self.buses.len();
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb];
        for (li, l) in self.lines.iter().enumerate() {
            adj[l.from].push((l.to, li));
            adj[l.to].push((l.from, li));
        }
        let mut feeding = vec![None; nb];
        let mut visited = vec![false; nb];
        let mut queue = VecDeque::from([self.slack.bus]);
        visited[self.slack.bus] = true;
        while let Some(b) = queue.pop_front() {
            for &(nbh, li) in &adj[b] {
                if Some(li) == feeding[b] {
                    continue;
                }
                if visited[nbh] {
                    return Err(Error::config(format!(
                        "meshed topology at bus `{}`; only radial feeders are supported",
                        self.buses[nbh].id
                    )));
                }
                visited[nbh] = true;
                feeding[nbh] = Some(li);
                queue.push_back(nbh);
            }
        }
        if let Some(b) = visited.iter().position(|v| !v) {
            return Err(Error::config(format!(
                "bus `{}` is not connected to the slack bus",
                self.buses[b].id
            )));
        }
        Ok(feeding)
    }

    /// Buses in the subtree rooted at `bus` (inclusive).
    pub fn downstream_buses(&self, bus: usize) -> Result<Vec<usize>> {
        let feeding = self.feeding_lines()?;
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); self.buses.len()];
        for (b, f) in feeding.iter().enumerate() {
            if let Some(li) = f {
                let l = &self.lines[*li];
                let parent = if l.to == b { l.from } else { l.to };
                children[parent].push(b);
            }
        }
        let mut out = vec![bus];
        let mut i = 0;
        while i < out.len() {
            out.extend(children[out[i]].iter().copied());
            i += 1;
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use crate::config::{BusEntry, DerSiteEntry, LineEntry, LoadEntry, SlackEntry};

    /// Single-phase two-bus feeder: slack `n1` at 1.0 pu, line `r + jx`.
    pub fn two_bus(r: f64, x: f64, load_w: f64, load_var: f64) -> FeederFile {
        FeederFile {
            name: "two-bus".into(),
            buses: vec![
                BusEntry { id: "n1".into(), phases: "a".into(), base_voltage_v: 1000.0 },
                BusEntry { id: "n2".into(), phases: "a".into(), base_voltage_v: 1000.0 },
            ],
            lines: vec![LineEntry {
                id: "L1".into(),
                from: "n1".into(),
                to: "n2".into(),
                phases: None,
                r_ohm: None,
                x_ohm: None,
                z_self_ohm: Some([r, x]),
                z_mutual_ohm: None,
                ampacity_a: 500.0,
            }],
            loads: if load_w != 0.0 || load_var != 0.0 {
                vec![LoadEntry { bus: "n2".into(), phases: None, p_w: load_w, q_var: Some(load_var), pf: None }]
            } else {
                vec![]
            },
            slack: SlackEntry { bus: "n1".into(), voltage_pu: Some(1.0), voltages_v: None },
            ders: vec![
                DerSiteEntry { id: "D1".into(), bus: "n1".into(), phases: None },
                DerSiteEntry { id: "D2".into(), bus: "n2".into(), phases: None },
            ],
        }
    }
}
