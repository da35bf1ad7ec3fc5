use nalgebra::DVector;
use num_complex::Complex64;

use super::{FeederModel, Network, PowerFlowSolution};
use crate::{Error, Result};

/// How power at an area's interface bus is observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterfaceKind {
    /// The feeder head: power delivered by the source at the slack bus.
    Source,
    /// Power received at the interface bus through its feeding line.
    Line(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasurementDims {
    /// Interface phase count.
    pub m: usize,
    pub nv: usize,
    pub ni: usize,
}

impl MeasurementDims {
    pub fn len(&self) -> usize {
        2 * self.m + self.nv + self.ni
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What one control area measures: interface power per phase, voltage
/// magnitudes at monitored nodes and current magnitudes on monitored line
/// phases.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSpec {
    pub interface_bus: usize,
    pub interface: InterfaceKind,
    pub interface_phases: Vec<usize>,
    /// Node indices of monitored voltages.
    pub v_nodes: Vec<usize>,
    /// `(line, position within the line's phases)`.
    pub i_channels: Vec<(usize, usize)>,
}

impl MeasurementSpec {
    pub fn new(
        model: &FeederModel,
        network: &Network,
        interface_bus: usize,
        monitored_buses: &[usize],
        monitored_lines: &[usize],
    ) -> Result<Self> {
        if interface_bus >= model.buses.len() {
            return Err(Error::config("interface bus not in model"));
        }
        let interface = if interface_bus == model.slack.bus {
            InterfaceKind::Source
        } else {
            InterfaceKind::Line(network.feeding_line(interface_bus).expect("non-slack bus is fed"))
        };
        let mut v_nodes = Vec::new();
        for &b in monitored_buses {
            let bus = model
                .buses
                .get(b)
                .ok_or_else(|| Error::config(format!("monitored bus #{b} not in model")))?;
            for &p in &bus.phases {
                v_nodes.push(network.node(b, p).unwrap());
            }
        }
        let mut i_channels = Vec::new();
        for &l in monitored_lines {
            let line = model
                .lines
                .get(l)
                .ok_or_else(|| Error::config(format!("monitored line #{l} not in model")))?;
            for k in 0..line.phases.len() {
                i_channels.push((l, k));
            }
        }
        Ok(MeasurementSpec {
            interface_bus,
            interface,
            interface_phases: model.buses[interface_bus].phases.clone(),
            v_nodes,
            i_channels,
        })
    }

    pub fn dims(&self) -> MeasurementDims {
        MeasurementDims {
            m: self.interface_phases.len(),
            nv: self.v_nodes.len(),
            ni: self.i_channels.len(),
        }
    }
}

/// One area's measurements: `p0`/`q0` imported across the interface bus
/// (W, var per phase), voltage magnitudes (V), current magnitudes (A).
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    pub v: Vec<f64>,
    pub v_base: Vec<f64>,
    pub i: Vec<f64>,
}

impl MeasurementVector {
    /// `col(p0, q0, v, i)`.
    pub fn stack(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.p0.len() + self.q0.len() + self.v.len() + self.i.len(),
            self.p0.iter().chain(&self.q0).chain(&self.v).chain(&self.i).copied(),
        )
    }

    pub fn from_stack(y: &DVector<f64>, dims: MeasurementDims, v_base: Vec<f64>) -> Self {
        let (m, nv, ni) = (dims.m, dims.nv, dims.ni);
        MeasurementVector {
            p0: y.rows(0, m).iter().copied().collect(),
            q0: y.rows(m, m).iter().copied().collect(),
            v: y.rows(2 * m, nv).iter().copied().collect(),
            v_base,
            i: y.rows(2 * m + nv, ni).iter().copied().collect(),
        }
    }

    pub fn v_pu(&self) -> Vec<f64> {
        self.v.iter().zip(&self.v_base).map(|(v, b)| v / b).collect()
    }

    pub fn total_p0(&self) -> f64 {
        self.p0.iter().sum()
    }

    pub fn total_q0(&self) -> f64 {
        self.q0.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.p0.iter().chain(&self.q0).chain(&self.v).chain(&self.i).all(|x| x.is_finite())
    }
}

pub fn measure(
    network: &Network,
    solution: &PowerFlowSolution,
    injections: &DVector<Complex64>,
    spec: &MeasurementSpec,
) -> MeasurementVector {
    let v = &solution.voltages;
    let interface_power: Vec<Complex64> = match spec.interface {
        InterfaceKind::Source => {
            let src = network.source_power(v, injections);
            let slack = network.slack_nodes();
            spec.interface_phases
                .iter()
                .map(|&p| {
                    let node = network.node(spec.interface_bus, p).unwrap();
                    src[slack.iter().position(|&s| s == node).unwrap()]
                })
                .collect()
        }
        InterfaceKind::Line(l) => {
            let currents = network.line_currents(l, v);
            let (from, to) = network.line_nodes(l);
            let into_to = to.iter().any(|&n| network.nodes[n].0 == spec.interface_bus);
            spec.interface_phases
                .iter()
                .map(|&p| {
                    let node = network.node(spec.interface_bus, p).unwrap();
                    let k = if into_to {
                        to.iter().position(|&n| n == node).unwrap()
                    } else {
                        from.iter().position(|&n| n == node).unwrap()
                    };
                    let i_in = if into_to { currents[k] } else { -currents[k] };
                    v[node] * i_in.conj()
                })
                .collect()
        }
    };
    let mut cache: Vec<(usize, DVector<Complex64>)> = Vec::new();
    let i = spec
        .i_channels
        .iter()
        .map(|&(l, k)| {
            if let Some((_, c)) = cache.iter().find(|(cl, _)| *cl == l) {
                return c[k].norm();
            }
            let c = network.line_currents(l, v);
            let out = c[k].norm();
            cache.push((l, c));
            out
        })
        .collect();
    MeasurementVector {
        p0: interface_power.iter().map(|s| s.re).collect(),
        q0: interface_power.iter().map(|s| s.im).collect(),
        v: spec.v_nodes.iter().map(|&n| v[n].norm()).collect(),
        v_base: spec.v_nodes.iter().map(|&n| network.base_v[n]).collect(),
        i,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::testing::two_bus;

    #[test]
    fn no_load_head_power_is_zero() {
        let m = FeederModel::from_file(&two_bus(0.3, 0.4, 0.0, 0.0)).unwrap();
        let net = Network::new(&m).unwrap();
        let inj = net.load_injections(&m);
        let sol = net.solve(&inj, None).unwrap();
        let spec = MeasurementSpec::new(&m, &net, 0, &[1], &[0]).unwrap();
        let y = measure(&net, &sol, &inj, &spec);
        assert!(y.p0.iter().all(|p| p.abs() < 1.0));
        assert!(y.i[0] < 1e-9);
    }

    #[test]
    fn child_interface_import_equals_downstream_load() {
        // Power received at n2 equals the constant-power load there.
        let m = FeederModel::from_file(&two_bus(0.3, 0.4, 50_000.0, 10_000.0)).unwrap();
        let net = Network::new(&m).unwrap();
        let inj = net.load_injections(&m);
        let sol = net.solve(&inj, None).unwrap();
        let spec = MeasurementSpec::new(&m, &net, 1, &[], &[]).unwrap();
        let y = measure(&net, &sol, &inj, &spec);
        assert!((y.p0[0] - 50_000.0).abs() < 1e-3, "{}", y.p0[0]);
        assert!((y.q0[0] - 10_000.0).abs() < 1e-3);
    }
}
