use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{measure, MeasurementDims, MeasurementSpec, Network, OperatingPoint};
use crate::{Error, Result};

/// A controllable injection channel pair (active, reactive) at a bus,
/// split equally over `phases`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionPoint {
    pub bus: usize,
    pub phases: Vec<usize>,
}

/// Linear model `y = K x + k` of one area's measurements, with
/// `K = col(M, H, A, B)` and `y = col(p0, q0, v, i)`. Columns come in
/// `(p, q)` pairs, one pair per injection point.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityModel {
    pub k: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub dims: MeasurementDims,
}

impl SensitivityModel {
    /// Interface active power rows (W per W/var).
    pub fn m(&self) -> DMatrix<f64> {
        self.k.rows(0, self.dims.m).into_owned()
    }
    pub fn h(&self) -> DMatrix<f64> {
        self.k.rows(self.dims.m, self.dims.m).into_owned()
    }
    /// Voltage rows (V per W/var).
    pub fn a(&self) -> DMatrix<f64> {
        self.k.rows(2 * self.dims.m, self.dims.nv).into_owned()
    }
    /// Current rows (A per W/var).
    pub fn b(&self) -> DMatrix<f64> {
        self.k.rows(2 * self.dims.m + self.dims.nv, self.dims.ni).into_owned()
    }

    pub fn predict(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.k * x + &self.offset
    }
}

/// Central finite differences of the measurements of every `spec` with
/// respect to the active and reactive injection at every `point`, around
/// `op`. Offsets equal the measurements at `op`, so the model is exact there.
pub fn linearize(
    network: &Network,
    op: &OperatingPoint,
    points: &[InjectionPoint],
    specs: &[&MeasurementSpec],
    epsilon: f64,
) -> Result<Vec<SensitivityModel>> {
    if !(epsilon > 0.0) {
        return Err(Error::config("linearization step must be positive"));
    }
    let stack_all = |inj: &DVector<Complex64>, warm: &DVector<Complex64>| -> Result<Vec<DVector<f64>>> {
        let sol = network.solve(inj, Some(warm))?;
        Ok(specs.iter().map(|s| measure(network, &sol, inj, s).stack()).collect())
    };
    let base: Vec<DVector<f64>> = specs
        .iter()
        .map(|s| measure(network, &op.solution, &op.injections, s).stack())
        .collect();
    let mut ks: Vec<DMatrix<f64>> = base
        .iter()
        .map(|b| DMatrix::zeros(b.len(), 2 * points.len()))
        .collect();

    for (pi, point) in points.iter().enumerate() {
        for (ci, unit) in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)].iter().enumerate() {
            let col = 2 * pi + ci;
            let channel = format!("bus #{} {}", point.bus, if ci == 0 { "p" } else { "q" });
            let mut plus = op.injections.clone();
            network.add_bus_injection(&mut plus, point.bus, &point.phases, unit * epsilon);
            let mut minus = op.injections.clone();
            network.add_bus_injection(&mut minus, point.bus, &point.phases, -unit * epsilon);
            let fail = |e: Error| Error::Linearization {
                channel: channel.clone(),
                reason: e.to_string(),
            };
            let yp = stack_all(&plus, &op.solution.voltages).map_err(fail)?;
            let ym = stack_all(&minus, &op.solution.voltages).map_err(fail)?;
            for s in 0..specs.len() {
                let d = (&yp[s] - &ym[s]) / (2.0 * epsilon);
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Linearization {
                        channel,
                        reason: "non-finite sensitivity".into(),
                    });
                }
                ks[s].set_column(col, &d);
            }
        }
    }
    Ok(ks
        .into_iter()
        .zip(base)
        .zip(specs)
        .map(|((k, offset), s)| SensitivityModel {
            k,
            offset,
            dims: s.dims(),
        })
        .collect())
}

/// Machine-readable dump of per-area sensitivity models.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SensitivityDump {
    pub areas: Vec<AreaSensitivityDump>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AreaSensitivityDump {
    pub id: String,
    /// Column labels, e.g. `DER1.p_w`, `VDER:CA2.q_var`.
    pub columns: Vec<String>,
    pub interface_phases: usize,
    pub monitored_voltages: usize,
    pub monitored_currents: usize,
    #[serde(rename = "M")]
    pub m: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub offset_m: Vec<f64>,
    pub offset_h: Vec<f64>,
    pub offset_a: Vec<f64>,
    pub offset_b: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

impl AreaSensitivityDump {
    pub fn from_model(id: &str, columns: Vec<String>, model: &SensitivityModel) -> Self {
        let d = model.dims;
        let off = |start: usize, len: usize| model.offset.rows(start, len).iter().copied().collect();
        AreaSensitivityDump {
            id: id.to_string(),
            columns,
            interface_phases: d.m,
            monitored_voltages: d.nv,
            monitored_currents: d.ni,
            m: rows_of(&model.m()),
            h: rows_of(&model.h()),
            a: rows_of(&model.a()),
            b: rows_of(&model.b()),
            offset_m: off(0, d.m),
            offset_h: off(d.m, d.m),
            offset_a: off(2 * d.m, d.nv),
            offset_b: off(2 * d.m + d.nv, d.ni),
        }
    }

    pub fn to_model(&self) -> Result<SensitivityModel> {
        let dims = MeasurementDims {
            m: self.interface_phases,
            nv: self.monitored_voltages,
            ni: self.monitored_currents,
        };
        let ncols = self.columns.len();
        let blocks = [(&self.m, dims.m), (&self.h, dims.m), (&self.a, dims.nv), (&self.b, dims.ni)];
        let mut data = Vec::new();
        for (rows, expected) in blocks {
            if rows.len() != expected || rows.iter().any(|r| r.len() != ncols) {
                return Err(Error::Dimension(format!("area `{}`: sensitivity block size mismatch", self.id)));
            }
            data.extend(rows.iter().cloned());
        }
        let k = DMatrix::from_fn(dims.len(), ncols, |r, c| data[r][c]);
        let offset: Vec<f64> = self
            .offset_m
            .iter()
            .chain(&self.offset_h)
            .chain(&self.offset_a)
            .chain(&self.offset_b)
            .copied()
            .collect();
        if offset.len() != dims.len() {
            return Err(Error::Dimension(format!("area `{}`: offset length mismatch", self.id)));
        }
        Ok(SensitivityModel {
            k,
            offset: DVector::from_vec(offset),
            dims,
        })
    }
}
