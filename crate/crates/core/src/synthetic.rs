//! Seeded generator for synthetic multi-area radial feeders.
//!
//! Each control area is a random tree of three-phase buses hanging off its
//! interface bus; child areas attach to a random bus of their parent through
//! one line. Loads are unbalanced (per-phase random), DERs three-phase.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{
    AreaEntry, BusEntry, CostCurvature, DerParams, DerSiteEntry, FeederFile, LineEntry, LoadEntry,
    PartitionFile, SlackEntry,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Parent index of each area (`None` for the root, which must be first).
    pub parents: Vec<Option<usize>>,
    /// Buses per area, including its interface bus.
    pub buses_per_area: usize,
    pub ders_per_area: usize,
    pub base_voltage_v: f64,
    /// Total active load per bus, drawn uniformly from this range (W).
    pub load_range_w: (f64, f64),
    /// Line length range (km).
    pub length_range_km: (f64, f64),
    /// Self and mutual impedance per km, `[r, x]` (ohm/km).
    pub z_self_ohm_per_km: [f64; 2],
    pub z_mutual_ohm_per_km: [f64; 2],
    pub ampacity_a: f64,
    pub der_cost_c2: f64,
}

impl Default for SyntheticSpec {
    /// Six areas on three levels: CA1 → {CA2, CA3}, CA2 → CA4, CA3 → {CA5, CA6}.
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            parents: vec![None, Some(0), Some(0), Some(1), Some(2), Some(2)],
            buses_per_area: 11,
            ders_per_area: 4,
            base_voltage_v: 2401.8,
            load_range_w: (10.0e3, 40.0e3),
            length_range_km: (0.05, 0.25),
            z_self_ohm_per_km: [0.30, 0.62],
            z_mutual_ohm_per_km: [0.10, 0.28],
            ampacity_a: 600.0,
            der_cost_c2: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFeeder {
    pub feeder: FeederFile,
    pub partition: PartitionFile,
}

pub fn area_id(k: usize) -> String {
    format!("CA{}", k + 1)
}

fn bus_id(n: usize) -> String {
    format!("b{n}")
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticFeeder> {
    let n_areas = spec.parents.len();
    if n_areas == 0 || spec.parents[0].is_some() {
        return Err(Error::config("synthetic feeder: the first area must be the root"));
    }
    for (k, p) in spec.parents.iter().enumerate().skip(1) {
        match p {
            Some(p) if *p < k => {}
            _ => {
                return Err(Error::config(format!(
                    "synthetic feeder: area {k} needs a parent listed before it"
                )))
            }
        }
    }
    if spec.ders_per_area + 1 > spec.buses_per_area {
        return Err(Error::config(
            "synthetic feeder: each area needs more buses than DERs",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut buses = Vec::new();
    let mut lines = Vec::new();
    let mut loads = Vec::new();
    let mut ders = Vec::new();
    let mut areas = Vec::new();
    // Buses and lines owned by each area; the line feeding a child's
    // interface belongs to the parent.
    let mut area_buses: Vec<Vec<String>> = vec![Vec::new(); n_areas];
    let mut area_lines: Vec<Vec<String>> = vec![Vec::new(); n_areas];

    let new_line = |lines: &mut Vec<LineEntry>, rng: &mut ChaCha8Rng, from: &str, to: &str| {
        let len = rng.gen_range(spec.length_range_km.0..spec.length_range_km.1);
        let id = format!("l{}", lines.len() + 1);
        let scale = |z: [f64; 2]| [round(z[0] * len, 6), round(z[1] * len, 6)];
        lines.push(LineEntry {
            id: id.clone(),
            from: from.to_string(),
            to: to.to_string(),
            phases: None,
            r_ohm: None,
            x_ohm: None,
            z_self_ohm: Some(scale(spec.z_self_ohm_per_km)),
            z_mutual_ohm: Some(scale(spec.z_mutual_ohm_per_km)),
            ampacity_a: spec.ampacity_a,
        });
        id
    };

    for k in 0..n_areas {
        let interface = bus_id(buses.len() + 1);
        buses.push(BusEntry {
            id: interface.clone(),
            phases: "abc".into(),
            base_voltage_v: spec.base_voltage_v,
        });
        if let Some(p) = spec.parents[k] {
            let attach = area_buses[p]
                .choose(&mut rng)
                .expect("parent area has buses")
                .clone();
            let id = new_line(&mut lines, &mut rng, &attach, &interface);
            area_lines[p].push(id);
        }
        area_buses[k].push(interface.clone());

        for _ in 1..spec.buses_per_area {
            let id = bus_id(buses.len() + 1);
            buses.push(BusEntry {
                id: id.clone(),
                phases: "abc".into(),
                base_voltage_v: spec.base_voltage_v,
            });
            let attach = area_buses[k].choose(&mut rng).expect("area has buses").clone();
            let line = new_line(&mut lines, &mut rng, &attach, &id);
            area_lines[k].push(line);
            area_buses[k].push(id.clone());

            let total = rng.gen_range(spec.load_range_w.0..spec.load_range_w.1);
            let pf = rng.gen_range(0.88..0.97);
            // Unequal per-phase split.
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
            let sum: f64 = w.iter().sum();
            for (ph, wi) in ["a", "b", "c"].iter().zip(&w) {
                loads.push(LoadEntry {
                    bus: id.clone(),
                    phases: Some(ph.to_string()),
                    p_w: round(total * wi / sum, 1),
                    q_var: None,
                    pf: Some(round(pf, 4)),
                });
            }
        }

        // DERs at distinct non-interface buses.
        let mut candidates: Vec<String> = area_buses[k][1..].to_vec();
        candidates.shuffle(&mut rng);
        let mut sites: Vec<String> = candidates.into_iter().take(spec.ders_per_area).collect();
        sites.sort_by_key(|b| b[1..].parse::<usize>().unwrap_or(0));
        let mut der_ids = Vec::new();
        for (j, bus) in sites.into_iter().enumerate() {
            let id = format!("{}.D{}", area_id(k), j + 1);
            ders.push(DerSiteEntry {
                id: id.clone(),
                bus,
                phases: None,
            });
            der_ids.push(id);
        }

        areas.push(AreaEntry {
            id: area_id(k),
            parent: spec.parents[k].map(area_id),
            interface_bus: interface,
            ders: der_ids,
            monitored_buses: Vec::new(),
            monitored_lines: Vec::new(),
            tracking: true,
        });
    }

    for (k, area) in areas.iter_mut().enumerate() {
        // The root's interface is the fixed-voltage source; nothing to monitor.
        area.monitored_buses = if k == 0 {
            area_buses[k][1..].to_vec()
        } else {
            area_buses[k].clone()
        };
        area.monitored_lines = area_lines[k].clone();
    }

    let feeder = FeederFile {
        name: format!("synthetic-{}area-seed{}", n_areas, spec.seed),
        slack: SlackEntry {
            bus: bus_id(1),
            voltage_pu: Some(1.03),
            voltages_v: None,
        },
        buses,
        lines,
        loads,
        ders,
    };
    let partition = PartitionFile {
        areas,
        der_defaults: DerParams {
            cost_c2: CostCurvature::Diagonal([spec.der_cost_c2, spec.der_cost_c2]),
            ..DerParams::default()
        },
        der_params: Vec::new(),
    };
    Ok(SyntheticFeeder { feeder, partition })
}

fn round(x: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (x * s).round() / s
}

impl SyntheticFeeder {
    pub fn feeder_toml(&self) -> Result<String> {
        toml::to_string(&self.feeder).map_err(|e| Error::config(format!("serialize feeder: {e}")))
    }

    pub fn partition_toml(&self) -> Result<String> {
        toml::to_string(&self.partition)
            .map_err(|e| Error::config(format!("serialize partition: {e}")))
    }
}
