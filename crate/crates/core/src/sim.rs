//! Closed-loop engine: first-order DER dynamics, the plant, controllers
//! sampled in root-to-leaf order, schedules, logging and metrics.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::config::{phase_name, PlantMode, ScenarioBundle, ScenarioFile};
use crate::controller::{AreaLimits, LcConfig, LocalController, StepOutcome};
use crate::feeder::{
    linearize, measure, AreaSensitivityDump, FeederModel, InjectionPoint, MeasurementSpec, Network,
    OperatingPoint, SensitivityDump, SensitivityModel,
};
use crate::hierarchy::{selection_maps, ControlAreaTree, DerKind};
use crate::{Error, Result};

/// Everything derived from a scenario before time starts: plant, tree,
/// per-area measurement sets, linear models, controller settings and limits.
#[derive(Debug, Clone)]
pub struct System {
    pub model: FeederModel,
    pub network: Network,
    pub tree: ControlAreaTree,
    pub specs: Vec<MeasurementSpec>,
    pub base: OperatingPoint,
    /// One injection point per (V)DER, areas in index order.
    pub points: Vec<InjectionPoint>,
    /// First column of each area's block in the global `x`.
    pub col_offset: Vec<usize>,
    /// Per area: measurements against every (V)DER column (global `K_i·`).
    pub global: Vec<SensitivityModel>,
    /// Per area: the model used by its controller.
    pub local: Vec<SensitivityModel>,
    pub configs: Vec<LcConfig>,
    pub limits: Vec<AreaLimits>,
    /// Interface import `(Σp0, Σq0)` per area at the base operating point.
    pub baseline: Vec<(f64, f64)>,
}

impl System {
    pub fn build(bundle: &ScenarioBundle) -> Result<Self> {
        let sc = &bundle.scenario;
        let model = FeederModel::from_file(&bundle.feeder)?;
        let network = Network::new(&model)?;
        let tree = ControlAreaTree::from_partition(&model, &bundle.partition)?;

        let specs = tree
            .areas
            .iter()
            .map(|a| MeasurementSpec::new(&model, &network, a.interface_bus, &a.monitored_buses, &a.monitored_lines))
            .collect::<Result<Vec<_>>>()?;

        let mut points = Vec::new();
        let mut col_offset = Vec::new();
        for a in &tree.areas {
            col_offset.push(2 * points.len());
            for d in &a.ders {
                points.push(InjectionPoint { bus: d.bus, phases: d.phases.clone() });
            }
        }
        let base = network
            .operating_point(network.load_injections(&model))
            .map_err(|e| Error::config(format!("base operating point: {e}")))?;
        let spec_refs: Vec<&MeasurementSpec> = specs.iter().collect();
        let global = linearize(&network, &base, &points, &spec_refs, sc.linearization_step_w)?;

        let local = match &bundle.sensitivities {
            Some(dump) => tree
                .areas
                .iter()
                .map(|a| {
                    let entry = dump
                        .areas
                        .iter()
                        .find(|e| e.id == a.id)
                        .ok_or_else(|| Error::config(format!("sensitivity file has no area `{}`", a.id)))?;
                    let m = entry.to_model()?;
                    if m.k.ncols() != a.x_len() || m.dims != specs[tree.area_index(&a.id)?].dims() {
                        return Err(Error::Dimension(format!(
                            "sensitivity file: area `{}` does not match the partition",
                            a.id
                        )));
                    }
                    Ok(m)
                })
                .collect::<Result<Vec<_>>>()?,
            None => (0..tree.len())
                .map(|i| diagonal_block(&global[i], col_offset[i], tree.areas[i].x_len()))
                .collect(),
        };

        for id in sc.controller_area.keys() {
            tree.area_index(id)
                .map_err(|_| Error::config(format!("controller_area: unknown area `{id}`")))?;
        }
        let configs = tree
            .areas
            .iter()
            .map(|a| {
                let mut c = LcConfig {
                    sample_period_s: sc.sample_period_s,
                    ..LcConfig::default()
                };
                c.apply(&sc.controller);
                if let Some(o) = sc.controller_area.get(&a.id) {
                    c.apply(o);
                }
                c.validate()?;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut v_limit: HashMap<usize, (Option<f64>, Option<f64>)> = HashMap::new();
        let mut i_limit: HashMap<usize, f64> = HashMap::new();
        for o in &sc.limit_override {
            match (&o.bus, &o.line) {
                (Some(b), None) => {
                    if o.current_limit_a.is_some() {
                        return Err(Error::config("limit_override: current_limit_a needs `line`"));
                    }
                    let e = v_limit.entry(model.bus_index(b)?).or_default();
                    e.0 = o.v_max_pu.or(e.0);
                    e.1 = o.v_min_pu.or(e.1);
                }
                (None, Some(l)) => {
                    let limit = o
                        .current_limit_a
                        .ok_or_else(|| Error::config("limit_override: `line` needs current_limit_a"))?;
                    if o.v_max_pu.is_some() || o.v_min_pu.is_some() {
                        return Err(Error::config("limit_override: voltage limits need `bus`"));
                    }
                    if !(limit > 0.0) {
                        return Err(Error::config("limit_override: current limit must be positive"));
                    }
                    i_limit.insert(model.line_index(l)?, limit);
                }
                _ => return Err(Error::config("limit_override: give exactly one of `bus` or `line`")),
            }
        }
        let limits = specs
            .iter()
            .zip(&configs)
            .map(|(s, c)| {
                let mut vmax = Vec::new();
                let mut vmin = Vec::new();
                for &n in &s.v_nodes {
                    let (bus, _) = network.nodes[n];
                    let (hi, lo) = v_limit.get(&bus).copied().unwrap_or_default();
                    let (hi, lo) = (hi.unwrap_or(c.v_max_pu), lo.unwrap_or(c.v_min_pu));
                    if !(lo < hi) {
                        return Err(Error::config(format!(
                            "voltage limits at bus `{}` are inverted",
                            model.buses[bus].id
                        )));
                    }
                    vmax.push(hi * network.base_v[n]);
                    vmin.push(lo * network.base_v[n]);
                }
                let imax = s
                    .i_channels
                    .iter()
                    .map(|&(l, _)| i_limit.get(&l).copied().unwrap_or(model.lines[l].ampacity_a))
                    .collect::<Vec<_>>();
                Ok(AreaLimits {
                    v_max_v: DVector::from_vec(vmax),
                    v_min_v: DVector::from_vec(vmin),
                    i_max_a: DVector::from_vec(imax),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let baseline = global
            .iter()
            .map(|g| {
                let m = g.dims.m;
                (g.offset.rows(0, m).sum(), g.offset.rows(m, m).sum())
            })
            .collect();

        Ok(System {
            model,
            network,
            tree,
            specs,
            base,
            points,
            col_offset,
            global,
            local,
            configs,
            limits,
            baseline,
        })
    }

    pub fn total_columns(&self) -> usize {
        2 * self.points.len()
    }

    /// Global sensitivities with VDER columns zeroed: the static plant seen by
    /// physical DER deviations only.
    pub fn plant_sensitivities(&self) -> Vec<DMatrix<f64>> {
        self.global
            .iter()
            .map(|g| {
                let mut k = g.k.clone();
                for (i, a) in self.tree.areas.iter().enumerate() {
                    for (j, d) in a.ders.iter().enumerate() {
                        if d.is_virtual() {
                            let c = self.col_offset[i] + 2 * j;
                            k.column_mut(c).fill(0.0);
                            k.column_mut(c + 1).fill(0.0);
                        }
                    }
                }
                k
            })
            .collect()
    }

    pub fn controllers(&self) -> Result<Vec<LocalController>> {
        self.tree
            .areas
            .iter()
            .enumerate()
            .map(|(i, a)| LocalController::new(a, self.local[i].clone(), self.configs[i].clone(), self.limits[i].clone()))
            .collect()
    }

    pub fn column_labels(&self, area: usize) -> Vec<String> {
        self.tree.areas[area]
            .ders
            .iter()
            .flat_map(|d| [format!("{}.p_w", d.id), format!("{}.q_var", d.id)])
            .collect()
    }

    pub fn sensitivity_dump(&self) -> SensitivityDump {
        SensitivityDump {
            areas: self
                .tree
                .areas
                .iter()
                .enumerate()
                .map(|(i, a)| AreaSensitivityDump::from_model(&a.id, self.column_labels(i), &self.local[i]))
                .collect(),
        }
    }

    /// `K_ij`: area `i` measurements against area `j` set-points.
    pub fn k_block(&self, i: usize, j: usize) -> DMatrix<f64> {
        self.global[i]
            .k
            .columns(self.col_offset[j], self.tree.areas[j].x_len())
            .into_owned()
    }
}

fn diagonal_block(g: &SensitivityModel, offset: usize, len: usize) -> SensitivityModel {
    SensitivityModel {
        k: g.k.columns(offset, len).into_owned(),
        offset: g.offset.clone(),
        dims: g.dims,
    }
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    /// `(time, Δp, Δq)` steps, ramps expanded.
    pub steps: Vec<(f64, f64, f64)>,
    pub disturbances: Vec<Disturbance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance {
    pub on_s: f64,
    pub off_s: Option<f64>,
    pub bus: usize,
    /// Extra consumption (VA), split over the bus phases.
    pub s_va: Complex64,
}

impl Disturbance {
    pub fn active(&self, t: f64) -> bool {
        self.on_s <= t + TIME_EPS && self.off_s.map_or(true, |off| t + TIME_EPS < off)
    }
}

impl Schedule {
    pub fn from_scenario(sc: &ScenarioFile, model: &FeederModel) -> Result<Self> {
        let mut steps: Vec<(f64, f64, f64)> = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for r in &sc.reference {
            if r.time_s < last {
                return Err(Error::config("reference steps must be sorted by time"));
            }
            last = r.time_s;
            steps.push((r.time_s, r.dp_w, r.dq_var));
        }
        for r in &sc.reference_ramp {
            if !(r.interval_s > 0.0) {
                return Err(Error::config("reference_ramp interval must be positive"));
            }
            for k in 0..r.count {
                steps.push((r.start_s + k as f64 * r.interval_s, r.step_w, r.step_var));
            }
        }
        steps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut disturbances = Vec::new();
        let mut last = f64::NEG_INFINITY;
        for d in &sc.disturbance {
            if d.on_s < last {
                return Err(Error::config("disturbances must be sorted by on_s"));
            }
            last = d.on_s;
            if let Some(off) = d.off_s {
                if off <= d.on_s {
                    return Err(Error::config("disturbance off_s must follow on_s"));
                }
            }
            if !(d.pf > 0.0 && d.pf <= 1.0) {
                return Err(Error::config("disturbance power factor must be in (0, 1]"));
            }
            let q = d.p_w * (1.0 / (d.pf * d.pf) - 1.0).max(0.0).sqrt();
            disturbances.push(Disturbance {
                on_s: d.on_s,
                off_s: d.off_s,
                bus: model.bus_index(&d.bus)?,
                s_va: Complex64::new(d.p_w, q),
            });
        }
        Ok(Schedule { steps, disturbances })
    }

    /// Cumulative reference `(Δp, Δq)` requested at `t`.
    pub fn reference_at(&self, t: f64) -> (f64, f64) {
        self.steps
            .iter()
            .filter(|s| s.0 <= t + TIME_EPS)
            .fold((0.0, 0.0), |acc, s| (acc.0 + s.1, acc.1 + s.2))
    }

    /// Sorted, deduplicated times at which anything changes.
    pub fn event_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.steps.iter().map(|s| s.0).collect();
        for d in &self.disturbances {
            t.push(d.on_s);
            t.extend(d.off_s);
        }
        t.sort_by(f64::total_cmp);
        t.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
        t
    }
}

fn validate_timing(sc: &ScenarioFile) -> Result<usize> {
    let (ts, dt) = (sc.sample_period_s, sc.plant_step_s);
    if !(ts > 0.0 && dt > 0.0 && dt <= ts) {
        return Err(Error::config("need 0 < plant_step_s <= sample_period_s"));
    }
    let ratio = ts / dt;
    if (ratio - ratio.round()).abs() > 1e-6 {
        return Err(Error::config("sample_period_s must be an integer multiple of plant_step_s"));
    }
    if !(sc.duration_s > 0.0) {
        return Err(Error::config("duration_s must be positive"));
    }
    if !(sc.linearization_step_w > 0.0) {
        return Err(Error::config("linearization_step_w must be positive"));
    }
    Ok(ratio.round() as usize)
}

// ---------------------------------------------------------------------------
// Log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub scenario: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub event_times: Vec<f64>,
    /// Final dual vectors per area.
    pub final_duals: Vec<(String, Vec<f64>)>,
    /// Final transmitted set-points per area.
    pub final_x: Vec<(String, Vec<f64>)>,
    /// Most negative dual entry seen on any tick (0 when none).
    pub min_dual: f64,
    /// Largest excursion of any set-point beyond its box on any tick.
    pub max_box_excess: f64,
    pub faults: usize,
    /// Set when the plant diverged; the log holds the rows before it.
    pub aborted: Option<String>,
}

impl SimLog {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    /// Row index of the last tick strictly before `t`.
    pub fn row_before(&self, t: f64) -> Option<usize> {
        self.rows.iter().rposition(|r| r[0] < t - TIME_EPS)
    }

    /// Window `[event, next event)` clipped to the log, as row indices.
    pub fn window(&self, event: f64) -> Option<(usize, usize)> {
        let start = self.rows.iter().position(|r| r[0] >= event - TIME_EPS)?;
        let next = self.event_times.iter().copied().find(|&t| t > event + TIME_EPS);
        let end = match next {
            Some(t) => self.row_before(t)?,
            None => self.rows.len() - 1,
        };
        (end >= start).then_some((start, end))
    }

    /// Settling time of `channel` after `event`, within the window that ends
    /// at the next scheduled event.
    pub fn settling_after(&self, channel: &str, event: f64, band: f64) -> Option<f64> {
        let (s, e) = self.window(event)?;
        let c = self.column_index(channel)?;
        let times: Vec<f64> = self.rows[s..=e].iter().map(|r| r[0]).collect();
        let vals: Vec<f64> = self.rows[s..=e].iter().map(|r| r[c]).collect();
        settling_time(&times, &vals, band).map(|t| t - event)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(e.to_string()),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| format!("{v}"))).map_err(io)?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Ok(())
    }
}

/// First time at which `values` enters `final ± band` and stays there,
/// `final` being the last value. `None` when the last sample is the first
/// inside the band after an excursion, so settling cannot be confirmed.
pub fn settling_time(times: &[f64], values: &[f64], band: f64) -> Option<f64> {
    let last = *values.last()?;
    if !(band > 0.0) || times.len() != values.len() {
        return None;
    }
    let mut k = values.len();
    while k > 0 && (values[k - 1] - last).abs() <= band {
        k -= 1;
    }
    if k == values.len() - 1 && values.len() > 1 {
        return None;
    }
    Some(times[k])
}

/// Steady-state participation in compensating one disturbance.
#[derive(Debug, Clone, PartialEq)]
pub struct Locality {
    /// `(area id, fraction)` of the change in summed physical DER active power.
    pub per_area: Vec<(String, f64)>,
    pub per_der: Vec<(String, f64)>,
}

/// Participation of each area's physical DERs in the active-power response
/// to disturbance `index`, between the tick before it switches on and the
/// end of its window. `None` without such a disturbance or when the response
/// has not settled.
pub fn locality_metric(log: &SimLog, system: &System, schedule: &Schedule, index: usize) -> Option<Locality> {
    let dist = schedule.disturbances.get(index)?;
    let pre = log.row_before(dist.on_s)?;
    let (_, post) = log.window(dist.on_s)?;
    let settle_check = log.row_before(log.rows[post][0] - 1.0)?;
    let mut per_der = Vec::new();
    let mut area_sum = vec![0.0; system.tree.len()];
    let mut total = 0.0;
    let mut total_earlier = 0.0;
    for (i, a) in system.tree.areas.iter().enumerate() {
        for d in a.ders.iter().filter(|d| !d.is_virtual()) {
            let c = log.column_index(&format!("{}.p_w", d.id))?;
            let delta = log.rows[post][c] - log.rows[pre][c];
            total_earlier += log.rows[settle_check][c] - log.rows[pre][c];
            per_der.push((d.id.clone(), delta));
            area_sum[i] += delta;
            total += delta;
        }
    }
    if total.abs() < 1e-9 || (total - total_earlier).abs() > 0.02 * total.abs() {
        return None;
    }
    Some(Locality {
        per_area: system
            .tree
            .areas
            .iter()
            .zip(area_sum)
            .map(|(a, s)| (a.id.clone(), s / total))
            .collect(),
        per_der: per_der.into_iter().map(|(id, d)| (id, d / total)).collect(),
    })
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

struct PhysicalDer {
    id: String,
    area: usize,
    /// Coordinate of `p` within the area's `x`.
    coord: usize,
    /// Column of `p` in the global `x`.
    global_col: usize,
    bus: usize,
    phases: Vec<usize>,
    tau_s: f64,
    actual: [f64; 2],
}

struct LogLayout {
    columns: Vec<String>,
    v_channels: Vec<(usize, usize)>,
    i_channels: Vec<(usize, usize, usize)>,
}

fn layout(system: &System, ders: &[PhysicalDer]) -> LogLayout {
    let mut columns: Vec<String> = ["time_s", "ref_dp_w", "ref_dq_var", "dp0_w", "dq0_var"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for a in &system.tree.areas {
        for suffix in ["p0_w", "q0_var", "p_set_w", "q_set_var", "lambda", "mu", "dual_norm"] {
            columns.push(format!("{}.{suffix}", a.id));
        }
    }
    for d in ders {
        for suffix in ["p_w", "q_var", "p_cmd_w", "q_cmd_var"] {
            columns.push(format!("{}.{suffix}", d.id));
        }
    }
    for a in &system.tree.areas {
        for d in a.ders.iter().filter(|d| d.is_virtual()) {
            columns.push(format!("{}.p_cmd_w", d.id));
            columns.push(format!("{}.q_cmd_var", d.id));
        }
    }
    // Monitored channels, first appearance order, each once.
    let mut v_channels: Vec<(usize, usize)> = Vec::new();
    let mut i_channels: Vec<(usize, usize, usize)> = Vec::new();
    for (ai, s) in system.specs.iter().enumerate() {
        for (k, &n) in s.v_nodes.iter().enumerate() {
            if !v_channels.iter().any(|&(a, kk)| system.specs[a].v_nodes[kk] == n) {
                v_channels.push((ai, k));
            }
        }
        for (k, &(l, p)) in s.i_channels.iter().enumerate() {
            if !i_channels.iter().any(|&(a, kk, _)| system.specs[a].i_channels[kk] == (l, p)) {
                i_channels.push((ai, k, l));
            }
        }
    }
    for &(a, k) in &v_channels {
        let (bus, ph) = system.network.nodes[system.specs[a].v_nodes[k]];
        columns.push(format!("v.{}.{}_pu", system.model.buses[bus].id, phase_name(ph)));
    }
    for &(a, k, l) in &i_channels {
        let (_, pos) = system.specs[a].i_channels[k];
        let ph = system.model.lines[l].phases[pos];
        columns.push(format!("i.{}.{}_a", system.model.lines[l].id, phase_name(ph)));
    }
    columns.push("v_violations".into());
    columns.push("i_violations".into());
    LogLayout { columns, v_channels, i_channels }
}

/// Runs `scenario` on `system`. Configuration errors are returned as `Err`;
/// plant divergence ends the run early with `SimLog::aborted` set.
pub fn run(system: &System, scenario: &ScenarioFile) -> Result<SimLog> {
    let substeps = validate_timing(scenario)?;
    let schedule = Schedule::from_scenario(scenario, &system.model)?;
    let ts = scenario.sample_period_s;
    let dt = scenario.plant_step_s;
    let ticks = (scenario.duration_s / ts + 1e-9).floor() as usize;
    let tree = &system.tree;

    let mut controllers = system.controllers()?;
    let mut ders: Vec<PhysicalDer> = Vec::new();
    for (i, a) in tree.areas.iter().enumerate() {
        for (j, d) in a.ders.iter().enumerate() {
            if let DerKind::Physical { tau_s, .. } = d.kind {
                ders.push(PhysicalDer {
                    id: d.id.clone(),
                    area: i,
                    coord: 2 * j,
                    global_col: system.col_offset[i] + 2 * j,
                    bus: d.bus,
                    phases: d.phases.clone(),
                    tau_s,
                    actual: [0.0, 0.0],
                });
            }
        }
    }
    let mut selectors: Vec<Option<(DVector<f64>, DVector<f64>)>> = vec![None; tree.len()];
    for (i, a) in tree.areas.iter().enumerate() {
        if let Some(p) = a.parent {
            selectors[i] = Some(selection_maps(tree, p, i)?);
        }
    }
    let lay = layout(system, &ders);
    let plant_k = system.plant_sensitivities();
    let base_loads = system.network.load_injections(&system.model);
    let mut offset_cache: HashMap<Vec<bool>, Vec<DVector<f64>>> = HashMap::new();
    let delay = scenario.comm_delay_ticks;
    let mut sent: Vec<VecDeque<DVector<f64>>> = tree
        .areas
        .iter()
        .map(|a| VecDeque::from(vec![DVector::zeros(a.x_len()); delay]))
        .collect();
    let mut warm = system.base.solution.voltages.clone();

    let mut log = SimLog {
        scenario: scenario.name.clone(),
        columns: lay.columns.clone(),
        rows: Vec::with_capacity(ticks + 1),
        event_times: schedule.event_times(),
        final_duals: vec![],
        final_x: vec![],
        min_dual: 0.0,
        max_box_excess: 0.0,
        faults: 0,
        aborted: None,
    };

    for tick in 0..=ticks {
        let t = tick as f64 * ts;
        let active: Vec<bool> = schedule.disturbances.iter().map(|d| d.active(t)).collect();
        let mut loads = base_loads.clone();
        for (d, on) in schedule.disturbances.iter().zip(&active) {
            if *on {
                let phases = system.model.buses[d.bus].phases.clone();
                system.network.add_bus_injection(&mut loads, d.bus, &phases, -d.s_va);
            }
        }

        // Plant.
        let measured: Result<Vec<DVector<f64>>> = match scenario.plant {
            PlantMode::Nonlinear => {
                let mut inj = loads.clone();
                for d in &ders {
                    system.network.add_bus_injection(
                        &mut inj,
                        d.bus,
                        &d.phases,
                        Complex64::new(d.actual[0], d.actual[1]),
                    );
                }
                system.network.solve(&inj, Some(&warm)).map(|sol| {
                    warm = sol.voltages.clone();
                    system
                        .specs
                        .iter()
                        .map(|s| measure(&system.network, &sol, &inj, s).stack())
                        .collect()
                })
            }
            PlantMode::Linear => {
                let offsets = match offset_cache.get(&active) {
                    Some(o) => Ok(o.clone()),
                    None => system.network.solve(&loads, Some(&system.base.solution.voltages)).map(|sol| {
                        let o: Vec<DVector<f64>> = system
                            .specs
                            .iter()
                            .map(|s| measure(&system.network, &sol, &loads, s).stack())
                            .collect();
                        offset_cache.insert(active.clone(), o.clone());
                        o
                    }),
                };
                offsets.map(|o| {
                    let mut x = DVector::zeros(system.total_columns());
                    for d in &ders {
                        x[d.global_col] = d.actual[0];
                        x[d.global_col + 1] = d.actual[1];
                    }
                    o.iter().zip(&plant_k).map(|(k0, k)| k * &x + k0).collect()
                })
            }
        };
        let y = match measured {
            Ok(y) => y,
            Err(e) => {
                log.aborted = Some(format!("plant failed at t = {t:.3} s: {e}"));
                break;
            }
        };

        // Controllers, root to leaf.
        let (ref_dp, ref_dq) = schedule.reference_at(t);
        let mut setpoints = vec![(0.0, 0.0); tree.len()];
        for &i in &tree.order {
            let (bp, bq) = system.baseline[i];
            let (up, uq) = match (&tree.areas[i].parent, &selectors[i]) {
                (Some(p), Some((tp, tq))) => {
                    let xp = if delay == 0 {
                        controllers[*p].transmitted()
                    } else {
                        sent[*p].front().cloned().expect("delay queue is primed")
                    };
                    (tp.dot(&xp), tq.dot(&xp))
                }
                _ => (ref_dp, ref_dq),
            };
            let sp = (bp - up, bq - uq);
            setpoints[i] = sp;
            if controllers[i].step(&y[i], sp.0, sp.1)? == StepOutcome::Faulted {
                log.faults += 1;
            }
        }
        if delay > 0 {
            for (q, c) in sent.iter_mut().zip(&controllers) {
                q.pop_front();
                q.push_back(c.transmitted());
            }
        }
        for (c, a) in controllers.iter().zip(&tree.areas) {
            log.min_dual = log.min_dual.min(c.state.duals.min());
            let x = c.transmitted();
            let (lo, hi) = (a.capacity_lo(), a.capacity_hi());
            for k in 0..x.len() {
                log.max_box_excess = log.max_box_excess.max(lo[k] - x[k]).max(x[k] - hi[k]);
            }
        }

        // Row: measurements at t, controller outputs computed at t.
        let mut row = Vec::with_capacity(lay.columns.len());
        let root = tree.root;
        let m = system.specs[root].dims().m;
        let p_root: f64 = y[root].rows(0, m).sum();
        let q_root: f64 = y[root].rows(m, m).sum();
        row.extend([t, ref_dp, ref_dq, system.baseline[root].0 - p_root, system.baseline[root].1 - q_root]);
        for (i, c) in controllers.iter().enumerate() {
            let m = system.specs[i].dims().m;
            let d = &c.state.duals;
            row.extend([
                y[i].rows(0, m).sum(),
                y[i].rows(m, m).sum(),
                setpoints[i].0,
                setpoints[i].1,
                d[0],
                d[1],
                d.norm(),
            ]);
        }
        for d in &ders {
            let x = controllers[d.area].transmitted();
            row.extend([d.actual[0], d.actual[1], x[d.coord], x[d.coord + 1]]);
        }
        for (i, a) in tree.areas.iter().enumerate() {
            let x = controllers[i].transmitted();
            for (j, d) in a.ders.iter().enumerate() {
                if d.is_virtual() {
                    row.extend([x[2 * j], x[2 * j + 1]]);
                }
            }
        }
        for &(a, k) in &lay.v_channels {
            let n = system.specs[a].v_nodes[k];
            row.push(y[a][2 * system.specs[a].dims().m + k] / system.network.base_v[n]);
        }
        for &(a, k, _) in &lay.i_channels {
            let d = system.specs[a].dims();
            row.push(y[a][2 * d.m + d.nv + k]);
        }
        let (mut vv, mut iv) = (0.0, 0.0);
        for (a, lim) in system.limits.iter().enumerate() {
            let d = system.specs[a].dims();
            for k in 0..d.nv {
                let v = y[a][2 * d.m + k];
                if v > lim.v_max_v[k] || v < lim.v_min_v[k] {
                    vv += 1.0;
                }
            }
            for k in 0..d.ni {
                if y[a][2 * d.m + d.nv + k] > lim.i_max_a[k] {
                    iv += 1.0;
                }
            }
        }
        row.extend([vv, iv]);
        log.rows.push(row);

        // DER dynamics over the sampling period, exact first-order response.
        for d in ders.iter_mut() {
            let x = controllers[d.area].transmitted();
            let decay = (-dt / d.tau_s).exp();
            for _ in 0..substeps {
                for c in 0..2 {
                    let u = x[d.coord + c];
                    d.actual[c] = u + (d.actual[c] - u) * decay;
                }
            }
        }
    }

    log.final_duals = controllers
        .iter()
        .map(|c| (c.id.clone(), c.state.duals.iter().copied().collect()))
        .collect();
    log.final_x = controllers
        .iter()
        .map(|c| (c.id.clone(), c.transmitted().iter().copied().collect()))
        .collect();
    Ok(log)
}

/// Convenience: build the system and run in one call.
pub fn run_bundle(bundle: &ScenarioBundle) -> Result<(System, SimLog)> {
    let system = System::build(bundle)?;
    let log = run(&system, &bundle.scenario)?;
    Ok((system, log))
}

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

/// Band used for settling-time reporting: 2% of the reference change, at
/// least 1 kW.
pub fn settling_band(step_w: f64) -> f64 {
    (0.02 * step_w.abs()).max(1000.0)
}

pub fn summary(system: &System, bundle: &ScenarioBundle, log: &SimLog) -> Result<String> {
    let sc = &bundle.scenario;
    let schedule = Schedule::from_scenario(sc, &system.model)?;
    let mut s = String::new();
    let _ = writeln!(s, "scenario: {}", sc.name);
    if !sc.description.is_empty() {
        let _ = writeln!(s, "description: {}", sc.description);
    }
    let _ = writeln!(s, "source: {}", bundle.scenario_path.display());
    for o in &bundle.overrides {
        let _ = writeln!(s, "override: {o}");
    }
    let _ = writeln!(s, "plant: {:?}, Ts = {} s, dt = {} s, duration = {} s", sc.plant, sc.sample_period_s, sc.plant_step_s, sc.duration_s);
    let _ = writeln!(s, "areas: {}, buses: {}, DERs: {}", system.tree.len(), system.model.buses.len(), system.model.ders.len());
    for (a, c) in system.tree.areas.iter().zip(&system.configs) {
        let _ = writeln!(
            s,
            "  {}: alpha = {}, a_lambda = {}, r_primal = {}, r_dual = {}, lpf_tau_s = {}, kd_lambda = {}",
            a.id, c.alpha, c.a.lambda, c.r_primal, c.r_dual, c.lpf_tau_s, c.kd.lambda
        );
    }
    let _ = writeln!(s, "rows: {}", log.rows.len());
    if let Some(msg) = &log.aborted {
        let _ = writeln!(s, "ABORTED: {msg}");
    }
    let _ = writeln!(s, "\n[tracking]");
    let mut prev = (0.0, 0.0);
    let mut step_times: Vec<f64> = schedule.steps.iter().map(|s| s.0).collect();
    step_times.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
    for t in step_times {
        let now = schedule.reference_at(t);
        let band = settling_band(now.0 - prev.0);
        let st = log.settling_after("dp0_w", t, band);
        let _ = writeln!(
            s,
            "reference change at {t:.2} s: dp {:+.1} W, settling time ({:.0} W band): {}",
            now.0 - prev.0,
            band,
            st.map_or("not settled".to_string(), |v| format!("{v:.2} s"))
        );
        prev = now;
    }
    if let Some(last) = log.rows.last() {
        let ref_col = log.column_index("ref_dp_w").unwrap();
        let dp_col = log.column_index("dp0_w").unwrap();
        let _ = writeln!(s, "final dp0: {:.1} W (reference {:.1} W)", last[dp_col], last[ref_col]);
    }
    let _ = writeln!(s, "\n[constraints]");
    let mut worst: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let final_rows = log.rows.len().saturating_sub(10)..log.rows.len();
    for (ci, name) in log.columns.iter().enumerate() {
        if name.starts_with("v.") || name.starts_with("i.") {
            let peak = log.rows.iter().map(|r| r[ci]).fold(f64::NEG_INFINITY, f64::max);
            let end = log.rows[final_rows.clone()].iter().map(|r| r[ci]).fold(f64::NEG_INFINITY, f64::max);
            worst.insert(name.as_str(), (peak, end));
        }
    }
    for (name, (peak, end)) in &worst {
        let _ = writeln!(s, "{name}: max {peak:.4}, final {end:.4}");
    }
    let _ = writeln!(s, "max dual excursion below zero: {:.3e}", -log.min_dual);
    let _ = writeln!(s, "max box excess: {:.3e}", log.max_box_excess);
    let _ = writeln!(s, "controller faults: {}", log.faults);
    let _ = writeln!(s, "\n[locality]");
    if schedule.disturbances.is_empty() {
        let _ = writeln!(s, "no disturbance");
    }
    for k in 0..schedule.disturbances.len() {
        match locality_metric(log, system, &schedule, k) {
            Some(loc) => {
                let parts: Vec<String> = loc.per_area.iter().map(|(a, f)| format!("{a} {:.1}%", 100.0 * f)).collect();
                let _ = writeln!(s, "disturbance {k}: {}", parts.join(", "));
            }
            None => {
                let _ = writeln!(s, "disturbance {k}: not settled");
            }
        }
    }
    let _ = writeln!(s, "\n[final duals]");
    for (id, d) in &log.final_duals {
        let v: Vec<String> = d.iter().map(|x| format!("{x:.4e}")).collect();
        let _ = writeln!(s, "{id}: [{}]", v.join(", "));
    }
    Ok(s)
}
