//! Control-area tree, physical and virtual DER specifications, quadratic
//! costs and box capacity sets.

use std::collections::{HashMap, HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};

use crate::config::PartitionFile;
use crate::feeder::FeederModel;
use crate::{Error, Result};

/// Separable quadratic cost `Σ_c c2[c]·x_c² + c1[c]·x_c + c0` over the
/// `(p, q)` pair of one DER.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCost {
    pub c2: [f64; 2],
    pub c1: [f64; 2],
    pub c0: f64,
}

impl QuadraticCost {
    pub fn new(c2: [f64; 2], c1: [f64; 2]) -> Self {
        QuadraticCost { c2, c1, c0: 0.0 }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.c0 + (0..2).map(|c| self.c2[c] * x[c] * x[c] + self.c1[c] * x[c]).sum::<f64>()
    }

    /// Shift `ζ` of the form `(x + ζ)ᵀ C″ (x + ζ)`.
    pub fn zeta(&self) -> [f64; 2] {
        [self.c1[0] / (2.0 * self.c2[0]), self.c1[1] / (2.0 * self.c2[1])]
    }

    pub fn min_curvature(&self) -> f64 {
        self.c2[0].min(self.c2[1])
    }
}

/// Aggregated cost of a set of DERs acting in parallel: the infimal
/// convolution `f(x) = min { Σ f_l(x_l) : Σ x_l = x }`. Curvatures combine
/// like parallel impedances.
pub fn vder_cost(children: &[QuadraticCost]) -> Result<QuadraticCost> {
    if children.is_empty() {
        return Err(Error::config("cannot aggregate an empty DER set"));
    }
    let mut out = QuadraticCost::new([0.0; 2], [0.0; 2]);
    for c in 0..2 {
        let mut inv = 0.0;
        let mut zeta = 0.0;
        let mut offset = 0.0;
        for f in children {
            if !(f.c2[c] > 0.0) {
                return Err(Error::config("DER cost curvature must be positive"));
            }
            inv += 1.0 / f.c2[c];
            zeta += 0.5 * f.c1[c] / f.c2[c];
            offset += 0.25 * f.c1[c] * f.c1[c] / f.c2[c];
        }
        let cv = 1.0 / inv;
        out.c2[c] = cv;
        out.c1[c] = 2.0 * cv * zeta;
        out.c0 += cv * zeta * zeta - offset;
    }
    out.c0 += children.iter().map(|f| f.c0).sum::<f64>();
    Ok(out)
}

/// Box `[lo, hi]` on `(p, q)` in W and var.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityBox {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl CapacityBox {
    pub fn clamp(&self, c: usize, v: f64) -> f64 {
        v.max(self.lo[c]).min(self.hi[c])
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (0..2).all(|c| self.lo[c] <= x[c] && x[c] <= self.hi[c])
    }
}

/// Minkowski sum of boxes.
pub fn vder_capacity(children: &[CapacityBox]) -> Result<CapacityBox> {
    if children.is_empty() {
        return Err(Error::config("cannot aggregate an empty DER set"));
    }
    let mut out = CapacityBox { lo: [0.0; 2], hi: [0.0; 2] };
    for b in children {
        for c in 0..2 {
            out.lo[c] += b.lo[c];
            out.hi[c] += b.hi[c];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerKind {
    /// A physical unit with first-order response; `site` indexes `FeederModel::ders`.
    Physical { site: usize, tau_s: f64 },
    /// Stands in for the whole child area `child`.
    Virtual { child: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerSpec {
    pub id: String,
    pub kind: DerKind,
    pub bus: usize,
    pub phases: Vec<usize>,
    pub cost: QuadraticCost,
    pub capacity: CapacityBox,
}

impl DerSpec {
    pub fn is_virtual(&self) -> bool {
        matches!(self.kind, DerKind::Virtual { .. })
    }

    fn check(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("DER `{}`: {what}", self.id)));
        if !self.cost.c2.iter().all(|c| c.is_finite() && *c > 0.0) {
            return bad("cost curvature must be positive");
        }
        if !self.cost.c1.iter().all(|c| c.is_finite()) {
            return bad("linear cost must be finite");
        }
        if !self.capacity.contains([0.0, 0.0]) {
            return bad("capacity box must contain zero deviation");
        }
        if let DerKind::Physical { tau_s, .. } = self.kind {
            if !(tau_s > 0.0) {
                return bad("time constant must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Area {
    pub id: String,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub interface_bus: usize,
    pub monitored_buses: Vec<usize>,
    pub monitored_lines: Vec<usize>,
    /// Tracking switch `s_i`.
    pub tracking: bool,
    /// Physical DERs first, then one VDER per child in `children` order.
    pub ders: Vec<DerSpec>,
}

impl Area {
    /// Length of the stacked set-point vector `x = (p_1, q_1, p_2, q_2, …)`.
    pub fn x_len(&self) -> usize {
        2 * self.ders.len()
    }

    pub fn physical_count(&self) -> usize {
        self.ders.iter().filter(|d| !d.is_virtual()).count()
    }

    /// Position of the VDER representing `child` among `ders`.
    pub fn vder_index(&self, child: usize) -> Option<usize> {
        self.ders
            .iter()
            .position(|d| d.kind == DerKind::Virtual { child })
    }

    /// `m_i = 2·min C″` over all DERs and VDERs of the area.
    pub fn strong_convexity(&self) -> f64 {
        2.0 * self
            .ders
            .iter()
            .map(|d| d.cost.min_curvature())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn capacity_lo(&self) -> DVector<f64> {
        DVector::from_iterator(self.x_len(), self.ders.iter().flat_map(|d| d.capacity.lo))
    }

    pub fn capacity_hi(&self) -> DVector<f64> {
        DVector::from_iterator(self.x_len(), self.ders.iter().flat_map(|d| d.capacity.hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAreaTree {
    pub areas: Vec<Area>,
    pub root: usize,
    /// Root-to-leaf (breadth-first) evaluation order.
    pub order: Vec<usize>,
}

impl ControlAreaTree {
    pub fn from_partition(model: &FeederModel, partition: &PartitionFile) -> Result<Self> {
        let n = partition.areas.len();
        if n == 0 {
            return Err(Error::config("partition declares no areas"));
        }
        let mut index = HashMap::new();
        for (i, a) in partition.areas.iter().enumerate() {
            if index.insert(a.id.as_str(), i).is_some() {
                return Err(Error::config(format!("duplicate area id `{}`", a.id)));
            }
        }
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut roots = Vec::new();
        for (i, a) in partition.areas.iter().enumerate() {
            match &a.parent {
                None => roots.push(i),
                Some(p) => {
                    let &pi = index.get(p.as_str()).ok_or_else(|| {
                        Error::config(format!("area `{}`: unknown parent `{p}`", a.id))
                    })?;
                    if pi == i {
                        return Err(Error::config(format!("area `{}` is its own parent", a.id)));
                    }
                    parent[i] = Some(pi);
                    children[pi].push(i);
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::config(format!(
                "control areas must form a tree with exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            queue.extend(children[i].iter().copied());
        }
        if order.len() != n {
            return Err(Error::config("control-area parent links contain a cycle"));
        }

        let mut owner: HashMap<&str, &str> = HashMap::new();
        let mut interface = vec![0; n];
        for (i, a) in partition.areas.iter().enumerate() {
            interface[i] = model.bus_index(&a.interface_bus)?;
            for d in &a.ders {
                if let Some(prev) = owner.insert(d.as_str(), a.id.as_str()) {
                    return Err(Error::config(format!(
                        "DER `{d}` assigned to both `{prev}` and `{}`",
                        a.id
                    )));
                }
            }
        }
        if interface[root] != model.slack.bus {
            return Err(Error::config("the root area's interface bus must be the feeder head"));
        }
        for site in &model.ders {
            if !owner.contains_key(site.id.as_str()) {
                return Err(Error::config(format!("DER `{}` is not assigned to any area", site.id)));
            }
        }
        let mut seen_interfaces = HashSet::new();
        for (i, a) in partition.areas.iter().enumerate() {
            if !seen_interfaces.insert(interface[i]) {
                return Err(Error::config(format!(
                    "area `{}` shares its interface bus with another area",
                    a.id
                )));
            }
        }

        let mut areas = Vec::with_capacity(n);
        for (i, a) in partition.areas.iter().enumerate() {
            let reach: HashSet<usize> = model.downstream_buses(interface[i])?.into_iter().collect();
            if let Some(p) = parent[i] {
                if !model.downstream_buses(interface[p])?.contains(&interface[i]) {
                    return Err(Error::config(format!(
                        "area `{}`: interface bus is not downstream of its parent's",
                        a.id
                    )));
                }
            }
            let mut ders = Vec::new();
            for d in &a.ders {
                let site = model.der_index(d)?;
                let s = &model.ders[site];
                if !reach.contains(&s.bus) {
                    return Err(Error::config(format!(
                        "area `{}`: DER `{d}` is not downstream of the interface bus",
                        a.id
                    )));
                }
                let p = partition.params_for(d);
                let spec = DerSpec {
                    id: d.clone(),
                    kind: DerKind::Physical { site, tau_s: p.tau_s },
                    bus: s.bus,
                    phases: s.phases.clone(),
                    cost: QuadraticCost::new(p.cost_c2.diagonal()?, p.cost_c1),
                    capacity: CapacityBox {
                        lo: [p.p_min_w, p.q_min_var],
                        hi: [p.p_max_w, p.q_max_var],
                    },
                };
                spec.check()?;
                ders.push(spec);
            }
            let monitored_buses = a
                .monitored_buses
                .iter()
                .map(|b| model.bus_index(b))
                .collect::<Result<Vec<_>>>()?;
            let monitored_lines = a
                .monitored_lines
                .iter()
                .map(|l| model.line_index(l))
                .collect::<Result<Vec<_>>>()?;
            areas.push(Area {
                id: a.id.clone(),
                parent: parent[i],
                children: children[i].clone(),
                interface_bus: interface[i],
                monitored_buses,
                monitored_lines,
                tracking: a.tracking,
                ders,
            });
        }

        // VDERs, leaf-to-root so each child's aggregate already includes its own VDERs.
        for &i in order.iter().rev() {
            for k in 0..areas[i].children.len() {
                let j = areas[i].children[k];
                let child = &areas[j];
                if child.ders.is_empty() {
                    return Err(Error::config(format!("area `{}` has no DERs to aggregate", child.id)));
                }
                let costs: Vec<_> = child.ders.iter().map(|d| d.cost).collect();
                let boxes: Vec<_> = child.ders.iter().map(|d| d.capacity).collect();
                let vder = DerSpec {
                    id: format!("VDER:{}", child.id),
                    kind: DerKind::Virtual { child: j },
                    bus: child.interface_bus,
                    phases: model.buses[child.interface_bus].phases.clone(),
                    cost: vder_cost(&costs)?,
                    capacity: vder_capacity(&boxes)?,
                };
                areas[i].ders.push(vder);
            }
        }
        for a in &areas {
            if a.ders.is_empty() {
                return Err(Error::config(format!("area `{}` has no DERs or child areas", a.id)));
            }
        }
        Ok(ControlAreaTree { areas, root, order })
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn area_index(&self, id: &str) -> Result<usize> {
        self.areas
            .iter()
            .position(|a| a.id == id)
            .ok_or_else(|| Error::config(format!("unknown area `{id}`")))
    }

    /// `A_ij = 1` iff area `j` is a child of area `i`.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let n = self.areas.len();
        let mut a = DMatrix::zeros(n, n);
        for (i, area) in self.areas.iter().enumerate() {
            for &j in &area.children {
                a[(i, j)] = 1.0;
            }
        }
        a
    }

    /// Number of levels from the root to the deepest leaf.
    pub fn depth(&self) -> usize {
        let mut depth = vec![0usize; self.areas.len()];
        for &i in &self.order {
            depth[i] = self.areas[i].parent.map_or(1, |p| depth[p] + 1);
        }
        depth.into_iter().max().unwrap_or(0)
    }

    /// Physical DER specs in the subtree rooted at `area`.
    pub fn descendant_physical(&self, area: usize) -> Vec<&DerSpec> {
        let mut out: Vec<&DerSpec> = self.areas[area].ders.iter().filter(|d| !d.is_virtual()).collect();
        for &c in &self.areas[area].children {
            out.extend(self.descendant_physical(c));
        }
        out
    }
}

/// Row selectors `(T^p, T^q)` extracting child `child`'s VDER active and
/// reactive set-points from the parent's stacked `x`.
pub fn selection_maps(
    tree: &ControlAreaTree,
    parent: usize,
    child: usize,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let area = tree
        .areas
        .get(parent)
        .ok_or_else(|| Error::config(format!("unknown area #{parent}")))?;
    let k = area.vder_index(child).ok_or_else(|| {
        Error::config(format!("area #{child} is not a child of `{}`", area.id))
    })?;
    let mut tp = DVector::zeros(area.x_len());
    let mut tq = DVector::zeros(area.x_len());
    tp[2 * k] = 1.0;
    tq[2 * k + 1] = 1.0;
    Ok((tp, tq))
}
