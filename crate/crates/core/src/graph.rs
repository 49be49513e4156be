//! Meteorological graphs: observation and grid nodes joined by geodesic adjacency.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_km, GeoPoint, Region, RegionName, EARTH_RADIUS_KM};

/// Influence radius of an observation, in kilometres.
pub const DEFAULT_RADIUS_KM: f64 = 50.0;

/// Number of value slots carried by each node.
pub const N_VARIABLES: usize = 6;

const CELL_DEG: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Physical variable, in the fixed slot order `[U, V, T, Q, BA, TB]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variable {
    U,
    V,
    T,
    Q,
    BA,
    TB,
}

impl Variable {
    pub const ALL: [Variable; N_VARIABLES] = [
        Variable::U,
        Variable::V,
        Variable::T,
        Variable::Q,
        Variable::BA,
        Variable::TB,
    ];

    /// The four state variables predicted on grid points.
    pub const STATE: [Variable; 4] = [Variable::U, Variable::V, Variable::T, Variable::Q];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variable::U => "U",
            Variable::V => "V",
            Variable::T => "T",
            Variable::Q => "Q",
            Variable::BA => "BA",
            Variable::TB => "TB",
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variable::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variable `{s}`")))
    }
}

/// Grid point or one of the eleven observation sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NodeKind {
    GridPoint,
    Aircraft,
    Gpsro,
    Sonde,
    Amv,
    AmsuA,
    Amsr2,
    Atms,
    Cris,
    Gk2a,
    Iasi,
    Mhs,
}

impl NodeKind {
    pub const COUNT: usize = 12;

    pub const ALL: [NodeKind; Self::COUNT] = [
        NodeKind::GridPoint,
        NodeKind::Aircraft,
        NodeKind::Gpsro,
        NodeKind::Sonde,
        NodeKind::Amv,
        NodeKind::AmsuA,
        NodeKind::Amsr2,
        NodeKind::Atms,
        NodeKind::Cris,
        NodeKind::Gk2a,
        NodeKind::Iasi,
        NodeKind::Mhs,
    ];

    pub fn sources() -> &'static [NodeKind] {
        &Self::ALL[1..]
    }

    /// Position in the one-hot block of the feature encoding.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_grid(self) -> bool {
        self == NodeKind::GridPoint
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::GridPoint => "GRID",
            NodeKind::Aircraft => "AIRCRAFT",
            NodeKind::Gpsro => "GPSRO",
            NodeKind::Sonde => "SONDE",
            NodeKind::Amv => "AMV",
            NodeKind::AmsuA => "AMSU-A",
            NodeKind::Amsr2 => "AMSR2",
            NodeKind::Atms => "ATMS",
            NodeKind::Cris => "CrIS",
            NodeKind::Gk2a => "GK2A",
            NodeKind::Iasi => "IASI",
            NodeKind::Mhs => "MHS",
        }
    }

    /// Variables measured (or, for grid points, carried as background).
    pub fn variables(self) -> &'static [Variable] {
        use Variable::*;
        match self {
            NodeKind::GridPoint => &[U, V, T, Q],
            NodeKind::Aircraft => &[U, V, T],
            NodeKind::Gpsro => &[BA],
            NodeKind::Sonde => &[U, V, T, Q],
            _ => &[TB],
        }
    }

    pub fn mask(self) -> [bool; N_VARIABLES] {
        let mut mask = [false; N_VARIABLES];
        for v in self.variables() {
            mask[v.index()] = true;
        }
        mask
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NodeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .or_else(|| (s.eq_ignore_ascii_case("GridPoint")).then_some(NodeKind::GridPoint))
            .ok_or_else(|| Error::UnknownSource(s.to_string()))
    }
}

impl TryFrom<String> for NodeKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NodeKind> for String {
    fn from(k: NodeKind) -> String {
        k.name().to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub location: GeoPoint,
    pub time_index: u32,
    values: [f64; N_VARIABLES],
    mask: [bool; N_VARIABLES],
}

impl MetNode {
    /// Node with the full variable set of `kind`. Slots outside that set are zeroed.
    pub fn new(id: NodeId, kind: NodeKind, location: GeoPoint, time_index: u32, mut values: [f64; N_VARIABLES]) -> Self {
        let mask = kind.mask();
        for (v, m) in values.iter_mut().zip(mask) {
            if !m {
                *v = 0.0;
            }
        }
        MetNode {
            id,
            kind,
            location,
            time_index,
            values,
            mask,
        }
    }

    /// Node with an explicit mask, which must be a subset of the kind's variables.
    pub fn with_mask(
        id: NodeId,
        kind: NodeKind,
        location: GeoPoint,
        time_index: u32,
        values: [f64; N_VARIABLES],
        mask: [bool; N_VARIABLES],
    ) -> Result<Self> {
        let allowed = kind.mask();
        for i in 0..N_VARIABLES {
            if mask[i] && !allowed[i] {
                return Err(Error::InvalidConfig(format!(
                    "node {id}: {kind} does not measure {}",
                    Variable::ALL[i]
                )));
            }
            if !mask[i] && values[i] != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "node {id}: value in masked slot {}",
                    Variable::ALL[i]
                )));
            }
            if !values[i].is_finite() {
                return Err(Error::InvalidConfig(format!("node {id}: non-finite value")));
            }
        }
        Ok(MetNode {
            id,
            kind,
            location,
            time_index,
            values,
            mask,
        })
    }

    pub fn values(&self) -> &[f64; N_VARIABLES] {
        &self.values
    }

    pub fn mask(&self) -> &[bool; N_VARIABLES] {
        &self.mask
    }

    pub fn value(&self, v: Variable) -> Option<f64> {
        self.mask[v.index()].then(|| self.values[v.index()])
    }

    /// Apply `f(slot, value)` to every present slot.
    pub fn map_values(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for i in 0..N_VARIABLES {
            if self.mask[i] {
                self.values[i] = f(i, self.values[i]);
            }
        }
    }

    /// Drop every measurement: values zeroed, mask cleared.
    pub fn clear(&mut self) {
        self.values = [0.0; N_VARIABLES];
        self.mask = [false; N_VARIABLES];
    }
}

/// Immutable meteorological graph. Nodes are kept in ascending id order and
/// edges as sorted `(lo, hi)` id pairs.
#[derive(Debug, Clone)]
pub struct MetGraph {
    nodes: Vec<MetNode>,
    edges: Vec<(NodeId, NodeId)>,
    region: Region,
    time_index: u32,
    normalized: bool,
    index: HashMap<NodeId, usize>,
    neighbors: Vec<Vec<usize>>,
}

impl PartialEq for MetGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.region == other.region
            && self.time_index == other.time_index
            && self.normalized == other.normalized
    }
}

impl MetGraph {
    /// Assemble a graph from already-computed edges, validating ids.
    pub fn from_parts(
        mut nodes: Vec<MetNode>,
        edges: Vec<(NodeId, NodeId)>,
        region: Region,
        time_index: u32,
        normalized: bool,
    ) -> Result<Self> {
        nodes.sort_by_key(|n| n.id);
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if n.time_index != time_index {
                return Err(Error::MixedTimeIndex(time_index, n.time_index));
            }
            if index.insert(n.id, i).is_some() {
                return Err(Error::DuplicateNode(n.id));
            }
        }
        let mut canonical = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidConfig(format!("self-edge on node {a}")));
            }
            for id in [a, b] {
                if !index.contains_key(&id) {
                    return Err(Error::UnknownNode(id));
                }
            }
            canonical.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<_> = canonical.into_iter().collect();
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for &(a, b) in &edges {
            let (i, j) = (index[&a], index[&b]);
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(MetGraph {
            nodes,
            edges,
            region,
            time_index,
            normalized,
            index,
            neighbors,
        })
    }

    pub fn nodes(&self) -> &[MetNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn time_index(&self) -> u32 {
        self.time_index
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn node(&self, id: NodeId) -> Option<&MetNode> {
        self.position(id).map(|i| &self.nodes[i])
    }

    /// Neighbor positions of the node at position `i`, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn grid_nodes(&self) -> impl Iterator<Item = &MetNode> {
        self.nodes.iter().filter(|n| n.kind.is_grid())
    }

    pub fn observation_nodes(&self) -> impl Iterator<Item = &MetNode> {
        self.nodes.iter().filter(|n| !n.kind.is_grid())
    }

    /// Rebuild with modified node payloads; topology and ids must not change.
    pub fn map_nodes(&self, normalized: bool, mut f: impl FnMut(&mut MetNode)) -> MetGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            let id = n.id;
            f(n);
            assert_eq!(n.id, id, "map_nodes must preserve node ids");
        }
        g.normalized = normalized;
        g
    }

    /// Content hash over ids, kinds, values, masks and edges.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.time_index.hash(&mut h);
        self.region.name.hash(&mut h);
        self.normalized.hash(&mut h);
        for n in &self.nodes {
            n.id.hash(&mut h);
            n.kind.hash(&mut h);
            n.location.lat().to_bits().hash(&mut h);
            n.location.lon().to_bits().hash(&mut h);
            for v in n.values {
                v.to_bits().hash(&mut h);
            }
            n.mask.hash(&mut h);
        }
        self.edges.hash(&mut h);
        h.finish()
    }
}

/// Connect every node pair within `radius_km` (inclusive), regardless of kind.
pub fn build_graph(nodes: Vec<MetNode>, region: Region, radius_km: f64) -> Result<MetGraph> {
    build_graph_with(nodes, region, radius_km, false)
}

pub fn build_graph_with(nodes: Vec<MetNode>, region: Region, radius_km: f64, normalized: bool) -> Result<MetGraph> {
    let time_index = nodes.first().map_or(0, |n| n.time_index);
    let edges = radius_edges(&nodes, radius_km);
    MetGraph::from_parts(nodes, edges, region, time_index, normalized)
}

fn cell_of(p: &GeoPoint) -> (i64, i64) {
    ((p.lat() / CELL_DEG).floor() as i64, (p.lon() / CELL_DEG).floor() as i64)
}

/// All pairs within `radius_km`, found through a 0.5 degree bucket index.
///
/// The latitude reach is fixed by the radius; the longitude reach widens with
/// latitude so that no pair is missed poleward of ~26 degrees.
fn radius_edges(nodes: &[MetNode], radius_km: f64) -> Vec<(NodeId, NodeId)> {
    let n_lon_cells = (360.0 / CELL_DEG) as i64;
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        buckets.entry(cell_of(&n.location)).or_default().push(i);
    }

    let km_per_deg = EARTH_RADIUS_KM.to_radians();
    let radius_deg = radius_km / km_per_deg;
    let lat_reach = (radius_deg / CELL_DEG).ceil() as i64 + 1;
    let hav_theta = (radius_km / EARTH_RADIUS_KM / 2.0).sin().powi(2);

    let mut edges = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        let (clat, clon) = cell_of(&a.location);
        // hav(dlon) <= hav(theta) / (cos(lat_a) cos(lat_b)), with lat_b bounded by the band.
        let cos_a = a.location.lat().to_radians().cos();
        let cos_b = (a.location.lat().abs() + radius_deg).min(90.0).to_radians().cos();
        let bound = hav_theta / (cos_a * cos_b);
        let lon_reach = if bound >= 1.0 || !bound.is_finite() {
            n_lon_cells
        } else {
            let dlon_deg = (2.0 * bound.sqrt().asin()).to_degrees();
            ((dlon_deg / CELL_DEG).ceil() as i64 + 1).min(n_lon_cells)
        };
        let mut visited = BTreeSet::new();
        for dlat in -lat_reach..=lat_reach {
            for dlon in -lon_reach..=lon_reach {
                let half = n_lon_cells / 2;
                let lon_cell = (clon + dlon + half).rem_euclid(n_lon_cells) - half;
                let key = (clat + dlat, lon_cell);
                if !visited.insert(key) {
                    continue;
                }
                let Some(bucket) = buckets.get(&key) else { continue };
                for &j in bucket {
                    if j <= i {
                        continue;
                    }
                    let b = &nodes[j];
                    if haversine_km(&a.location, &b.location) <= radius_km {
                        edges.push((a.id.min(b.id), a.id.max(b.id)));
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    edges
}

/// Positions of nodes within `hops` edges of `target`, ascending.
pub fn context_positions(g: &MetGraph, target: usize, hops: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; g.len()];
    let mut queue = VecDeque::from([target]);
    depth[target] = 0;
    while let Some(i) = queue.pop_front() {
        if depth[i] == hops {
            continue;
        }
        for &j in g.neighbors(i) {
            if depth[j] == usize::MAX {
                depth[j] = depth[i] + 1;
                queue.push_back(j);
            }
        }
    }
    (0..g.len()).filter(|&i| depth[i] != usize::MAX).collect()
}

/// Induced subgraph on the `hops`-neighbourhood of `target_id`.
pub fn extract_context(g: &MetGraph, target_id: NodeId, hops: usize) -> Result<MetGraph> {
    let target = g.position(target_id).ok_or(Error::UnknownNode(target_id))?;
    if hops == 0 {
        return Err(Error::InvalidConfig("context hops must be >= 1".into()));
    }
    let keep = context_positions(g, target, hops);
    let ids: BTreeSet<NodeId> = keep.iter().map(|&i| g.nodes[i].id).collect();
    let nodes = keep.iter().map(|&i| g.nodes[i].clone()).collect();
    let edges = g
        .edges
        .iter()
        .filter(|(a, b)| ids.contains(a) && ids.contains(b))
        .copied()
        .collect();
    MetGraph::from_parts(nodes, edges, g.region, g.time_index, g.normalized)
}

// ---- JSON document ----------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: NodeId,
    pub kind: NodeKind,
    pub lat: f64,
    pub lon: f64,
    pub pressure: f64,
    pub time: u32,
    pub values: [f64; N_VARIABLES],
    pub mask: [bool; N_VARIABLES],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDoc {
    pub region: RegionName,
    pub time_index: u32,
    pub normalized: bool,
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<(NodeId, NodeId)>,
}

impl From<&MetNode> for NodeDoc {
    fn from(n: &MetNode) -> Self {
        NodeDoc {
            id: n.id,
            kind: n.kind,
            lat: n.location.lat(),
            lon: n.location.lon(),
            pressure: n.location.pressure(),
            time: n.time_index,
            values: n.values,
            mask: n.mask,
        }
    }
}

impl TryFrom<&NodeDoc> for MetNode {
    type Error = Error;

    fn try_from(d: &NodeDoc) -> Result<Self> {
        let loc = GeoPoint::with_pressure(d.lat, d.lon, d.pressure)?;
        MetNode::with_mask(d.id, d.kind, loc, d.time, d.values, d.mask)
    }
}

impl MetGraph {
    pub fn to_doc(&self) -> GraphDoc {
        GraphDoc {
            region: self.region.name,
            time_index: self.time_index,
            normalized: self.normalized,
            nodes: self.nodes.iter().map(NodeDoc::from).collect(),
            edges: self.edges.clone(),
        }
    }

    /// Rebuild from a document; `region` supplies the box for the named region.
    pub fn from_doc(doc: &GraphDoc, region: Region) -> Result<Self> {
        if region.name != doc.region {
            return Err(Error::InvalidConfig(format!(
                "document region {} does not match {}",
                doc.region, region.name
            )));
        }
        let nodes = doc.nodes.iter().map(MetNode::try_from).collect::<Result<Vec<_>>>()?;
        MetGraph::from_parts(nodes, doc.edges.clone(), region, doc.time_index, doc.normalized)
    }

    /// JSON value with keys in canonical (lexicographic) order.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self.to_doc()).expect("graph document is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::RegionName;

    fn asia() -> Region {
        Region::default_for(RegionName::Asia)
    }

    fn grid(id: u64, lat: f64, lon: f64) -> MetNode {
        MetNode::new(NodeId(id), NodeKind::GridPoint, GeoPoint::new(lat, lon).unwrap(), 0, [1.0; 6])
    }

    /// Point `km` kilometres due north of (lat, lon).
    fn north_of(lat: f64, km: f64) -> f64 {
        lat + (km / EARTH_RADIUS_KM).to_degrees()
    }

    #[test]
    fn radius_is_inclusive_boundary() {
        let inside = vec![grid(1, 30.0, 120.0), grid(2, north_of(30.0, 49.9), 120.0)];
        assert_eq!(build_graph(inside, asia(), 50.0).unwrap().edges().len(), 1);
        let outside = vec![grid(1, 30.0, 120.0), grid(2, north_of(30.0, 50.1), 120.0)];
        assert_eq!(build_graph(outside, asia(), 50.0).unwrap().edges().len(), 0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let nodes = vec![grid(7, 30.0, 120.0), grid(7, 31.0, 120.0)];
        assert!(matches!(build_graph(nodes, asia(), 50.0), Err(Error::DuplicateNode(NodeId(7)))));
    }

    #[test]
    fn masks_follow_kind() {
        let p = GeoPoint::new(0.0, 0.0).unwrap();
        let n = MetNode::new(NodeId(1), NodeKind::Gpsro, p, 0, [1.0, 2.0, 3.0, 4.0, 0.7, 6.0]);
        assert_eq!(n.values(), &[0.0, 0.0, 0.0, 0.0, 0.7, 0.0]);
        assert_eq!(n.mask(), &[false, false, false, false, true, false]);
        assert_eq!(NodeKind::GridPoint.mask(), [true, true, true, true, false, false]);
        assert_eq!(NodeKind::Aircraft.mask(), [true, true, true, false, false, false]);
        for k in &NodeKind::ALL[4..] {
            assert_eq!(k.variables(), &[Variable::TB]);
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in NodeKind::ALL {
            assert_eq!(k.name().parse::<NodeKind>().unwrap(), k);
        }
        assert!("RADAR".parse::<NodeKind>().is_err());
    }

    #[test]
    fn isolated_context_is_the_target() {
        let nodes = vec![grid(1, 30.0, 120.0), grid(2, 40.0, 120.0)];
        let g = build_graph(nodes, asia(), 50.0).unwrap();
        let ctx = extract_context(&g, NodeId(1), 2).unwrap();
        assert_eq!(ctx.len(), 1);
        assert!(ctx.edges().is_empty());
    }

    #[test]
    fn one_hop_path_context() {
        let nodes = vec![
            grid(1, 30.0, 120.0),
            grid(2, north_of(30.0, 40.0), 120.0),
            grid(3, north_of(30.0, 80.0), 120.0),
        ];
        let g = build_graph(nodes, asia(), 50.0).unwrap();
        assert_eq!(g.edges(), &[(NodeId(1), NodeId(2)), (NodeId(2), NodeId(3))]);
        let ctx = extract_context(&g, NodeId(1), 1).unwrap();
        let ids: Vec<_> = ctx.nodes().iter().map(|n| n.id).collect();
        assert_eq!(ids, vec![NodeId(1), NodeId(2)]);
        assert_eq!(ctx.edges(), &[(NodeId(1), NodeId(2))]);
        assert!(extract_context(&g, NodeId(99), 1).is_err());
    }

    #[test]
    fn antimeridian_neighbours_are_found() {
        let region = Region::default_for(RegionName::NorthAmerica);
        let nodes = vec![grid(1, 60.0, 179.9), grid(2, 60.0, -179.9)];
        let g = build_graph(nodes, region, 50.0).unwrap();
        assert_eq!(g.edges().len(), 1);
    }

    #[test]
    fn json_document_round_trips() {
        let nodes = vec![grid(1, 30.0, 120.0), grid(2, north_of(30.0, 30.0), 120.0)];
        let g = build_graph(nodes, asia(), 50.0).unwrap();
        let text = serde_json::to_string(&g.to_json()).unwrap();
        let doc: GraphDoc = serde_json::from_str(&text).unwrap();
        assert_eq!(MetGraph::from_doc(&doc, asia()).unwrap(), g);
        // keys come out sorted
        assert!(text.starts_with("{\"edges\":"));
    }
}
