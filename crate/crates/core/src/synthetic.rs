//! Synthetic atmospheres standing in for operational observation archives.
//!
//! Each state variable (U, V, T, Q) is a sum of Gaussian bumps tiled
//! periodically over the globe. Bump centres advect in a fixed per-bump
//! direction, so a grid snapshot of the previous step is an imperfect but
//! informative background for the current step. Bending angle and brightness
//! temperature are fixed linear proxies of T and Q.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Region, RegionName};
use crate::graph::{build_graph_with, GraphDoc, MetGraph, MetNode, NodeId, NodeKind, Variable, DEFAULT_RADIUS_KM, N_VARIABLES};

/// Bending-angle proxy.
pub fn bending_angle(t: f64, q: f64) -> f64 {
    0.1 * t + 0.05 * q + 0.2
}

/// Brightness-temperature proxy.
pub fn brightness_temperature(t: f64, q: f64) -> f64 {
    t + 0.3 * q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub seed: u64,
    /// Bumps per variable within one period cell.
    pub n_modes: usize,
    pub amplitude_range: (f64, f64),
    pub length_scale_deg: f64,
    pub drift_deg_per_step: f64,
    /// The bump pattern repeats every `period_deg` in latitude and longitude.
    pub period_deg: f64,
    /// Observation error standard deviation per source, in raw units.
    pub noise_std: BTreeMap<NodeKind, f64>,
}

impl Default for FieldSpec {
    fn default() -> Self {
        use NodeKind::*;
        let noise_std = [
            (Aircraft, 0.08),
            (Gpsro, 0.005),
            (Sonde, 0.05),
            (Amv, 0.15),
            (AmsuA, 0.1),
            (Amsr2, 0.25),
            (Atms, 0.1),
            (Cris, 0.08),
            (Gk2a, 0.15),
            (Iasi, 0.08),
            (Mhs, 0.3),
        ]
        .into_iter()
        .collect();
        FieldSpec {
            seed: 42,
            n_modes: 216,
            amplitude_range: (-1.5, 1.5),
            length_scale_deg: 1.5,
            drift_deg_per_step: 1.0,
            period_deg: 36.0,
            noise_std,
        }
    }
}

impl FieldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_modes == 0 {
            return bad("n_modes must be >= 1");
        }
        if !(self.length_scale_deg > 0.0) {
            return bad("length_scale_deg must be positive");
        }
        if !(self.period_deg > 0.0) {
            return bad("period_deg must be positive");
        }
        if self.amplitude_range.0 > self.amplitude_range.1 {
            return bad("amplitude_range must be ordered");
        }
        if self.noise_std.values().any(|s| !(*s >= 0.0)) {
            return bad("noise_std must be non-negative");
        }
        if self.noise_std.contains_key(&NodeKind::GridPoint) {
            return bad("grid points carry no observation noise");
        }
        Ok(())
    }

    pub fn noise(&self, kind: NodeKind) -> f64 {
        self.noise_std.get(&kind).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
struct Bump {
    lat: f64,
    lon: f64,
    amplitude: f64,
    dir_lat: f64,
    dir_lon: f64,
}

/// Precomputed bump parameters for a [`FieldSpec`].
#[derive(Debug, Clone)]
pub struct Atmosphere {
    spec: FieldSpec,
    bumps: [Vec<Bump>; 4],
}

impl Atmosphere {
    pub fn new(spec: &FieldSpec) -> Result<Self> {
        spec.validate()?;
        let bumps = std::array::from_fn(|var| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(var as u64));
            (0..spec.n_modes)
                .map(|_| {
                    let (lo, hi) = spec.amplitude_range;
                    let amplitude = if lo == hi { lo } else { rng.random_range(lo..hi) };
                    let theta = rng.random_range(0.0..2.0 * PI);
                    Bump {
                        lat: rng.random_range(0.0..spec.period_deg),
                        lon: rng.random_range(0.0..spec.period_deg),
                        amplitude,
                        dir_lat: theta.sin(),
                        dir_lon: theta.cos(),
                    }
                })
                .collect()
        });
        Ok(Atmosphere { spec: spec.clone(), bumps })
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    fn state_var(&self, var: usize, p: &GeoPoint, t: i64) -> f64 {
        let period = self.spec.period_deg;
        let inv_two_l2 = 1.0 / (2.0 * self.spec.length_scale_deg.powi(2));
        let shift = self.spec.drift_deg_per_step * t as f64;
        let nearest = |d: f64| (d + period / 2.0).rem_euclid(period) - period / 2.0;

        // beyond this many length scales a bump contributes < exp(-50)
        let cutoff = 10.0 * self.spec.length_scale_deg;
        // Gaussian is separable: sum over the 3x3 images = (sum over lat) * (sum over lon)
        let images = |d: f64| -> f64 { (-1..=1).map(|i| d + i as f64 * period).map(|x| (-x * x * inv_two_l2).exp()).sum() };

        let mut total = 0.0;
        for b in &self.bumps[var] {
            let dlat = nearest(p.lat() - b.lat - shift * b.dir_lat);
            if dlat.abs() > cutoff && period - dlat.abs() > cutoff {
                continue;
            }
            let dlon = nearest(p.lon() - b.lon - shift * b.dir_lon);
            if dlon.abs() > cutoff && period - dlon.abs() > cutoff {
                continue;
            }
            total += b.amplitude * images(dlat) * images(dlon);
        }
        total
    }

    /// True values of all six variables at `p` and step `t`.
    pub fn all(&self, p: &GeoPoint, t: i64) -> [f64; N_VARIABLES] {
        let [u, v, temp, q] = std::array::from_fn(|i| self.state_var(i, p, t));
        [u, v, temp, q, bending_angle(temp, q), brightness_temperature(temp, q)]
    }

    pub fn eval(&self, var: Variable, p: &GeoPoint, t: i64) -> f64 {
        match var {
            Variable::U | Variable::V | Variable::T | Variable::Q => self.state_var(var.index(), p, t),
            Variable::BA => bending_angle(self.state_var(2, p, t), self.state_var(3, p, t)),
            Variable::TB => brightness_temperature(self.state_var(2, p, t), self.state_var(3, p, t)),
        }
    }

    /// Upper bound on the field's gradient magnitude (per degree), from the
    /// peak slope `|A| exp(-1/2) / L` of each bump summed over its periodic images.
    pub fn max_gradient(&self, var: Variable) -> f64 {
        let l = self.spec.length_scale_deg;
        let period = self.spec.period_deg;
        // far images contribute at most their slope at distance >= period/2
        let far = 8.0 * (period / 2.0) / (l * l) * (-(period / 2.0).powi(2) / (2.0 * l * l)).exp();
        let per_var = |i: usize| -> f64 {
            self.bumps[i]
                .iter()
                .map(|b| b.amplitude.abs() * ((-0.5f64).exp() / l + far))
                .sum()
        };
        match var {
            Variable::U | Variable::V | Variable::T | Variable::Q => per_var(var.index()),
            Variable::BA => 0.1 * per_var(2) + 0.05 * per_var(3),
            Variable::TB => per_var(2) + 0.3 * per_var(3),
        }
    }
}

/// One-off evaluation of a field; build an [`Atmosphere`] for repeated use.
pub fn eval_field(spec: &FieldSpec, var: Variable, p: &GeoPoint, t: i64) -> Result<f64> {
    Ok(Atmosphere::new(spec)?.eval(var, p, t))
}

/// Regular grid tile placed inside a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TileLayout {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub rows: usize,
    pub cols: usize,
    pub spacing_deg: f64,
}

impl TileLayout {
    /// South-west corner of the default tile for each region.
    pub fn anchor(region: RegionName) -> (f64, f64) {
        match region {
            RegionName::Asia => (33.0, 124.0),
            RegionName::Europe => (45.0, 5.0),
            RegionName::NorthAmerica => (35.0, -100.0),
            RegionName::Australia => (-35.0, 140.0),
        }
    }

    pub fn for_region(region: RegionName, rows: usize, cols: usize, spacing_deg: f64) -> Self {
        let (origin_lat, origin_lon) = Self::anchor(region);
        TileLayout {
            origin_lat,
            origin_lon,
            rows,
            cols,
            spacing_deg,
        }
    }

    /// `(lat_min, lat_max, lon_min, lon_max)` spanned by the grid points.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let lat_max = self.origin_lat + self.spacing_deg * (self.rows.max(1) - 1) as f64;
        let lon_max = self.origin_lon + self.spacing_deg * (self.cols.max(1) - 1) as f64;
        (self.origin_lat, lat_max, self.origin_lon, lon_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub rows: usize,
    pub cols: usize,
    pub spacing_deg: f64,
    pub radius_km: f64,
    pub obs_counts: BTreeMap<NodeKind, usize>,
}

/// 60 observations split AIRCRAFT 20%, SONDE 15%, GPSRO 10%, the rest evenly.
pub fn default_obs_counts() -> BTreeMap<NodeKind, usize> {
    use NodeKind::*;
    [
        (Aircraft, 12),
        (Sonde, 9),
        (Gpsro, 6),
        (Amv, 5),
        (AmsuA, 4),
        (Amsr2, 4),
        (Atms, 4),
        (Cris, 4),
        (Gk2a, 4),
        (Iasi, 4),
        (Mhs, 4),
    ]
    .into_iter()
    .collect()
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            rows: 12,
            cols: 12,
            spacing_deg: 0.45,
            radius_km: DEFAULT_RADIUS_KM,
            obs_counts: default_obs_counts(),
        }
    }
}

/// Parse per-source counts keyed by source name.
pub fn parse_obs_counts(named: &BTreeMap<String, usize>) -> Result<BTreeMap<NodeKind, usize>> {
    named
        .iter()
        .map(|(name, &count)| {
            let kind: NodeKind = name.parse()?;
            if kind.is_grid() {
                return Err(Error::UnknownSource(name.clone()));
            }
            Ok((kind, count))
        })
        .collect()
}

/// Globally unique node id for `local` within snapshot `(region, t)`.
pub fn node_id(region: RegionName, t: u32, local: usize) -> NodeId {
    debug_assert!(local < 1 << 20);
    NodeId(((t as u64) << 24) | ((region.index() as u64) << 20) | local as u64)
}

/// Graph for one (region, time) plus the true state at its grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub region: Region,
    pub time_index: u32,
    pub graph: MetGraph,
    /// True `[U, V, T, Q]` at step `time_index`, keyed by grid node.
    pub targets: BTreeMap<NodeId, [f64; 4]>,
}

impl Snapshot {
    pub fn grid_nodes(&self) -> impl Iterator<Item = &MetNode> {
        self.graph.grid_nodes()
    }

    pub fn obs_nodes(&self) -> impl Iterator<Item = &MetNode> {
        self.graph.observation_nodes()
    }

    pub fn key(&self) -> (RegionName, u32) {
        (self.region.name, self.time_index)
    }

    pub fn file_name(&self) -> String {
        format!("{}_{:05}.json", self.region.name, self.time_index)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.graph.to_json();
        let targets: serde_json::Map<String, serde_json::Value> = self
            .targets
            .iter()
            .map(|(id, t)| (id.to_string(), serde_json::json!(t)))
            .collect();
        v.as_object_mut()
            .expect("graph document is an object")
            .insert("targets".into(), targets.into());
        v
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            #[serde(flatten)]
            graph: GraphDoc,
            targets: BTreeMap<String, [f64; 4]>,
        }
        let doc: Doc = serde_json::from_value(value)?;
        let region = Region::default_for(doc.graph.region);
        let graph = MetGraph::from_doc(&doc.graph, region)?;
        let mut targets = BTreeMap::new();
        for (k, t) in doc.targets {
            let id = NodeId(k.parse().map_err(|_| Error::InvalidConfig(format!("bad target id `{k}`")))?);
            match graph.node(id) {
                Some(n) if n.kind.is_grid() => {
                    targets.insert(id, t);
                }
                _ => return Err(Error::InvalidConfig(format!("target {id} is not a grid node"))),
            }
        }
        Ok(Snapshot {
            region,
            time_index: graph.time_index(),
            graph,
            targets,
        })
    }
}

/// Grid background from step `t - 1`, noisy observations and truth at step `t`.
pub fn make_snapshot(atm: &Atmosphere, region: &Region, cfg: &SnapshotConfig, t: u32, rng_seed: u64) -> Result<Snapshot> {
    if !(cfg.spacing_deg > 0.0) {
        return Err(Error::InvalidConfig("grid spacing must be positive".into()));
    }
    if cfg.rows == 0 || cfg.cols == 0 {
        return Err(Error::InvalidConfig("grid must have at least one row and column".into()));
    }
    if cfg.obs_counts.contains_key(&NodeKind::GridPoint) {
        return Err(Error::UnknownSource(NodeKind::GridPoint.name().into()));
    }
    let layout = TileLayout::for_region(region.name, cfg.rows, cfg.cols, cfg.spacing_deg);
    let (lat0, lat1, lon0, lon1) = layout.bounds();
    for (lat, lon) in [(lat0, lon0), (lat1, lon1)] {
        if !region.contains(&GeoPoint::new(lat, lon)?) {
            return Err(Error::InvalidConfig(format!("grid tile leaves the {} box", region.name)));
        }
    }

    let mut nodes = Vec::with_capacity(cfg.rows * cfg.cols + cfg.obs_counts.values().sum::<usize>());
    let mut targets = BTreeMap::new();
    let ti = t as i64;
    for r in 0..cfg.rows {
        for c in 0..cfg.cols {
            let p = GeoPoint::new(lat0 + r as f64 * cfg.spacing_deg, lon0 + c as f64 * cfg.spacing_deg)?;
            let id = node_id(region.name, t, nodes.len());
            let background = atm.all(&p, ti - 1);
            let truth = atm.all(&p, ti);
            targets.insert(id, [truth[0], truth[1], truth[2], truth[3]]);
            nodes.push(MetNode::new(id, NodeKind::GridPoint, p, t, background));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for (&kind, &count) in &cfg.obs_counts {
        let sigma = atm.spec().noise(kind);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for _ in 0..count {
            let lat = if lat1 > lat0 { rng.random_range(lat0..=lat1) } else { lat0 };
            let lon = if lon1 > lon0 { rng.random_range(lon0..=lon1) } else { lon0 };
            let p = GeoPoint::new(lat, lon)?;
            let mut values = atm.all(&p, ti);
            let mask = kind.mask();
            for (v, present) in values.iter_mut().zip(mask) {
                if present {
                    *v += noise.sample(&mut rng);
                }
            }
            let id = node_id(region.name, t, nodes.len());
            nodes.push(MetNode::new(id, kind, p, t, values));
        }
    }

    let graph = build_graph_with(nodes, *region, cfg.radius_km, false)?;
    Ok(Snapshot {
        region: *region,
        time_index: t,
        graph,
        targets,
    })
}

/// Per-variable z-score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_VARIABLES],
    pub std: [f64; N_VARIABLES],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; N_VARIABLES],
            std: [1.0; N_VARIABLES],
        }
    }

    pub fn normalize(&self, slot: usize, x: f64) -> f64 {
        (x - self.mean[slot]) / self.std[slot]
    }

    pub fn denormalize(&self, slot: usize, z: f64) -> f64 {
        z * self.std[slot] + self.mean[slot]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_fraction: f64,
    /// Snapshots with `time_index <= train_until` form the training split.
    pub train_until: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: FieldSpec,
    pub snapshot_config: SnapshotConfig,
    /// Sorted by `(time_index, region)`.
    pub snapshots: Vec<Snapshot>,
    pub norm_stats: Option<NormStats>,
    pub split: Option<Split>,
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub field: FieldSpec,
    pub snapshot: SnapshotConfig,
    pub regions: Vec<RegionName>,
    pub n_snapshots: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            field: FieldSpec::default(),
            snapshot: SnapshotConfig::default(),
            regions: RegionName::ALL.to_vec(),
            n_snapshots: 200,
            train_fraction: 0.7,
            seed: 42,
        }
    }
}

impl DatasetConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.field.seed = seed;
        self
    }
}

fn snapshot_seed(seed: u64, region: RegionName, t: u32) -> u64 {
    seed ^ t as u64 ^ ((region.index() as u64 + 1) << 40)
}

impl Dataset {
    /// Raw (unnormalized) snapshots, assigned round-robin over `regions` with
    /// time indices starting at 1.
    pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
        if cfg.regions.is_empty() {
            return Err(Error::InvalidConfig("at least one region is required".into()));
        }
        let atm = Atmosphere::new(&cfg.field)?;
        let mut snapshots = (0..cfg.n_snapshots)
            .map(|k| {
                let name = cfg.regions[k % cfg.regions.len()];
                let t = (k / cfg.regions.len()) as u32 + 1;
                let region = Region::default_for(name);
                make_snapshot(&atm, &region, &cfg.snapshot, t, snapshot_seed(cfg.seed, name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        snapshots.sort_by_key(|s| (s.time_index, s.region.name));
        Ok(Dataset {
            spec: cfg.field.clone(),
            snapshot_config: cfg.snapshot.clone(),
            snapshots,
            norm_stats: None,
            split: None,
        })
    }

    /// Generate, split and normalize in one go.
    pub fn build(cfg: &DatasetConfig) -> Result<Dataset> {
        split_and_normalize(&Dataset::generate(cfg)?, cfg.train_fraction)
    }

    pub fn is_normalized(&self) -> bool {
        self.norm_stats.is_some()
    }

    pub fn is_train(&self, s: &Snapshot) -> bool {
        self.split.is_some_and(|sp| s.time_index <= sp.train_until)
    }

    pub fn train(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter().filter(|s| self.is_train(s))
    }

    /// Held-out snapshots (everything after the training window).
    pub fn test(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter().filter(|s| self.split.is_some() && !self.is_train(s))
    }

    pub fn find(&self, region: RegionName, t: u32) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.region.name == region && s.time_index == t)
    }

    /// Per-variable training-split mean of the targets (zero-ish once normalized).
    pub fn climatology(&self) -> [f64; 4] {
        let mut sum = [0.0; 4];
        let mut n = 0usize;
        for s in self.train() {
            for t in s.targets.values() {
                for k in 0..4 {
                    sum[k] += t[k];
                }
                n += 1;
            }
        }
        if n == 0 {
            return [0.0; 4];
        }
        sum.map(|x| x / n as f64)
    }

    /// Map a normalized dataset back to raw units.
    pub fn denormalized(&self) -> Dataset {
        let Some(stats) = self.norm_stats else { return self.clone() };
        let mut ds = self.clone();
        for s in &mut ds.snapshots {
            s.graph = s.graph.map_nodes(false, |n| n.map_values(|i, z| stats.denormalize(i, z)));
            for t in s.targets.values_mut() {
                for k in 0..4 {
                    t[k] = stats.denormalize(k, t[k]);
                }
            }
        }
        ds.norm_stats = None;
        ds
    }
}

/// Split by time (earliest `train_fraction` of time steps train) and z-score
/// every value slot with statistics from the training split only.
pub fn split_and_normalize(ds: &Dataset, train_fraction: f64) -> Result<Dataset> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig("train_fraction must lie in (0, 1)".into()));
    }
    if ds.is_normalized() {
        return Err(Error::InvalidConfig("dataset is already normalized".into()));
    }
    let mut times: Vec<u32> = ds.snapshots.iter().map(|s| s.time_index).collect();
    times.sort_unstable();
    times.dedup();
    if times.len() < 2 {
        return Err(Error::NotEnoughSnapshots(ds.snapshots.len()));
    }
    let n_train = ((train_fraction * times.len() as f64).round() as usize).clamp(1, times.len() - 1);
    let train_until = times[n_train - 1];

    let mut samples: [Vec<f64>; N_VARIABLES] = Default::default();
    for s in ds.snapshots.iter().filter(|s| s.time_index <= train_until) {
        for n in s.graph.nodes() {
            for (i, (&v, &m)) in n.values().iter().zip(n.mask()).enumerate() {
                if m {
                    samples[i].push(v);
                }
            }
        }
    }
    let mut stats = NormStats::identity();
    for (i, xs) in samples.iter().enumerate() {
        // variables nobody measures keep the identity transform
        if xs.is_empty() {
            continue;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::DegenerateVariable(Variable::ALL[i]));
        }
        stats.mean[i] = mean;
        stats.std[i] = std;
    }

    let mut out = ds.clone();
    for s in &mut out.snapshots {
        s.graph = s.graph.map_nodes(true, |n| n.map_values(|i, x| stats.normalize(i, x)));
        for t in s.targets.values_mut() {
            for k in 0..4 {
                t[k] = stats.normalize(k, t[k]);
            }
        }
    }
    out.norm_stats = Some(stats);
    out.split = Some(Split {
        train_fraction,
        train_until,
    });
    Ok(out)
}

// ---- on-disk layout -----------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotEntry {
    file: String,
    region: RegionName,
    time_index: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    field_spec: FieldSpec,
    snapshot_config: SnapshotConfig,
    norm_stats: Option<NormStats>,
    split: Option<Split>,
    snapshots: Vec<SnapshotEntry>,
}

const DATASET_FORMAT: &str = "obsimpact-dataset/1";
const SNAPSHOT_DIR: &str = "snapshots";

impl Dataset {
    /// Write `meta.json` and one JSON document per snapshot under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let snap_dir = dir.join(SNAPSHOT_DIR);
        fs::create_dir_all(&snap_dir)?;
        let mut entries = Vec::with_capacity(self.snapshots.len());
        for s in &self.snapshots {
            let file = s.file_name();
            fs::write(snap_dir.join(&file), serde_json::to_vec(&s.to_json())?)?;
            entries.push(SnapshotEntry {
                file: format!("{SNAPSHOT_DIR}/{file}"),
                region: s.region.name,
                time_index: s.time_index,
            });
        }
        let meta = Meta {
            format: DATASET_FORMAT.into(),
            field_spec: self.spec.clone(),
            snapshot_config: self.snapshot_config.clone(),
            norm_stats: self.norm_stats,
            split: self.split,
            snapshots: entries,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: Meta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::InvalidConfig(format!("unsupported dataset format `{}`", meta.format)));
        }
        let mut snapshots = meta
            .snapshots
            .iter()
            .map(|e| {
                let value: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(&e.file))?)?;
                let s = Snapshot::from_json(value)?;
                if s.key() != (e.region, e.time_index) {
                    return Err(Error::InvalidConfig(format!("{} does not hold {} t={}", e.file, e.region, e.time_index)));
                }
                if s.graph.is_normalized() != meta.norm_stats.is_some() {
                    return Err(Error::InvalidConfig(format!("{}: normalization flag disagrees with meta.json", e.file)));
                }
                Ok(s)
            })
            .collect::<Result<Vec<_>>>()?;
        snapshots.sort_by_key(|s| (s.time_index, s.region.name));
        Ok(Dataset {
            spec: meta.field_spec,
            snapshot_config: meta.snapshot_config,
            snapshots,
            norm_stats: meta.norm_stats,
            split: meta.split,
        })
    }
}
