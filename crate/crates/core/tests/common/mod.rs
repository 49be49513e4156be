#![allow(dead_code)]

use obsimpact_core::graph::build_graph_with;
use obsimpact_core::{GeoPoint, MetGraph, MetNode, NodeId, NodeKind, Region, RegionName};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random nodes in a `span`-degree square at (lat0, lon0), roughly a third grid points.
pub fn random_nodes(rng: &mut ChaCha8Rng, n: usize, lat0: f64, lon0: f64, span: f64) -> Vec<MetNode> {
    (0..n)
        .map(|i| {
            let kind = if rng.random_bool(0.35) {
                NodeKind::GridPoint
            } else {
                NodeKind::sources()[rng.random_range(0..NodeKind::sources().len())]
            };
            let lat = (lat0 + rng.random_range(0.0..span)).clamp(-90.0, 90.0);
            let lon = lon0 + rng.random_range(0.0..span);
            let lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
            let values = std::array::from_fn(|_| rng.random_range(-1.5..1.5));
            MetNode::new(NodeId(1000 + i as u64), kind, GeoPoint::new(lat, lon).unwrap(), 0, values)
        })
        .collect()
}

/// Normalized random graph with at least one grid node.
pub fn random_graph(seed: u64, n: usize, span: f64) -> MetGraph {
    let mut r = rng(seed);
    let mut nodes = random_nodes(&mut r, n, 30.0, 120.0, span);
    if !nodes.iter().any(|n| n.kind.is_grid()) {
        let p = nodes[0].location;
        nodes[0] = MetNode::new(nodes[0].id, NodeKind::GridPoint, p, 0, [0.3; 6]);
    }
    build_graph_with(nodes, Region::default_for(RegionName::Asia), 50.0, true).unwrap()
}

/// Same graph with every value replaced by a positive one.
pub fn positive_graph(g: &MetGraph, seed: u64) -> MetGraph {
    let mut r = rng(seed);
    g.map_nodes(true, |n| n.map_values(|_, _| r.random_range(0.1..1.0)))
}
