mod common;

use std::collections::{BTreeSet, VecDeque};

use obsimpact_core::geo::EARTH_RADIUS_KM;
use obsimpact_core::graph::build_graph_with;
use obsimpact_core::{build_graph, extract_context, haversine_km, GeoPoint, MetGraph, NodeId, Region, RegionName};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Spherical law of cosines, coded without reference to the haversine path.
fn cosine_law_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dl = (b.lon() - a.lon()).to_radians();
    let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
    c.clamp(-1.0, 1.0).acos() * EARTH_RADIUS_KM
}

fn brute_edges(g: &MetGraph, radius: f64) -> BTreeSet<(NodeId, NodeId)> {
    let nodes = g.nodes();
    let mut out = BTreeSet::new();
    for i in 0..nodes.len() {
        for j in i + 1..nodes.len() {
            if haversine_km(&nodes[i].location, &nodes[j].location) <= radius {
                let (a, b) = (nodes[i].id, nodes[j].id);
                out.insert((a.min(b), a.max(b)));
            }
        }
    }
    out
}

fn bfs_oracle(g: &MetGraph, target: NodeId, hops: usize) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([target]);
    let mut frontier = VecDeque::from([(target, 0)]);
    while let Some((id, d)) = frontier.pop_front() {
        if d == hops {
            continue;
        }
        for &(a, b) in g.edges() {
            let other = if a == id {
                b
            } else if b == id {
                a
            } else {
                continue;
            };
            if seen.insert(other) {
                frontier.push_back((other, d + 1));
            }
        }
    }
    seen
}

#[test]
fn seoul_tokyo_matches_cosine_law() {
    let seoul = GeoPoint::new(37.57, 126.98).unwrap();
    let tokyo = GeoPoint::new(35.68, 139.69).unwrap();
    let h = haversine_km(&seoul, &tokyo);
    assert!((h - cosine_law_km(&seoul, &tokyo)).abs() < 0.1, "{h}");
}

#[test]
fn random_graphs_match_brute_force() {
    for seed in 0..20 {
        let g = common::random_graph(seed, 200, 3.0);
        let got: BTreeSet<_> = g.edges().iter().copied().collect();
        assert_eq!(got, brute_edges(&g, 50.0), "seed {seed}");
    }
}

#[test]
fn high_latitude_and_antimeridian_graphs_match_brute_force() {
    let region = Region::default_for(RegionName::Asia);
    for (seed, lat0, lon0) in [(1, 70.0, 170.0), (2, 84.0, -20.0), (3, -60.0, 178.5)] {
        let mut r = common::rng(seed);
        let nodes = common::random_nodes(&mut r, 200, lat0, lon0, 3.0);
        let g = build_graph(nodes, region, 50.0).unwrap();
        let got: BTreeSet<_> = g.edges().iter().copied().collect();
        assert_eq!(got, brute_edges(&g, 50.0), "lat0 {lat0} lon0 {lon0}");
    }
}

#[test]
fn node_order_does_not_change_edges() {
    let region = Region::default_for(RegionName::Asia);
    let mut r = common::rng(7);
    let nodes = common::random_nodes(&mut r, 150, 20.0, 100.0, 2.5);
    let a = build_graph(nodes.clone(), region, 50.0).unwrap();
    let mut shuffled = nodes;
    shuffled.shuffle(&mut r);
    let b = build_graph(shuffled, region, 50.0).unwrap();
    assert_eq!(a.edges(), b.edges());
    assert_eq!(a, b);
}

#[test]
fn contexts_match_bfs_and_grow_with_hops() {
    let g = common::random_graph(11, 120, 2.0);
    let mut r = common::rng(12);
    for _ in 0..10 {
        let target = g.nodes()[r.random_range(0..g.len())].id;
        let mut prev: BTreeSet<NodeId> = BTreeSet::new();
        for hops in 1..=4 {
            let ctx = extract_context(&g, target, hops).unwrap();
            let ids: BTreeSet<NodeId> = ctx.nodes().iter().map(|n| n.id).collect();
            assert_eq!(ids, bfs_oracle(&g, target, hops));
            assert!(prev.is_subset(&ids));
            for &(a, b) in g.edges() {
                let inside = ids.contains(&a) && ids.contains(&b);
                assert_eq!(inside, ctx.edges().contains(&(a, b)));
            }
            prev = ids;
        }
    }
}

#[test]
fn grid_tile_adjacency_matches_brute_force() {
    use obsimpact_core::{MetNode, NodeKind};
    let region = Region::default_for(RegionName::Asia);
    let nodes: Vec<MetNode> = (0..100)
        .map(|k| {
            let p = GeoPoint::new(30.0 + 0.45 * (k / 10) as f64, 120.0 + 0.45 * (k % 10) as f64).unwrap();
            MetNode::new(NodeId(k as u64), NodeKind::GridPoint, p, 0, [0.0; 6])
        })
        .collect();
    let g = build_graph_with(nodes, region, 50.0, false).unwrap();
    let got: BTreeSet<_> = g.edges().iter().copied().collect();
    assert_eq!(got, brute_edges(&g, 50.0));
    assert!(!got.is_empty());
}

fn point() -> impl Strategy<Value = GeoPoint> {
    (-90.0f64..=90.0, -180.0f64..180.0).prop_map(|(lat, lon)| GeoPoint::new(lat, lon).unwrap())
}

proptest! {
    #[test]
    fn haversine_is_a_metric(a in point(), b in point(), c in point()) {
        let ab = haversine_km(&a, &b);
        prop_assert_eq!(ab, haversine_km(&b, &a));
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= haversine_km(&a, &c) + haversine_km(&c, &b) + 1e-9);
        prop_assert!((ab - cosine_law_km(&a, &b)).abs() < 0.1);
    }

    #[test]
    fn every_edge_is_within_radius(seed in 0u64..1000, n in 2usize..80, radius in 5.0f64..120.0) {
        let mut r = common::rng(seed);
        let nodes = common::random_nodes(&mut r, n, -10.0, 30.0, 2.0);
        let g = build_graph(nodes, Region::default_for(RegionName::Europe), radius).unwrap();
        for &(a, b) in g.edges() {
            prop_assert!(a < b);
            let (na, nb) = (g.node(a).unwrap(), g.node(b).unwrap());
            prop_assert!(haversine_km(&na.location, &nb.location) <= radius);
        }
        let got: BTreeSet<_> = g.edges().iter().copied().collect();
        prop_assert_eq!(got, brute_edges(&g, radius));
    }
}
