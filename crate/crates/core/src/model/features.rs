use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{MetGraph, NodeKind, N_VARIABLES};

/// Columns per node: one-hot kind, value slots, mask bits.
pub const N_FEATURES: usize = NodeKind::COUNT + 2 * N_VARIABLES;
pub const VALUE_OFFSET: usize = NodeKind::COUNT;
pub const MASK_OFFSET: usize = NodeKind::COUNT + N_VARIABLES;

/// Dense node features, one row per node in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(pub Array2<f64>);

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    /// Value slots of row `i`.
    pub fn values(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.0.slice(ndarray::s![i, VALUE_OFFSET..MASK_OFFSET])
    }

    pub fn mask(&self, i: usize) -> ndarray::ArrayView1<'_, f64> {
        self.0.slice(ndarray::s![i, MASK_OFFSET..])
    }
}

pub fn encode_features(g: &MetGraph) -> Result<FeatureMatrix> {
    if !g.is_normalized() {
        return Err(Error::Unnormalized);
    }
    Ok(encode_unchecked(g))
}

/// Encoding without the normalization check, for hand-built test graphs.
pub fn encode_unchecked(g: &MetGraph) -> FeatureMatrix {
    let mut x = Array2::zeros((g.len(), N_FEATURES));
    for (i, n) in g.nodes().iter().enumerate() {
        x[[i, n.kind.index()]] = 1.0;
        for s in 0..N_VARIABLES {
            if n.mask()[s] {
                x[[i, VALUE_OFFSET + s]] = n.values()[s];
                x[[i, MASK_OFFSET + s]] = 1.0;
            }
        }
    }
    FeatureMatrix(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, Region, RegionName};
    use crate::graph::{build_graph_with, MetNode, NodeId};

    fn graph() -> MetGraph {
        let p = |lat| GeoPoint::new(lat, 127.0).unwrap();
        let nodes = vec![
            MetNode::new(NodeId(3), NodeKind::Gpsro, p(35.1), 0, [0.0, 0.0, 0.0, 0.0, 0.7, 0.0]),
            MetNode::new(NodeId(1), NodeKind::GridPoint, p(35.0), 0, [0.1, 0.2, 0.3, 0.4, 0.0, 0.0]),
        ];
        build_graph_with(nodes, Region::default_for(RegionName::Asia), 50.0, true).unwrap()
    }

    #[test]
    fn rows_follow_schema() {
        let x = encode_features(&graph()).unwrap();
        assert_eq!(x.rows(), 2);
        // row 0 = node 1 (grid)
        assert_eq!(x.0[[0, 0]], 1.0);
        assert_eq!(x.mask(0).to_vec(), vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(x.values(0).to_vec(), vec![0.1, 0.2, 0.3, 0.4, 0.0, 0.0]);
        // row 1 = GPSRO
        assert_eq!(x.0[[1, NodeKind::Gpsro.index()]], 1.0);
        assert_eq!(x.values(1).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 0.7, 0.0]);
        assert_eq!(x.mask(1).to_vec(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        for i in 0..2 {
            let onehot: f64 = x.0.row(i).iter().take(NodeKind::COUNT).sum();
            assert_eq!(onehot, 1.0);
        }
    }

    #[test]
    fn unnormalized_graph_is_rejected() {
        let g = graph().map_nodes(false, |_| {});
        assert!(matches!(encode_features(&g), Err(Error::Unnormalized)));
    }
}
