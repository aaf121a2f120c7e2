use std::sync::Arc;

use super::laplacian::{LambdaMax, LaplacianPair};
use super::sampling::{build_sampling, SamplingOperators};
use super::topology::MeshTopology;
use crate::diff::SparseMatrix;
use crate::error::{contract, Result};

/// One resolution of a mesh hierarchy.
#[derive(Clone, Debug)]
pub struct MeshLevel {
    pub topology: MeshTopology,
    pub positions: Vec<[f64; 3]>,
    pub laplacian: LaplacianPair,
    /// Scaled Laplacian shared with the convolution layers.
    pub scaled: Arc<SparseMatrix>,
}

impl MeshLevel {
    pub fn new(topology: MeshTopology, positions: Vec<[f64; 3]>, lambda: LambdaMax) -> Result<Self> {
        let laplacian = LaplacianPair::from_adjacency(topology.adjacency(), lambda)?;
        let scaled = Arc::new(laplacian.scaled.clone());
        Ok(Self {
            topology,
            positions,
            laplacian,
            scaled,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.topology.vertex_count()
    }
}

/// Meshes from finest (index 0) to coarsest, with sampling operators between
/// consecutive levels.
#[derive(Clone, Debug)]
pub struct MeshHierarchy {
    pub levels: Vec<MeshLevel>,
    /// `samplings[i]` maps between `levels[i]` (fine) and `levels[i + 1]`.
    pub samplings: Vec<SamplingOperators>,
    pub down: Vec<Arc<SparseMatrix>>,
    pub up: Vec<Arc<SparseMatrix>>,
}

impl MeshHierarchy {
    pub fn build(
        topology: &MeshTopology,
        positions: &[[f64; 3]],
        levels: usize,
        fraction: f64,
        lambda: LambdaMax,
    ) -> Result<Self> {
        if levels == 0 {
            return contract("mesh_hierarchy", "at least one level is required");
        }
        let mut out = vec![MeshLevel::new(topology.clone(), positions.to_vec(), lambda)?];
        let mut samplings = Vec::new();
        for _ in 1..levels {
            let fine = out.last().expect("non-empty");
            let s = build_sampling(&fine.topology, &fine.positions, fraction)?;
            out.push(MeshLevel::new(
                s.coarse_topology.clone(),
                s.coarse_positions.clone(),
                lambda,
            )?);
            samplings.push(s);
        }
        Ok(Self {
            down: samplings.iter().map(|s| Arc::new(s.down.clone())).collect(),
            up: samplings.iter().map(|s| Arc::new(s.up.clone())).collect(),
            levels: out,
            samplings,
        })
    }

    pub fn finest(&self) -> &MeshLevel {
        &self.levels[0]
    }

    pub fn vertex_counts(&self) -> Vec<usize> {
        self.levels.iter().map(MeshLevel::vertex_count).collect()
    }
}
