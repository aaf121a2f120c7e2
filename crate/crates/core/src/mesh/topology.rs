use std::collections::BTreeSet;

use crate::diff::SparseMatrix;
use crate::error::{contract, Result};

/// Vertex count, triangle list and binary adjacency of a triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshTopology {
    vertex_count: usize,
    triangles: Vec<[usize; 3]>,
    adjacency: SparseMatrix,
}

impl MeshTopology {
    pub fn new(vertex_count: usize, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let adjacency = build_adjacency(&triangles, vertex_count)?;
        Ok(Self {
            vertex_count,
            triangles,
            adjacency,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.adjacency
            .triplets()
            .into_iter()
            .filter(|&(i, j, _)| i < j)
            .map(|(i, j, _)| (i, j))
            .collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.vertex_count)
            .map(|i| self.adjacency.row_entries(i).count())
            .collect()
    }

    /// Neighbor lists derived from the adjacency.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.vertex_count)
            .map(|i| self.adjacency.row_entries(i).map(|(j, _)| j).collect())
            .collect()
    }

    /// Edges shared by more than two triangles.
    pub fn non_manifold_edges(&self) -> usize {
        let mut counts = std::collections::HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        counts.values().filter(|&&c| c > 2).count()
    }
}

/// Symmetric binary adjacency: `A[i][j] = 1` iff `i != j` share a triangle edge.
pub fn build_adjacency(triangles: &[[usize; 3]], n: usize) -> Result<SparseMatrix> {
    let mut edges = BTreeSet::new();
    for (f, t) in triangles.iter().enumerate() {
        if let Some(&bad) = t.iter().find(|&&v| v >= n) {
            return contract(
                "build_adjacency",
                format!("triangle {f} references vertex {bad} but n = {n}"),
            );
        }
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            if a != b {
                edges.insert((a, b));
                edges.insert((b, a));
            }
        }
    }
    SparseMatrix::from_triplets(n, n, edges.into_iter().map(|(a, b)| (a, b, 1.0)))
}
