//! Mesh topology, graph Laplacians, vertex normals and resolution hierarchies.

mod hierarchy;
mod icosphere;
mod laplacian;
mod normals;
mod obj;
mod sampling;
mod topology;

pub use hierarchy::{MeshHierarchy, MeshLevel};
pub use icosphere::icosphere;
pub use laplacian::{
    max_eigenvalue, max_eigenvalue_capped, normalized_laplacian, scaled_laplacian, LambdaMax,
    LaplacianPair,
};
pub use normals::{cross_rows, vertex_normals, vertex_normals_plain};
pub use obj::{read_obj, write_obj, ObjMesh};
pub use sampling::{build_sampling, simplify, SamplingOperators};
pub use topology::{build_adjacency, MeshTopology};
