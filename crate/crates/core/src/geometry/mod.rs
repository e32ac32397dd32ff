//! Mesh and point-cloud ingestion, surface sampling, signed-distance and ray
//! queries, and target-region extraction (farthest-point seeds + kNN).

mod bvh;
mod cloud;
mod io;
mod mesh;

pub use bvh::{tri_tri_intersect, Bvh, RayHit};
pub use cloud::{
    farthest_point_sample, knn_region, normalize_cloud, sample_surface, NormTransform, PointCloud,
    TargetRegion,
};
pub use io::{
    load_mesh, read_ply_cloud, write_obj_mesh, write_ply_cloud, write_ply_mesh, write_region_json,
};
pub use mesh::Mesh;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("mesh degenerate: all faces filtered out")]
    DegenerateMesh,
    #[error("point cloud degenerate: zero spatial extent")]
    DegenerateCloud,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
