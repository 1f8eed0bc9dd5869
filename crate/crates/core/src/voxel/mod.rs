//! Voxel volumes: occupancy and labeled grids, file formats, part
//! canonicalization, point-to-voxel labeling and geometric metrics.

mod binvox;
mod grid;
mod labeling;
pub mod maxflow;
mod metrics;
mod obj;
mod parts;
mod pflg;
mod sampler;

pub use binvox::{read_binvox, write_binvox};
pub use grid::{coords, linear_index, LabeledGrid, OccupancyGrid, PartSchema};
pub use labeling::{
    label_from_points, label_from_points_traced, labeling_energy, LabeledPoint, LabelingResult,
};
pub use metrics::{
    connected_components, iou_masks, is_single_component, miou, per_label_iou, symmetry_score,
};
pub use obj::{export_obj, voxel_mesh, VoxelMesh};
pub use parts::{extract_parts, PartSet, CANONICAL_EXTENT};
pub use pflg::{load_pflg, read_pflg, save_pflg, write_pflg};
pub use sampler::{resample, voxel_center, AffineParams};

pub(crate) use sampler::{source_indices, stencil};
