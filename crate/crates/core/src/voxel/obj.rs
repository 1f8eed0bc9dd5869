//! Wavefront OBJ export: one unit cube per voxel, shared faces between
//! same-label neighbors culled, one group per part label.

use super::grid::{coords, LabeledGrid};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct VoxelMesh {
    /// Integer corner coordinates.
    pub vertices: Vec<[usize; 3]>,
    /// `(group name, quads)`; quads index into `vertices`, counter-clockwise seen from outside.
    pub groups: Vec<(String, Vec<[usize; 4]>)>,
}

impl VoxelMesh {
    pub fn face_count(&self) -> usize {
        self.groups.iter().map(|(_, f)| f.len()).sum()
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::from("# voxel mesh\n");
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v[0], v[1], v[2]);
        }
        for (name, faces) in &self.groups {
            let _ = writeln!(s, "g {name}\nusemtl {name}");
            for f in faces {
                let _ = writeln!(s, "f {} {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1, f[3] + 1);
            }
        }
        s
    }
}

type Corner = [usize; 3];

/// Outward-facing quads of a unit voxel at `(x, y, z)`: `(axis, direction, corners)`.
fn voxel_faces(x: usize, y: usize, z: usize) -> [(usize, bool, [Corner; 4]); 6] {
    let (x1, y1, z1) = (x + 1, y + 1, z + 1);
    [
        (0, true, [[x1, y, z], [x1, y1, z], [x1, y1, z1], [x1, y, z1]]),
        (0, false, [[x, y, z], [x, y, z1], [x, y1, z1], [x, y1, z]]),
        (1, true, [[x, y1, z], [x, y1, z1], [x1, y1, z1], [x1, y1, z]]),
        (1, false, [[x, y, z], [x1, y, z], [x1, y, z1], [x, y, z1]]),
        (2, true, [[x, y, z1], [x1, y, z1], [x1, y1, z1], [x, y1, z1]]),
        (2, false, [[x, y, z], [x, y1, z], [x1, y1, z], [x1, y, z]]),
    ]
}

pub fn voxel_mesh(lg: &LabeledGrid) -> VoxelMesh {
    let r = lg.resolution();
    let mut mesh = VoxelMesh::default();
    let mut index: HashMap<Corner, usize> = HashMap::new();
    for label in 1..=lg.schema().len() as u8 {
        let mut faces = Vec::new();
        for (idx, &l) in lg.labels().iter().enumerate() {
            if l != label {
                continue;
            }
            let (x, y, z) = coords(r, idx);
            let p = [x, y, z];
            for (axis, positive, quad) in voxel_faces(x, y, z) {
                let mut n = p;
                let culled = if positive {
                    n[axis] += 1;
                    n[axis] < r && lg.get(n[0], n[1], n[2]) == label
                } else {
                    n[axis] > 0 && {
                        n[axis] -= 1;
                        lg.get(n[0], n[1], n[2]) == label
                    }
                };
                if culled {
                    continue;
                }
                let ids = quad.map(|c| {
                    let next = mesh.vertices.len();
                    *index.entry(c).or_insert_with(|| {
                        mesh.vertices.push(c);
                        next
                    })
                });
                faces.push(ids);
            }
        }
        if !faces.is_empty() {
            mesh.groups
                .push((format!("part_{}", lg.schema().name(label)), faces));
        }
    }
    mesh
}

pub fn export_obj(lg: &LabeledGrid, path: &Path) -> Result<()> {
    std::fs::write(path, voxel_mesh(lg).to_obj()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::grid::PartSchema;
    use proptest::prelude::*;

    #[test]
    fn single_voxel() {
        let mut lg = LabeledGrid::empty(3, PartSchema::chairs());
        lg.set(1, 1, 1, 2);
        let m = voxel_mesh(&lg);
        assert_eq!(m.vertices.len(), 8);
        assert_eq!(m.face_count(), 6);
        assert!(m.to_obj().contains("g part_seat"));
    }

    #[test]
    fn adjacent_same_label_voxels_share_no_face() {
        let mut lg = LabeledGrid::empty(3, PartSchema::chairs());
        lg.set(0, 0, 0, 1);
        lg.set(1, 0, 0, 1);
        let m = voxel_mesh(&lg);
        assert_eq!(m.face_count(), 10);
        assert_eq!(m.vertices.len(), 12);
        // different labels keep both copies of the contact face
        lg.set(1, 0, 0, 3);
        assert_eq!(voxel_mesh(&lg).face_count(), 12);
    }

    #[test]
    fn deterministic_output() {
        let mut lg = LabeledGrid::empty(4, PartSchema::chairs());
        lg.set(0, 1, 2, 1);
        lg.set(3, 1, 2, 4);
        assert_eq!(voxel_mesh(&lg).to_obj(), voxel_mesh(&lg.clone()).to_obj());
    }

    proptest! {
        // Every directed edge is matched by its reverse: closed, consistently oriented surfaces.
        #[test]
        fn watertight(labels in proptest::collection::vec(0u8..5, 125)) {
            let lg = LabeledGrid::from_labels(5, labels, PartSchema::chairs()).unwrap();
            let m = voxel_mesh(&lg);
            let mut count: HashMap<(usize, usize), i64> = HashMap::new();
            for (_, faces) in &m.groups {
                for f in faces {
                    for i in 0..4 {
                        let (a, b) = (f[i], f[(i + 1) % 4]);
                        *count.entry((a.min(b), a.max(b))).or_default() += if a < b { 1 } else { -1 };
                    }
                }
            }
            prop_assert!(count.values().all(|&c| c == 0));
        }
    }
}
