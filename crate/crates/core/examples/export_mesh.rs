//! Export generated shapes and their canonical parts as OBJ meshes.
//!
//! cargo run --release --example export_mesh -- [out_dir]

use shapefactor::synthdata::{generate_dataset, DatasetConfig, Family};
use shapefactor::voxel::{export_obj, extract_parts, voxel_mesh, LabeledGrid, OccupancyGrid};

fn main() -> shapefactor::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "meshes".into());
    std::fs::create_dir_all(&out).map_err(|e| shapefactor::Error::Invalid(e.to_string()))?;
    for family in [Family::Chair, Family::Table] {
        let config = DatasetConfig { family, ..DatasetConfig::new(1, 1, 1, 5, 32) };
        let shape = &generate_dataset(&config)?.shapes[0];
        let path = format!("{out}/{}.obj", family.name());
        export_obj(shape, path.as_ref())?;
        println!("{path}: {} faces", voxel_mesh(shape).face_count());

        // canonical parts binarized and labeled with their own part index
        let parts = extract_parts(shape);
        for (k, (vol, name)) in parts.parts.iter().zip(shape.schema().names()).enumerate() {
            if !parts.present[k] {
                continue;
            }
            let occ = OccupancyGrid::from_volume(parts.resolution, vol, 0.5);
            let labels = occ.data().iter().map(|&o| o * (k as u8 + 1)).collect();
            let grid = LabeledGrid::from_labels(parts.resolution, labels, shape.schema().clone())?;
            let path = format!("{out}/{}_{name}_canonical.obj", family.name());
            export_obj(&grid, path.as_ref())?;
            println!("{path}: {} faces", voxel_mesh(&grid).face_count());
        }
    }
    Ok(())
}
